"""
订阅模式的前缀树索引

按段逐层存放模式；`*` 走单独的通配子节点，以 `#` 结尾的模式挂在 `#` 之前那一层。
"""
from typing import Dict, Optional, Set

from src.core.model import Topic, TopicPattern


class _Node:
    __slots__ = ("children", "star", "exact", "tail")

    def __init__(self):
        self.children: Dict[str, "_Node"] = {}
        self.star: Optional["_Node"] = None
        self.exact: Set[str] = set()  # 模式恰好在这一层结束
        self.tail: Set[str] = set()   # 模式在这一层之后是 `#`


class TopicIndex:

    def __init__(self):
        self._root = _Node()

    def add(self, pattern: TopicPattern, subscription_id: str) -> None:
        node = self._root
        for segment in pattern.segments:
            if segment == "#":
                node.tail.add(subscription_id)
                return
            if segment == "*":
                if node.star is None:
                    node.star = _Node()
                node = node.star
            else:
                node = node.children.setdefault(segment, _Node())
        node.exact.add(subscription_id)

    def remove(self, pattern: TopicPattern, subscription_id: str) -> None:
        node = self._root
        for segment in pattern.segments:
            if segment == "#":
                node.tail.discard(subscription_id)
                return
            node = node.star if segment == "*" else node.children.get(segment)
            if node is None:
                return
        node.exact.discard(subscription_id)

    def match(self, topic: Topic) -> Set[str]:
        found: Set[str] = set()
        self._walk(self._root, topic.segments, 0, found)
        return found

    def _walk(self, node: _Node, segments, depth: int, found: Set[str]) -> None:
        found.update(node.tail)
        if depth == len(segments):
            found.update(node.exact)
            return
        child = node.children.get(segments[depth])
        if child is not None:
            self._walk(child, segments, depth + 1, found)
        if node.star is not None:
            self._walk(node.star, segments, depth + 1, found)
