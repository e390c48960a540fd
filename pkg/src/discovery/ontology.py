"""
本体图

节点是 IRI，子类边 child→parent，等价边无向。等价类用并查集收缩，
收缩后的子类图必须无环。
"""
import logging
from collections import deque
from typing import Dict, List, Optional, Set, Tuple

from src.core.errors import MalformedDocument, OntologyCycle
from src.core.model import normalize_iri
from src.utils import load_json

logger = logging.getLogger(__name__)


class OntologyGraph:

    def __init__(self):
        self._parent: Dict[str, str] = {}
        self._subclass: Set[Tuple[str, str]] = set()
        self._equivalent: Set[Tuple[str, str]] = set()

    # ---- 并查集 ----
    def _find(self, iri: str) -> str:
        root = iri
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[iri] != root:
            self._parent[iri], iri = root, self._parent[iri]
        return root

    def _union(self, a: str, b: str) -> None:
        ra, rb = self._find(a), self._find(b)
        if ra == rb:
            return
        # 字典序较小者作为代表，保证结果与加载顺序无关
        if rb < ra:
            ra, rb = rb, ra
        self._parent[rb] = ra

    def _rebuild(self) -> None:
        self._parent = {n: n for n in self.nodes}
        for a, b in self._equivalent:
            self._union(a, b)

    # ---- 构建 ----
    @property
    def nodes(self) -> Set[str]:
        found = set(self._parent)
        for a, b in self._subclass | self._equivalent:
            found.update((a, b))
        return found

    def add_node(self, iri: str) -> str:
        iri = normalize_iri(iri)
        self._parent.setdefault(iri, iri)
        return iri

    def add_subclass(self, child: str, parent: str) -> None:
        edge = (self.add_node(child), self.add_node(parent))
        self._subclass.add(edge)
        try:
            self.check_acyclic()
        except OntologyCycle:
            self._subclass.discard(edge)
            raise

    def add_equivalence(self, a: str, b: str) -> None:
        edge = tuple(sorted((self.add_node(a), self.add_node(b))))
        self._equivalent.add(edge)
        self._union(*edge)
        try:
            self.check_acyclic()
        except OntologyCycle:
            self._equivalent.discard(edge)
            self._rebuild()
            raise

    @classmethod
    def from_doc(cls, doc: Dict) -> "OntologyGraph":
        """读取 {subclass: [[child, parent], ...], equivalent: [[a, b], ...]}"""
        if not isinstance(doc, dict):
            raise MalformedDocument("本体文件必须是 JSON 对象")
        graph = cls()
        try:
            for a, b in doc.get("equivalent", []):
                graph.add_equivalence(a, b)
            for child, parent in doc.get("subclass", []):
                graph.add_subclass(child, parent)
        except (TypeError, ValueError) as e:
            raise MalformedDocument(f"本体边格式错误: {e}")
        logger.info(f"本体图加载完成: {len(graph.nodes)} 个节点，{len(graph._subclass)} 条子类边")
        return graph

    @classmethod
    def load(cls, path: str) -> "OntologyGraph":
        return cls.from_doc(load_json(path))

    # ---- 查询 ----
    def contains(self, iri: str) -> bool:
        return normalize_iri(iri) in self._parent

    def representative(self, iri: str) -> str:
        return self._find(normalize_iri(iri))

    def equivalent(self, a: str, b: str) -> bool:
        if not (self.contains(a) and self.contains(b)):
            return False
        return self.representative(a) == self.representative(b)

    def _contracted_parents(self) -> Dict[str, Set[str]]:
        parents: Dict[str, Set[str]] = {}
        for child, parent in self._subclass:
            rc, rp = self._find(child), self._find(parent)
            if rc != rp:
                parents.setdefault(rc, set()).add(rp)
        return parents

    def check_acyclic(self) -> None:
        parents = self._contracted_parents()
        state: Dict[str, int] = {}

        def visit(node: str, path: List[str]) -> None:
            state[node] = 1
            for parent in sorted(parents.get(node, ())):
                if state.get(parent) == 1:
                    cycle = path[path.index(parent):] + [parent] if parent in path else [node, parent]
                    raise OntologyCycle(f"子类关系成环: {' ⊑ '.join(cycle)}", cycle=cycle)
                if parent not in state:
                    visit(parent, path + [parent])
            state[node] = 2

        for node in sorted(parents):
            if node not in state:
                visit(node, [node])

    def distance(self, offered: str, need: str) -> Optional[int]:
        """从 offered 沿子类边走到 need 的最短步数（等价类内部距离为 0），不可达返回 None"""
        if not (self.contains(offered) and self.contains(need)):
            return None
        start, goal = self.representative(offered), self.representative(need)
        parents = self._contracted_parents()
        seen = {start}
        queue = deque([(start, 0)])
        while queue:
            node, hops = queue.popleft()
            if node == goal:
                return hops
            for parent in sorted(parents.get(node, ())):
                if parent not in seen:
                    seen.add(parent)
                    queue.append((parent, hops + 1))
        return None

    def to_doc(self) -> Dict[str, List[List[str]]]:
        return {
            "subclass": [list(e) for e in sorted(self._subclass)],
            "equivalent": [list(e) for e in sorted(self._equivalent)],
        }

