"""
Merkle 树

叶子直接使用 32 字节的信封摘要，内部节点为 SHA-256(left || right)，
奇数层复制最后一个节点补齐。
"""
import hashlib
from typing import List, Sequence, Tuple

from src.core.errors import EmptyBatch

# 证明路径中的一步：(兄弟节点哈希, 兄弟是否在左侧)
ProofStep = Tuple[bytes, bool]


def _parent(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(left + right).digest()


def merkle_levels(leaves: Sequence[bytes]) -> List[List[bytes]]:
    if not leaves:
        raise EmptyBatch("批量锚定至少需要一个摘要")
    level = [bytes(leaf) for leaf in leaves]
    levels = [level]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
            levels[-1] = level
        level = [_parent(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    return merkle_levels(leaves)[-1][0]


def inclusion_proof(leaves: Sequence[bytes], index: int) -> List[ProofStep]:
    """第 index 个叶子到根的路径，长度不超过 ceil(log2 n)"""
    if not 0 <= index < len(leaves):
        raise IndexError(f"叶子下标越界: {index}")
    proof: List[ProofStep] = []
    position = index
    for level in merkle_levels(leaves)[:-1]:
        sibling = position ^ 1
        proof.append((level[sibling], sibling < position))
        position //= 2
    return proof


def verify_inclusion(leaf: bytes, proof: Sequence[ProofStep], root: bytes) -> bool:
    node = bytes(leaf)
    for sibling, sibling_on_left in proof:
        node = _parent(sibling, node) if sibling_on_left else _parent(node, sibling)
    return node == root
