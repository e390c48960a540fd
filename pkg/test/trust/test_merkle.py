"""
Merkle 批量锚定：与逐层暴力建树的结果对照
"""
import hashlib
import math
import random

import pytest

from src.core.errors import EmptyBatch
from src.trust.merkle import inclusion_proof, merkle_root, verify_inclusion


def _digest(*parts) -> bytes:
    return hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()


def _oracle_root(leaves):
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hashlib.sha256(level[i] + level[i + 1]).digest() for i in range(0, len(level), 2)]
    return level[0]


@pytest.mark.parametrize("size", range(1, 65))
def test_every_member_proves_and_non_members_fail(size):
    rng = random.Random(size)
    leaves = [_digest("leaf", size, i, rng.random()) for i in range(size)]
    root = merkle_root(leaves)
    assert root == _oracle_root(leaves)

    bound = math.ceil(math.log2(size)) if size > 1 else 0
    proofs = []
    for i, leaf in enumerate(leaves):
        proof = inclusion_proof(leaves, i)
        assert len(proof) <= bound
        assert verify_inclusion(leaf, proof, root)
        proofs.append(proof)

    members = set(leaves)
    for k in range(100):
        outsider = _digest("outsider", size, k, rng.random())
        assert outsider not in members
        assert not verify_inclusion(outsider, proofs[rng.randrange(size)], root)


def test_single_leaf_root_is_the_leaf():
    leaf = _digest("only")
    assert merkle_root([leaf]) == leaf
    assert inclusion_proof([leaf], 0) == []


def test_tampered_proof_fails():
    leaves = [_digest("tamper", i) for i in range(7)]
    root = merkle_root(leaves)
    proof = inclusion_proof(leaves, 3)
    sibling, on_left = proof[0]
    forged = [(bytes([sibling[0] ^ 1]) + sibling[1:], on_left)] + proof[1:]
    assert not verify_inclusion(leaves[3], forged, root)
    flipped = [(sibling, not on_left)] + proof[1:]
    assert not verify_inclusion(leaves[3], flipped, root)


def test_empty_batch_rejected():
    with pytest.raises(EmptyBatch):
        merkle_root([])


def test_index_out_of_range():
    with pytest.raises(IndexError):
        inclusion_proof([_digest("a")], 1)
