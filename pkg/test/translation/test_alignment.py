"""
嵌入空间对齐：用已知正交变换生成锚点，检验拟合能还原该变换
"""
import numpy as np
import pytest

from conftest import fixture_path
from src.core.errors import DimensionMismatch, MalformedDocument, RankDeficient, ZeroVector
from src.translation.alignment import AlignmentMap, align, anchors_from_doc, fit_alignment, load_alignment


def _unit(v):
    return v / np.linalg.norm(v)


@pytest.fixture
def rotation():
    rng = np.random.default_rng(7)
    q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
    return q


def _anchors(rotation, count, seed):
    rng = np.random.default_rng(seed)
    sources = [_unit(rng.normal(size=16)) for _ in range(count)]
    return [(s, rotation @ s) for s in sources]


def test_recovers_orthogonal_map(rotation):
    amap = fit_alignment(_anchors(rotation, 64, seed=1), "rotated-16d")
    assert amap.fit_residual < 1e-9
    assert amap.source_dimension == 16 and amap.target_dimension == 16
    np.testing.assert_allclose(amap.matrix, rotation, atol=1e-9)

    rng = np.random.default_rng(2)
    for _ in range(20):
        held_out = _unit(rng.normal(size=16))
        assert float(align(held_out, amap) @ (rotation @ held_out)) >= 0.999


def test_noisy_anchors_report_residual(rotation):
    rng = np.random.default_rng(3)
    anchors = [(s, t + rng.normal(scale=0.01, size=16)) for s, t in _anchors(rotation, 64, seed=4)]
    amap = fit_alignment(anchors)
    assert 1e-4 < amap.fit_residual < 0.05


def test_rank_deficient(rotation):
    with pytest.raises(RankDeficient):
        fit_alignment(_anchors(rotation, 8, seed=5))
    with pytest.raises(RankDeficient):
        fit_alignment([])


def test_align_checks_dimension_and_zero(rotation):
    amap = fit_alignment(_anchors(rotation, 32, seed=6))
    with pytest.raises(DimensionMismatch):
        align(np.ones(8), amap)
    with pytest.raises(ZeroVector):
        align(np.zeros(16), amap)


def test_map_doc_round_trip(rotation):
    amap = fit_alignment(_anchors(rotation, 32, seed=8), "rotated-16d")
    restored = AlignmentMap.from_doc(amap.to_doc())
    assert restored.source_model_id == "rotated-16d"
    np.testing.assert_array_equal(restored.matrix, amap.matrix)


def test_target_text_anchors_use_shared_embedder(embedder):
    amap = load_alignment(fixture_path("alignment", "aidl-reference-4d.json"), embedder)
    assert amap.source_model_id == "aidl-reference-4d"
    assert (amap.target_dimension, amap.source_dimension) == (64, 4)
    aligned = align([0.2, 0.8, 0.1, 0.7], amap)
    assert float(aligned @ embedder.embed("find and book flights")) == pytest.approx(1.0, abs=1e-9)


def test_target_text_requires_embedder():
    with pytest.raises(MalformedDocument):
        anchors_from_doc({"anchors": [{"source": [1.0], "targetText": "flight"}]})
    with pytest.raises(MalformedDocument):
        anchors_from_doc({"anchors": [{"source": [1.0]}]})
    with pytest.raises(MalformedDocument):
        anchors_from_doc({"sourceModel": "x"})
