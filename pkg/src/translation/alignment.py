"""
嵌入空间对齐

用锚点对 (源向量, 目标向量) 做最小二乘拟合一个线性映射 M，
把外部嵌入模型的向量 s 映射到共享空间：normalize(M·s)。
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.errors import DimensionMismatch, MalformedDocument, RankDeficient, ZeroVector
from src.translation.embedder import HashingEmbedder
from src.utils import load_json

logger = logging.getLogger(__name__)

Anchor = Tuple[Sequence[float], Sequence[float]]


@dataclass(frozen=True)
class AlignmentMap:
    source_model_id: str
    matrix: np.ndarray  # 形状 (D, D_src)，作用于列向量
    fit_residual: float

    @property
    def source_dimension(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def target_dimension(self) -> int:
        return int(self.matrix.shape[0])

    def to_doc(self) -> Dict[str, Any]:
        return {
            "sourceModel": self.source_model_id,
            "matrix": self.matrix.tolist(),
            "fitResidual": float(self.fit_residual),
        }

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "AlignmentMap":
        try:
            matrix = np.asarray(doc["matrix"], dtype=np.float64)
            return cls(str(doc["sourceModel"]), matrix, float(doc["fitResidual"]))
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedDocument(f"对齐映射格式错误: {e}")


def fit_alignment(anchors: Sequence[Anchor], source_model_id: str = "anonymous") -> AlignmentMap:
    """
    最小二乘拟合 min Σ‖M·s − t‖²

    参数:
        anchors: (源向量, 目标向量) 列表，至少包含 D_src 个线性无关的源向量
    返回:
        AlignmentMap，fit_residual 为逐元素 RMS 残差
    """
    if not anchors:
        raise RankDeficient("没有锚点，无法拟合对齐映射")
    sources = np.asarray([a[0] for a in anchors], dtype=np.float64)
    targets = np.asarray([a[1] for a in anchors], dtype=np.float64)
    if sources.ndim != 2 or targets.ndim != 2:
        raise DimensionMismatch("锚点向量维度不一致")
    source_dim = sources.shape[1]
    rank = np.linalg.matrix_rank(sources)
    if rank < source_dim:
        raise RankDeficient(f"锚点秩 {rank} 小于源维度 {source_dim}", rank=int(rank), sourceDimension=source_dim)
    solution, _, _, _ = np.linalg.lstsq(sources, targets, rcond=None)
    residual = float(np.sqrt(np.mean((sources @ solution - targets) ** 2)))
    logger.info(f"对齐映射 {source_model_id}: {source_dim} → {targets.shape[1]} 维，RMS 残差 {residual:.3e}")
    return AlignmentMap(source_model_id, solution.T, residual)


def align(vector: Sequence[float], amap: AlignmentMap) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != amap.source_dimension:
        raise DimensionMismatch(f"向量维度 {v.shape} 与源维度 {amap.source_dimension} 不符",
                                expected=amap.source_dimension)
    mapped = amap.matrix @ v
    norm = np.linalg.norm(mapped)
    if norm == 0.0 or not np.isfinite(norm):
        raise ZeroVector("对齐后的向量为零向量")
    return mapped / norm


def anchors_from_doc(doc: Dict[str, Any], embedder: Optional[HashingEmbedder] = None) -> Tuple[str, List[Anchor]]:
    """
    解析锚点文件

    每个锚点形如 {"source": [...], "target": [...]}，或用 "targetText"
    交给共享嵌入器生成目标向量。
    """
    if not isinstance(doc, dict) or "anchors" not in doc:
        raise MalformedDocument("锚点文件需要 anchors 字段")
    model_id = str(doc.get("sourceModel", "anonymous"))
    anchors: List[Anchor] = []
    for i, entry in enumerate(doc["anchors"]):
        if "target" in entry:
            target = entry["target"]
        elif "targetText" in entry:
            if embedder is None:
                raise MalformedDocument(f"第 {i} 个锚点使用 targetText，但没有提供嵌入器")
            target = embedder.embed(entry["targetText"]).tolist()
        else:
            raise MalformedDocument(f"第 {i} 个锚点缺少 target/targetText")
        anchors.append((entry["source"], target))
    return model_id, anchors


def load_alignment(path: str, embedder: Optional[HashingEmbedder] = None) -> AlignmentMap:
    """读取锚点文件并拟合；文件本身已是映射时直接加载"""
    doc = load_json(path)
    if isinstance(doc, dict) and "matrix" in doc:
        return AlignmentMap.from_doc(doc)
    model_id, anchors = anchors_from_doc(doc, embedder)
    return fit_alignment(anchors, model_id)
