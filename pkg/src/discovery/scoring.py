"""
能力匹配打分

符号路径（本体距离）、亚符号路径（余弦相似度）与约束校验三路证据，
按 SynthesisWeights 线性合成最终得分。
"""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence

import numpy as np

from src.core.errors import DimensionMismatch, ZeroVector
from src.core.model import normalize_iri
from src.discovery.aidl import CapabilityRecord, enum_values
from src.discovery.ontology import OntologyGraph
from src.translation.constraints import ConstraintCatalog, ConstraintRewrite

UNCONSTRAINED = "unconstrained"
MISSING_TERM = "MissingTerm"


@dataclass(frozen=True)
class SynthesisWeights:
    w_o: float = 0.4
    w_v: float = 0.4
    w_c: float = 0.2

    def __post_init__(self):
        if min(self.w_o, self.w_v, self.w_c) < 0:
            raise ValueError(f"合成权重不能为负: {self}")
        if abs(self.w_o + self.w_v + self.w_c - 1.0) > 1e-9:
            raise ValueError(f"合成权重之和必须为 1: {self}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "SynthesisWeights":
        w_o, w_v, w_c = (float(v) for v in values)
        return cls(w_o, w_v, w_c)

    def synthesize(self, onto: float, vec: float, constraint: float) -> float:
        return self.w_o * onto + self.w_v * vec + self.w_c * constraint

    def to_list(self):
        return [self.w_o, self.w_v, self.w_c]


@dataclass(frozen=True)
class OntoMatch:
    score: float
    distance: Optional[int] = None
    flag: Optional[str] = None


def onto_score(need_iri: Optional[str], offered_iri: str, graph: OntologyGraph, decay: float = 0.9) -> OntoMatch:
    """本体匹配度：等价为 1.0，每多一层子类乘以 decay，不可达为 0"""
    if need_iri is None:
        return OntoMatch(1.0, None, UNCONSTRAINED)
    if normalize_iri(need_iri) == normalize_iri(offered_iri):
        return OntoMatch(1.0, 0)
    if not (graph.contains(need_iri) and graph.contains(offered_iri)):
        return OntoMatch(0.0, None, MISSING_TERM)
    distance = graph.distance(offered_iri, need_iri)
    if distance is None:
        return OntoMatch(0.0)
    return OntoMatch(float(decay ** distance), distance)


def vec_score(need: Sequence[float], offered: Sequence[float]) -> float:
    """max(0, cos)，对正数缩放不变"""
    a = np.asarray(need, dtype=np.float64)
    b = np.asarray(offered, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"向量维度不一致: {a.shape} vs {b.shape}")
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("不能对零向量计算余弦相似度")
    cosine = float(np.dot(a, b) / (norm_a * norm_b))
    return min(1.0, max(0.0, cosine))


class ConstraintPlan(str, Enum):
    EXPLICIT_PARAMETER = "ExplicitParameter"
    SEMANTIC_TRANSLATION = "SemanticTranslation"
    POST_FILTER = "PostFilter"
    UNSATISFIED = "Unsatisfied"


PLAN_SCORES = {
    ConstraintPlan.EXPLICIT_PARAMETER: 1.0,
    ConstraintPlan.SEMANTIC_TRANSLATION: 1.0,
    ConstraintPlan.POST_FILTER: 0.8,
    ConstraintPlan.UNSATISFIED: 0.0,
}


@dataclass(frozen=True)
class ConstraintVerdict:
    constraint: str
    plan: ConstraintPlan
    rewrite: Optional[ConstraintRewrite] = None
    parameter: Optional[str] = None

    @property
    def score(self) -> float:
        return PLAN_SCORES[self.plan]


def constraint_check(constraint: str, record: CapabilityRecord, catalog: ConstraintCatalog) -> ConstraintVerdict:
    """
    判定约束在某个能力上的满足方式

    依次尝试：显式参数（参数名或枚举值，大小写不敏感，含同义词）、
    注入式语义改写、基于输出字段的后置过滤；都不满足时为 Unsatisfied。
    """
    terms = set(catalog.terms_for(constraint))
    for operation, param, kind in record.parameters():
        if param.lower() in terms:
            return ConstraintVerdict(constraint, ConstraintPlan.EXPLICIT_PARAMETER, parameter=f"{operation}.{param}")
        if any(value.lower() in terms for value in enum_values(kind)):
            return ConstraintVerdict(constraint, ConstraintPlan.EXPLICIT_PARAMETER, parameter=f"{operation}.{param}")

    rewrites = catalog.rewrites_for(constraint)
    for rw in rewrites:
        if rw.is_injection and rw.applies_to(record.ontology_iri, record.operations):
            return ConstraintVerdict(constraint, ConstraintPlan.SEMANTIC_TRANSLATION, rewrite=rw)
    fields = record.output_field_names()
    for rw in rewrites:
        if not rw.is_injection and rw.filter_field in fields:
            return ConstraintVerdict(constraint, ConstraintPlan.POST_FILTER, rewrite=rw)
    return ConstraintVerdict(constraint, ConstraintPlan.UNSATISFIED)


@dataclass(frozen=True)
class MatchResult:
    agent_id: str
    capability: str
    score: float
    onto_score: float
    vec_score: float
    constraint_score: float
    constraint_plan: Dict[str, ConstraintPlan]
    onto_flag: Optional[str] = None
    reputation: Optional[float] = None

    def to_doc(self) -> Dict[str, Any]:
        breakdown: Dict[str, Any] = {
            "ontoScore": self.onto_score,
            "vecScore": self.vec_score,
            "constraintScore": self.constraint_score,
            "constraintPlan": {k: v.value for k, v in self.constraint_plan.items()},
        }
        if self.onto_flag is not None:
            breakdown["ontoFlag"] = self.onto_flag
        doc = {"agentId": self.agent_id, "capability": self.capability, "score": self.score,
               "breakdown": breakdown}
        if self.reputation is not None:
            doc["reputation"] = self.reputation
        return doc
