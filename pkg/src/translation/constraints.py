"""
约束改写

把抽象约束（如 directFlights）落到具体智能体上：要么向请求注入参数
（maxConnections: 0），要么在结果上做后置过滤（connections == 0）。
"""
import copy
import logging
import operator
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from src.core.errors import InvalidConceptTable, MalformedDocument, PathConflict
from src.core.model import normalize_iri
from src.utils import load_json

logger = logging.getLogger(__name__)

_MISSING = object()

PREDICATES: Dict[str, Callable[[Any, Any], bool]] = {
    "eq": operator.eq,
    "ne": operator.ne,
    "lt": operator.lt,
    "lte": operator.le,
    "gt": operator.gt,
    "gte": operator.ge,
    "in": lambda value, options: value in options,
}


def get_path(doc: Any, path: str) -> Any:
    node = doc
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            return _MISSING
        node = node[key]
    return node


@dataclass(frozen=True)
class Predicate:
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in PREDICATES:
            raise InvalidConceptTable(f"不支持的过滤谓词: {self.op}", op=self.op)

    def test(self, value: Any) -> bool:
        try:
            return bool(PREDICATES[self.op](value, self.value))
        except TypeError:
            return False

    def to_doc(self) -> Dict[str, Any]:
        return {"op": self.op, "value": self.value}


@dataclass(frozen=True)
class ConstraintRewrite:
    """注入模式 (injection) 与过滤模式 (filter_field) 二选一"""

    constraint_name: str
    injection: Optional[Tuple[str, Any]] = None
    filter_field: Optional[str] = None
    predicate: Optional[Predicate] = None
    ontology_iri: Optional[str] = None
    operation: Optional[str] = None

    def __post_init__(self):
        if (self.injection is None) == (self.filter_field is None):
            raise InvalidConceptTable(f"约束 {self.constraint_name} 必须且只能设置 injection 或 filterField",
                                      constraint=self.constraint_name)
        if self.filter_field is not None and self.predicate is None:
            raise InvalidConceptTable(f"约束 {self.constraint_name} 的过滤模式缺少 predicate",
                                      constraint=self.constraint_name)

    @property
    def is_injection(self) -> bool:
        return self.injection is not None

    def applies_to(self, ontology_iri: Optional[str], operations: Sequence[str]) -> bool:
        if self.ontology_iri is not None and normalize_iri(self.ontology_iri) != normalize_iri(ontology_iri or ""):
            return False
        return self.operation is None or self.operation in operations

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "ConstraintRewrite":
        try:
            injection = None
            if "injection" in doc:
                injection = (str(doc["injection"]["path"]), copy.deepcopy(doc["injection"]["value"]))
            predicate = Predicate(doc["predicate"]["op"], doc["predicate"]["value"]) if "predicate" in doc else None
            return cls(str(doc["constraint"]), injection, doc.get("filterField"), predicate,
                       doc.get("ontology"), doc.get("operation"))
        except (KeyError, TypeError) as e:
            raise InvalidConceptTable(f"约束改写格式错误: {e}")

    def to_doc(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"constraint": self.constraint_name}
        if self.injection is not None:
            doc["injection"] = {"path": self.injection[0], "value": self.injection[1]}
        else:
            doc["filterField"] = self.filter_field
            doc["predicate"] = self.predicate.to_doc()
        if self.ontology_iri is not None:
            doc["ontology"] = self.ontology_iri
        if self.operation is not None:
            doc["operation"] = self.operation
        return doc


def rewrite_for_constraint(request: Any, rw: ConstraintRewrite) -> Any:
    """在请求中注入约束参数；目标位置已有不同取值时抛出 PathConflict"""
    if not rw.is_injection:
        raise InvalidConceptTable(f"约束 {rw.constraint_name} 不是注入模式")
    if not isinstance(request, dict):
        raise MalformedDocument("只能向 JSON 对象注入参数")
    path, value = rw.injection
    result = copy.deepcopy(request)
    node = result
    keys = path.split(".")
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise PathConflict(f"注入路径 {path} 穿过了非对象值", path=path)
        node = child
    last = keys[-1]
    if last in node and node[last] != value:
        raise PathConflict(f"{path} 已设置为 {node[last]!r}，与约束 {rw.constraint_name} 冲突",
                           path=path, constraint=rw.constraint_name)
    node[last] = copy.deepcopy(value)
    return result


def filter_results(results: Sequence[Any], rw: ConstraintRewrite) -> List[Any]:
    """保留 filter_field 满足谓词的结果；缺少该字段的结果被排除"""
    if rw.is_injection:
        raise InvalidConceptTable(f"约束 {rw.constraint_name} 不是过滤模式")
    kept = []
    for item in results:
        value = get_path(item, rw.filter_field)
        if value is not _MISSING and rw.predicate.test(value):
            kept.append(item)
    logger.debug(f"约束 {rw.constraint_name} 过滤: {len(results)} → {len(kept)}")
    return kept


@dataclass
class ConstraintCatalog:
    """约束同义词表与改写规则"""

    synonyms: Dict[str, List[str]] = field(default_factory=dict)
    rewrites: List[ConstraintRewrite] = field(default_factory=list)

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "ConstraintCatalog":
        if not isinstance(doc, dict):
            raise InvalidConceptTable("约束目录必须是 JSON 对象")
        synonyms = {str(k): [str(v) for v in vs] for k, vs in doc.get("synonyms", {}).items()}
        return cls(synonyms, [ConstraintRewrite.from_doc(r) for r in doc.get("rewrites", [])])

    @classmethod
    def load(cls, path: str) -> "ConstraintCatalog":
        return cls.from_doc(load_json(path))

    def terms_for(self, constraint: str) -> List[str]:
        """约束本身及其同义词，统一小写"""
        terms = [constraint] + self.synonyms.get(constraint, [])
        seen, ordered = set(), []
        for term in terms:
            lowered = term.lower()
            if lowered not in seen:
                seen.add(lowered)
                ordered.append(lowered)
        return ordered

    def rewrites_for(self, constraint: str) -> List[ConstraintRewrite]:
        return [rw for rw in self.rewrites if rw.constraint_name == constraint]
