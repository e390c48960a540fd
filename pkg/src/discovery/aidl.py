"""
AIDL 能力声明与能力需求
"""
import copy
import math
import re
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Set, Tuple

import numpy as np

from src.core.errors import MalformedCapability, MalformedQuery
from src.core.model import validate_agent_id

SEMVER_RE = re.compile(r"^(\d+)\.(\d+)\.(\d+)$")
ENUM_RE = re.compile(r"^enum<(.+)>$")
_CAMEL_RE = re.compile(r"[A-Z]?[a-z0-9]+|[A-Z]+(?![a-z])")


def parse_semver(version: str) -> Tuple[int, int, int]:
    match = SEMVER_RE.match(version) if isinstance(version, str) else None
    if match is None:
        raise MalformedCapability(f"版本号必须是 MAJOR.MINOR.PATCH: {version!r}", version=str(version))
    return tuple(int(part) for part in match.groups())


def humanize_capability(name: str) -> str:
    """flightBooking → "flight booking" """
    return " ".join(part.lower() for part in _CAMEL_RE.findall(name)) or name


def enum_values(type_name: str) -> List[str]:
    """从 "enum<a|b|c>" 或 "enum<a|b>?" 中取出枚举值"""
    match = ENUM_RE.match(type_name.rstrip("?")) if isinstance(type_name, str) else None
    return [v.strip() for v in match.group(1).split("|")] if match else []


@dataclass(frozen=True, eq=False)
class CapabilityRecord:
    agent_id: str
    name: str
    version: str
    ontology_iri: str
    operations: Tuple[str, ...]
    inputs: Dict[str, Dict[str, str]] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    output_fields: Dict[str, List[str]] = field(default_factory=dict)
    embedding: Optional[np.ndarray] = None
    embedding_model: Optional[str] = None
    embedding_text: Optional[str] = None

    @property
    def key(self) -> Tuple[str, str]:
        return self.agent_id, self.name

    def parameters(self) -> List[Tuple[str, str, str]]:
        """(operation, 参数名, 语义类型) 列表"""
        return [(op, param, kind) for op in sorted(self.inputs) for param, kind in sorted(self.inputs[op].items())]

    def output_field_names(self) -> Set[str]:
        return {name for names in self.output_fields.values() for name in names}

    def with_embedding(self, embedding: np.ndarray) -> "CapabilityRecord":
        return replace(self, embedding=np.asarray(embedding, dtype=np.float64))

    def to_aidl(self) -> Dict[str, Any]:
        semantics: Dict[str, Any] = {"ontology": self.ontology_iri, "operations": list(self.operations)}
        if self.embedding is not None:
            semantics["embedding"] = self.embedding.tolist()
        if self.embedding_model is not None:
            semantics["embeddingModel"] = self.embedding_model
        if self.embedding_text is not None:
            semantics["embeddingText"] = self.embedding_text
        interface: Dict[str, Any] = {"inputs": copy.deepcopy(self.inputs), "outputs": dict(self.outputs)}
        if self.output_fields:
            interface["outputFields"] = copy.deepcopy(self.output_fields)
        return {"name": self.name, "version": self.version, "semantics": semantics, "interface": interface}


def _parse_capability(agent_id: str, doc: Dict[str, Any], index: int) -> CapabilityRecord:
    where = f"{agent_id} 的第 {index} 个能力"
    try:
        name = doc["name"]
        version = doc["version"]
        semantics = doc["semantics"]
        ontology = semantics["ontology"]
        operations = semantics["operations"]
    except (KeyError, TypeError) as e:
        raise MalformedCapability(f"{where} 缺少字段: {e}", agentId=agent_id, index=index)
    if not isinstance(name, str) or not name:
        raise MalformedCapability(f"{where} 的 name 为空", agentId=agent_id, index=index)
    parse_semver(version)
    if not isinstance(operations, list) or not operations or not all(isinstance(op, str) for op in operations):
        raise MalformedCapability(f"{where} 的 operations 不能为空", agentId=agent_id, capability=name)

    interface = doc.get("interface", {}) or {}
    inputs = interface.get("inputs", {}) or {}
    outputs = interface.get("outputs", {}) or {}
    output_fields = interface.get("outputFields", {}) or {}
    for section in (inputs, outputs, output_fields):
        unknown = sorted(set(section) - set(operations))
        if unknown:
            raise MalformedCapability(f"{where} 的接口引用了未声明的操作: {', '.join(unknown)}",
                                      agentId=agent_id, capability=name, operations=unknown)

    embedding = semantics.get("embedding")
    if embedding is not None:
        if not isinstance(embedding, list) or not embedding:
            raise MalformedCapability(f"{where} 的 embedding 必须是非空数组", agentId=agent_id, capability=name)
        try:
            embedding = np.asarray(embedding, dtype=np.float64)
        except (TypeError, ValueError):
            raise MalformedCapability(f"{where} 的 embedding 不是数值数组", agentId=agent_id, capability=name)
        if embedding.ndim != 1 or not np.all(np.isfinite(embedding)):
            raise MalformedCapability(f"{where} 的 embedding 含非有限值", agentId=agent_id, capability=name)
    elif not semantics.get("embeddingText"):
        raise MalformedCapability(f"{where} 需要 embedding 或 embeddingText", agentId=agent_id, capability=name)

    return CapabilityRecord(
        agent_id=agent_id,
        name=name,
        version=version,
        ontology_iri=str(ontology),
        operations=tuple(operations),
        inputs={op: dict(params) for op, params in inputs.items()},
        outputs=dict(outputs),
        output_fields={op: list(names) for op, names in output_fields.items()},
        embedding=embedding,
        embedding_model=semantics.get("embeddingModel"),
        embedding_text=semantics.get("embeddingText"),
    )


def parse_aidl(doc: Any) -> List[CapabilityRecord]:
    """解析 {"agentId", "capabilities": [...]} 形式的 AIDL 声明"""
    if not isinstance(doc, dict) or "agentId" not in doc or not isinstance(doc.get("capabilities"), list):
        raise MalformedCapability("AIDL 声明需要 agentId 和 capabilities 数组")
    agent_id = validate_agent_id(doc["agentId"])
    if not doc["capabilities"]:
        raise MalformedCapability(f"{agent_id} 没有声明任何能力", agentId=agent_id)
    records = [_parse_capability(agent_id, cap, i) for i, cap in enumerate(doc["capabilities"])]
    names = [r.name for r in records]
    if len(set(names)) != len(names):
        raise MalformedCapability(f"{agent_id} 重复声明了同名能力", agentId=agent_id)
    return records


@dataclass(frozen=True)
class CapabilityNeed:
    functionality: str
    ontology_iri: Optional[str] = None
    constraints: Tuple[str, ...] = ()
    embedding: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if not isinstance(self.functionality, str) or not self.functionality.strip():
            raise MalformedQuery("functionality 不能为空")
        if self.embedding is not None and not all(math.isfinite(x) for x in self.embedding):
            raise MalformedQuery("需求嵌入含非有限值")

    @classmethod
    def from_doc(cls, doc: Any) -> "CapabilityNeed":
        """接受 {"required": {...}} 或直接的需求对象"""
        if isinstance(doc, dict) and isinstance(doc.get("required"), dict):
            doc = doc["required"]
        if not isinstance(doc, dict):
            raise MalformedQuery("能力需求必须是 JSON 对象")
        constraints = doc.get("constraints", [])
        if not isinstance(constraints, list) or not all(isinstance(c, str) for c in constraints):
            raise MalformedQuery("constraints 必须是字符串数组")
        ontology = doc.get("ontology")
        if ontology is not None and not isinstance(ontology, str):
            raise MalformedQuery("ontology 必须是字符串")
        embedding = doc.get("embedding")
        if embedding is not None:
            if not isinstance(embedding, list) or not all(
                    isinstance(x, (int, float)) and not isinstance(x, bool) for x in embedding):
                raise MalformedQuery("embedding 必须是数值数组")
            embedding = tuple(float(x) for x in embedding)
        return cls(doc.get("functionality", ""), ontology, tuple(constraints), embedding)

    def to_doc(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"functionality": self.functionality, "constraints": list(self.constraints)}
        if self.ontology_iri is not None:
            doc["ontology"] = self.ontology_iri
        if self.embedding is not None:
            doc["embedding"] = list(self.embedding)
        return {"required": doc}
