"""
能力注册表

保存 AIDL 能力声明，按"本体 + 向量 + 约束"三路证据回答能力查询。
注册走单写者并整体替换快照，discover 只读取当时的快照，永远看不到半完成的注册。
"""
import logging
import threading
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.broker.umb_broker import UMBBroker, reply_topic
from src.core.errors import (
    DimensionMismatch, EmbeddingFailure, EmptyText, InvalidSignature,
    MalformedQuery, ModxError, StaleVersion, ZeroVector,
)
from src.core.model import (
    MessageEnvelope, MessageType, TopicPattern, b64url_encode, canonicalize, doc_digest,
)
from src.discovery.aidl import (
    CapabilityNeed, CapabilityRecord, humanize_capability, parse_aidl, parse_semver,
)
from src.discovery.ontology import OntologyGraph
from src.discovery.scoring import (
    ConstraintVerdict, MatchResult, SynthesisWeights, constraint_check, onto_score, vec_score,
)
from src.translation.alignment import AlignmentMap, align
from src.translation.constraints import ConstraintCatalog
from src.translation.embedder import HashingEmbedder
from src.trust.identity import AgentKey
from src.trust.ledger import RecordType, TrustLedger

logger = logging.getLogger(__name__)

REGISTRY_ID = "modx-registry"
QUERY_TOPIC = "registry.query"


@dataclass(frozen=True)
class DiscoveryConfig:
    weights: SynthesisWeights = SynthesisWeights()
    score_floor: float = 0.5
    ontology_decay: float = 0.9
    reputation_multiplier: bool = False

    def __post_init__(self):
        if not 0.0 <= self.score_floor <= 1.0:
            raise ValueError(f"scoreFloor 必须在 [0, 1] 内: {self.score_floor}")
        if not 0.0 < self.ontology_decay <= 1.0:
            raise ValueError(f"ontologyDecay 必须在 (0, 1] 内: {self.ontology_decay}")

    @classmethod
    def from_dict(cls, params: Mapping[str, Any]) -> "DiscoveryConfig":
        return cls(
            weights=SynthesisWeights.from_list(params.get("weights", [0.4, 0.4, 0.2])),
            score_floor=float(params.get("scoreFloor", 0.5)),
            ontology_decay=float(params.get("ontologyDecay", 0.9)),
            reputation_multiplier=bool(params.get("reputationMultiplier", False)),
        )


class CapabilityRegistry:

    def __init__(self, dimension: int, embedder: HashingEmbedder, ontology: OntologyGraph,
                 catalog: ConstraintCatalog, trust: TrustLedger,
                 config: Optional[DiscoveryConfig] = None,
                 alignments: Optional[Mapping[str, AlignmentMap]] = None,
                 service_key: Optional[AgentKey] = None):
        if embedder.dimension != dimension:
            raise DimensionMismatch(f"嵌入器维度 {embedder.dimension} 与注册表维度 {dimension} 不符")
        self.dimension = dimension
        self.embedder = embedder
        self.ontology = ontology
        self.catalog = catalog
        self.trust = trust
        self.config = config or DiscoveryConfig()
        self._alignments: Dict[str, AlignmentMap] = dict(alignments or {})
        self._records: Dict[Tuple[str, str], CapabilityRecord] = {}
        self._aliases: Dict[str, CapabilityNeed] = {}
        self._write_lock = threading.Lock()
        if service_key is None:
            _, service_key = trust.generate_identity(REGISTRY_ID)
        self.service_key = service_key

    # ---- 注册 ----
    def add_alignment(self, amap: AlignmentMap) -> None:
        if amap.target_dimension != self.dimension:
            raise DimensionMismatch(f"对齐映射目标维度 {amap.target_dimension} 与注册表维度 {self.dimension} 不符")
        with self._write_lock:
            self._alignments = {**self._alignments, amap.source_model_id: amap}

    def _resolve_embedding(self, record: CapabilityRecord) -> CapabilityRecord:
        if record.embedding_model is not None:
            amap = self._alignments.get(record.embedding_model)
            if amap is None:
                raise DimensionMismatch(f"{record.agent_id}/{record.name} 使用了未登记的嵌入模型 {record.embedding_model}",
                                        embeddingModel=record.embedding_model)
            if record.embedding is None:
                raise DimensionMismatch(f"{record.agent_id}/{record.name} 声明了 embeddingModel 但没有 embedding")
            record = record.with_embedding(align(record.embedding, amap))
        elif record.embedding is None:
            try:
                return record.with_embedding(self.embedder.embed(record.embedding_text))
            except EmptyText as e:
                raise EmbeddingFailure(f"{record.agent_id}/{record.name} 的 embeddingText 无法嵌入: {e.message}")
        if record.embedding.shape[0] != self.dimension:
            raise DimensionMismatch(
                f"{record.agent_id}/{record.name} 的嵌入维度 {record.embedding.shape[0]} 与注册表维度 {self.dimension} 不符",
                expected=self.dimension, actual=int(record.embedding.shape[0]))
        if not np.any(record.embedding):
            raise ZeroVector(f"{record.agent_id}/{record.name} 的嵌入是零向量")
        return record

    def register(self, aidl: Dict[str, Any], signature: bytes) -> Dict[str, Any]:
        """
        登记一个智能体的 AIDL 声明

        参数:
            aidl: Listing 形式的声明 {"agentId", "capabilities": [...]}
            signature: 智能体对 canonicalize(aidl) 的 Ed25519 签名
        返回:
            确认文档 {"agentId", "registered": [{capability, version, ledger}]}
        """
        agent_id = aidl.get("agentId") if isinstance(aidl, dict) else None
        if not isinstance(agent_id, str) or not self.trust.identities.verify(agent_id, canonicalize(aidl), signature):
            raise InvalidSignature(f"AIDL 签名无效: {agent_id}", agentId=str(agent_id))
        records = [self._resolve_embedding(r) for r in parse_aidl(aidl)]

        with self._write_lock:
            for record in records:
                existing = self._records.get(record.key)
                if existing is not None and parse_semver(record.version) <= parse_semver(existing.version):
                    raise StaleVersion(
                        f"{record.agent_id}/{record.name} 版本 {record.version} 不高于已登记的 {existing.version}",
                        agentId=record.agent_id, capability=record.name, existing=existing.version)
            snapshot = dict(self._records)
            for record in records:
                snapshot[record.key] = record
            self._records = snapshot

        digest = doc_digest(aidl).hex()
        acknowledged = []
        for record in records:
            body = {
                "agentId": record.agent_id,
                "capability": record.name,
                "version": record.version,
                "ontology": record.ontology_iri,
                "aidlDigest": digest,
                "aidlSignature": b64url_encode(signature),
            }
            ref = self.trust.append(RecordType.AGENT_REGISTRATION, body, self.trust.authority_key)
            acknowledged.append({"capability": record.name, "version": record.version, "ledger": ref.to_doc()})
            logger.info(f"能力已登记: {record.agent_id}/{record.name} v{record.version}")
        return {"agentId": agent_id, "registered": acknowledged}

    def deregister(self, agent_id: str, capability: str) -> bool:
        with self._write_lock:
            if (agent_id, capability) not in self._records:
                return False
            snapshot = dict(self._records)
            del snapshot[(agent_id, capability)]
            self._records = snapshot
        logger.info(f"能力已注销: {agent_id}/{capability}")
        return True

    def records(self) -> List[CapabilityRecord]:
        return sorted(self._records.values(), key=lambda r: r.key)

    def get(self, agent_id: str, capability: str) -> Optional[CapabilityRecord]:
        return self._records.get((agent_id, capability))

    def register_need_alias(self, name: str, need: CapabilityNeed) -> None:
        """为 CapabilityQuery 中的裸能力名指定完整需求"""
        with self._write_lock:
            self._aliases = {**self._aliases, name: need}

    # ---- 发现 ----
    def _need_vector(self, need: CapabilityNeed) -> np.ndarray:
        if need.embedding is not None:
            vector = np.asarray(need.embedding, dtype=np.float64)
            if vector.shape[0] != self.dimension:
                raise DimensionMismatch(f"需求嵌入维度 {vector.shape[0]} 与注册表维度 {self.dimension} 不符",
                                        expected=self.dimension, actual=int(vector.shape[0]))
            return vector
        try:
            return self.embedder.embed(need.functionality)
        except EmptyText as e:
            raise EmbeddingFailure(f"无法嵌入需求描述 {need.functionality!r}: {e.message}")

    def verdicts(self, need: CapabilityNeed, record: CapabilityRecord) -> List[ConstraintVerdict]:
        return [constraint_check(c, record, self.catalog) for c in need.constraints]

    def discover(self, need: CapabilityNeed, weights: Optional[SynthesisWeights] = None,
                 only_capability: Optional[str] = None) -> List[MatchResult]:
        """按合成得分降序返回不低于阈值的匹配，同分按 ontoScore 降序、agentId 升序"""
        weights = weights or self.config.weights
        records = list(self._records.values())
        if only_capability is not None:
            records = [r for r in records if r.name == only_capability]
        if not records:
            return []
        need_vector = self._need_vector(need)

        rows = []
        for record in records:
            onto = onto_score(need.ontology_iri, record.ontology_iri, self.ontology, self.config.ontology_decay)
            vec = vec_score(need_vector, record.embedding)
            verdicts = self.verdicts(need, record)
            constraint = float(np.mean([v.score for v in verdicts])) if verdicts else 1.0
            score = weights.synthesize(onto.score, vec, constraint)
            reputation = None
            if self.config.reputation_multiplier:
                reputation = self.trust.reputation(record.agent_id).score
                score *= reputation
            rows.append({
                "agentId": record.agent_id,
                "capability": record.name,
                "score": score,
                "ontoScore": onto.score,
                "vecScore": vec,
                "constraintScore": constraint,
                "plan": {v.constraint: v.plan for v in verdicts},
                "ontoFlag": onto.flag,
                "reputation": reputation,
            })

        table = pd.DataFrame(rows)
        table = table[table["score"] >= self.config.score_floor]
        table = table.sort_values(by=["score", "ontoScore", "agentId", "capability"],
                                  ascending=[False, False, True, True], kind="mergesort")
        results = [
            MatchResult(
                agent_id=row["agentId"],
                capability=row["capability"],
                score=float(row["score"]),
                onto_score=float(row["ontoScore"]),
                vec_score=float(row["vecScore"]),
                constraint_score=float(row["constraintScore"]),
                constraint_plan=row["plan"],
                onto_flag=row["ontoFlag"] if isinstance(row["ontoFlag"], str) else None,
                reputation=None if row["reputation"] is None or pd.isna(row["reputation"]) else float(row["reputation"]),
            )
            for row in table.to_dict("records")
        ]
        logger.debug(f"discover({need.functionality!r}): {len(records)} 个候选，{len(results)} 个高于阈值")
        return results

    # ---- 查询消息 ----
    def _resolve_entry(self, entry: Any, index: int) -> Tuple[str, CapabilityNeed, Optional[str]]:
        if isinstance(entry, str):
            if not entry.strip():
                raise MalformedQuery(f"第 {index} 个查询项为空", entry=index)
            alias = self._aliases.get(entry)
            if alias is not None:
                return entry, alias, None
            return entry, CapabilityNeed(humanize_capability(entry)), entry
        try:
            need = CapabilityNeed.from_doc(entry)
        except MalformedQuery as e:
            raise MalformedQuery(f"第 {index} 个查询项非法: {e.message}", entry=index)
        name = entry.get("name") if isinstance(entry.get("name"), str) else need.functionality
        return name, need, None

    def answer_query(self, capabilities: Sequence[Any]) -> Dict[str, List[Dict[str, Any]]]:
        if not isinstance(capabilities, list) or not capabilities:
            raise MalformedQuery("capabilities 必须是非空数组")
        resolved = [self._resolve_entry(entry, i) for i, entry in enumerate(capabilities)]
        return {name: [m.to_doc() for m in self.discover(need, only_capability=only)]
                for name, need, only in resolved}

    def handle_capability_query(self, env: MessageEnvelope) -> MessageEnvelope:
        """处理 CapabilityQuery，返回签名的 CapabilityResponse；查询非法时返回 Error 信封"""
        if not env.correlation_id:
            raise MalformedQuery("CapabilityQuery 缺少 correlationId", messageId=env.message_id)
        payload = env.payload if isinstance(env.payload, dict) else {}
        request_id = payload.get("requestId", env.correlation_id)
        try:
            results = self.answer_query(payload.get("capabilities"))
            message_type, body = MessageType.CAPABILITY_RESPONSE, {"requestId": request_id, "results": results}
        except ModxError as e:
            logger.warning(f"能力查询 {env.message_id} 非法: {e}")
            message_type, body = MessageType.ERROR, e.to_doc()
        response = MessageEnvelope(
            message_id=f"{env.message_id}/r",
            message_type=message_type,
            topic=reply_topic(env.sender),
            sender=self.service_key.agent_id,
            timestamp=self.trust.clock.now(),
            payload=body,
            correlation_id=env.correlation_id,
        )
        return self.service_key.sign_envelope(response)

    def attach(self, broker: UMBBroker) -> None:
        """订阅查询主题，收到 CapabilityQuery 即在总线上应答"""

        def on_message(env: MessageEnvelope) -> None:
            if env.message_type is MessageType.CAPABILITY_QUERY:
                broker.publish(self.handle_capability_query(env))

        broker.subscribe(self.service_key.agent_id, TopicPattern.parse(QUERY_TOPIC))
        broker.connect(self.service_key.agent_id, on_message)


def matches_to_listing(results: Sequence[MatchResult]) -> Dict[str, Any]:
    """渲染成"发现结果 + 置信度"清单的形状"""

    def strength(value: float) -> str:
        if value >= 0.95:
            return "Strong"
        if value >= 0.7:
            return "Moderate"
        return "Weak" if value > 0 else "None"

    matches = []
    for result in results:
        plans = result.constraint_plan
        if not plans or all(p.value != "Unsatisfied" for p in plans.values()):
            satisfaction = "Complete"
        elif any(p.value != "Unsatisfied" for p in plans.values()):
            satisfaction = "Partial"
        else:
            satisfaction = "None"
        matches.append({
            "agentId": result.agent_id,
            "capability": result.capability,
            "confidence": round(result.score, 4),
            "ontologicalMatch": strength(result.onto_score),
            "semanticSimilarity": round(result.vec_score, 4),
            "constraintSatisfaction": satisfaction,
            "constraintPlan": {k: v.value for k, v in plans.items()},
        })
    return {"matches": matches}
