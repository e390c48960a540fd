"""
分级信任账本

高价值操作（注册、交易、信誉更新、安全策略）逐条写入哈希链账本；
常规消息只签名，并按时间窗口以 Merkle 根批量锚定。
"""
import hashlib
import logging
import threading
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from src.core.clock import Clock
from src.core.errors import (
    DanglingEvidence, EmptyBatch, InvalidSignature, MalformedDocument,
    MalformedRecord, ModxError, UnknownAgent,
)
from src.core.model import (
    MessageEnvelope, MessageType, b64url_decode, b64url_encode, canonicalize,
    envelope_digest, format_instant, parse_doc, parse_instant, validate_agent_id,
)
from src.trust.identity import AgentIdentity, AgentKey, IdentityRegistry
from src.trust.merkle import ProofStep, inclusion_proof, merkle_root

logger = logging.getLogger(__name__)

AUTHORITY_ID = "modx-authority"
ZERO_HASH = "00" * 32


class RecordType(str, Enum):
    AGENT_REGISTRATION = "AgentRegistration"
    TRANSACTION = "Transaction"
    REPUTATION_UPDATE = "ReputationUpdate"
    SECURITY_POLICY = "SecurityPolicy"
    BATCH_ANCHOR = "BatchAnchor"


class Tier(str, Enum):
    HIGH_VALUE = "HighValue"
    ROUTINE = "Routine"


class Outcome(str, Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"


HIGH_VALUE_RECORDS = frozenset({
    RecordType.AGENT_REGISTRATION, RecordType.TRANSACTION,
    RecordType.REPUTATION_UPDATE, RecordType.SECURITY_POLICY,
})
TRANSACTION_FIELDS = ("transactionType", "agentId", "requestorId", "timestamp", "actionParameters")


def classify(descriptor: Any) -> Tier:
    """
    判定操作的安全等级

    参数:
        descriptor: RecordType / MessageType / 类型名字符串，
                    或带 recordType / messageType / highValue 字段的映射
    返回:
        HighValue 或 Routine；对任何输入都有确定结果
    """
    if isinstance(descriptor, RecordType):
        return Tier.HIGH_VALUE if descriptor in HIGH_VALUE_RECORDS else Tier.ROUTINE
    if isinstance(descriptor, MessageType):
        return Tier.ROUTINE
    if isinstance(descriptor, Mapping):
        if descriptor.get("highValue") is True:
            return Tier.HIGH_VALUE
        return classify(descriptor.get("recordType"))
    if isinstance(descriptor, str):
        if descriptor in {r.value for r in HIGH_VALUE_RECORDS}:
            return Tier.HIGH_VALUE
        return Tier.ROUTINE
    return Tier.ROUTINE


@dataclass(frozen=True)
class LedgerConfig:
    block_size: int = 16          # 每块最多记录数
    seal_interval: float = 10.0   # 封块间隔（秒）
    anchor_interval: float = 10.0  # 常规消息锚定间隔（秒）

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"blockSize 必须 ≥ 1: {self.block_size}")
        if self.seal_interval <= 0 or self.anchor_interval <= 0:
            raise ValueError("封块间隔和锚定间隔必须为正数")

    @classmethod
    def from_dict(cls, params: Mapping[str, Any]) -> "LedgerConfig":
        return cls(
            block_size=int(params.get("blockSize", 16)),
            seal_interval=float(params.get("sealInterval", 10.0)),
            anchor_interval=float(params.get("anchorInterval", 10.0)),
        )


@dataclass(frozen=True)
class LedgerRef:
    height: int
    index: int

    def to_doc(self) -> List[int]:
        return [self.height, self.index]


@dataclass(frozen=True)
class LedgerRecord:
    record_type: RecordType
    body: Any
    submitter: str
    timestamp: datetime
    signature: bytes = b""

    def signing_doc(self) -> Dict[str, Any]:
        return {
            "recordType": self.record_type.value,
            "body": self.body,
            "submitter": self.submitter,
            "timestamp": format_instant(self.timestamp),
        }

    def signing_bytes(self) -> bytes:
        return canonicalize(self.signing_doc())

    def to_doc(self) -> Dict[str, Any]:
        doc = self.signing_doc()
        doc["signature"] = b64url_encode(self.signature)
        return doc

    def digest(self) -> bytes:
        return hashlib.sha256(canonicalize(self.to_doc())).digest()

    @classmethod
    def from_doc(cls, doc: Any) -> "LedgerRecord":
        """严格解析：字段集合固定，签名和时间戳必须是规范写法"""
        expected = {"recordType", "body", "submitter", "timestamp", "signature"}
        if not isinstance(doc, dict) or set(doc) != expected:
            raise MalformedRecord("账本记录字段不完整或包含多余字段")
        try:
            record = cls(
                record_type=RecordType(doc["recordType"]),
                body=doc["body"],
                submitter=validate_agent_id(doc["submitter"]),
                timestamp=parse_instant(doc["timestamp"]),
                signature=b64url_decode(doc["signature"]),
            )
        except (ValueError, ModxError) as e:
            raise MalformedRecord(f"账本记录无法解析: {e}")
        if record.to_doc() != doc:
            raise MalformedRecord("账本记录不是规范写法")
        return record


@dataclass(frozen=True)
class LedgerBlock:
    height: int
    records: Tuple[LedgerRecord, ...]
    prev_hash: str
    block_hash: str

    def record_digests(self) -> List[str]:
        return [r.digest().hex() for r in self.records]


def compute_block_hash(height: int, prev_hash: str, record_digests: Sequence[str]) -> str:
    doc = {"height": height, "prevHash": prev_hash, "recordDigests": list(record_digests)}
    return hashlib.sha256(canonicalize(doc)).hexdigest()


@dataclass(frozen=True)
class BlockInclusionProof:
    height: int
    index: int
    prev_hash: str
    record_digests: Tuple[str, ...]

    def verify(self, record_digest: bytes, block_hash: str) -> bool:
        if not 0 <= self.index < len(self.record_digests):
            return False
        if self.record_digests[self.index] != record_digest.hex():
            return False
        return compute_block_hash(self.height, self.prev_hash, self.record_digests) == block_hash


@dataclass(frozen=True)
class ReputationScore:
    agent_id: str
    successes: int = 0
    failures: int = 0

    @property
    def score(self) -> float:
        return (self.successes + 1) / (self.successes + self.failures + 2)

    def to_doc(self) -> Dict[str, Any]:
        return {"agentId": self.agent_id, "successes": self.successes,
                "failures": self.failures, "score": self.score}


@dataclass
class _AnchoredBatch:
    ref: LedgerRef
    leaves: List[bytes]
    root: bytes


def verify_chain(blocks: Sequence[LedgerBlock]) -> Optional[int]:
    """从创世块走到链尾，返回第一个不一致的高度；全部一致返回 None"""
    prev = ZERO_HASH
    for expected_height, block in enumerate(blocks):
        if block.height != expected_height or block.prev_hash != prev:
            return expected_height
        if compute_block_hash(block.height, block.prev_hash, block.record_digests()) != block.block_hash:
            return expected_height
        prev = block.block_hash
    return None


class TrustLedger:
    """
    本地哈希链账本及其身份、锚定、信誉服务

    追加写入单线程串行；已封存区块上的读取（verify_chain、证明）可并发。
    """

    def __init__(self, clock: Clock, config: Optional[LedgerConfig] = None, key_seed: Any = None):
        self.clock = clock
        self.config = config or LedgerConfig()
        self.identities = IdentityRegistry(clock, seed=key_seed)
        self._lock = threading.RLock()
        self._blocks: List[LedgerBlock] = []
        self._open: List[LedgerRecord] = []
        self._routine: List[Tuple[datetime, bytes]] = []
        self._anchored: Dict[str, Tuple[_AnchoredBatch, int]] = {}
        self._reputation: Dict[str, ReputationScore] = {}
        self._listeners: List[Callable[[LedgerRecord, LedgerRef], None]] = []
        self.authority_identity, self.authority_key = self.generate_identity(AUTHORITY_ID)

    # ---- 监听 ----
    def add_listener(self, callback: Callable[[LedgerRecord, LedgerRef], None]) -> None:
        self._listeners.append(callback)

    # ---- 身份 ----
    def generate_identity(self, agent_id: str, rotate: bool = False) -> Tuple[AgentIdentity, AgentKey]:
        """生成身份并追加 AgentRegistration 记录；轮换时记录引用旧公钥"""
        previous = None
        if rotate and self.identities.is_registered(agent_id):
            previous = self.identities.active_identity(agent_id)
        identity, key = self.identities.generate(agent_id, rotate=rotate)
        body = identity.to_doc()
        if previous is not None:
            body["rotationOf"] = b64url_encode(previous.public_key)
        self.append(RecordType.AGENT_REGISTRATION, body, key)
        return identity, key

    def register_external(self, agent_id: str, public_key: bytes, key_proof: bytes) -> AgentIdentity:
        """登记远程智能体的公钥，由权威身份代为公证"""
        identity = self.identities.register_public_key(agent_id, public_key, key_proof)
        self.append(RecordType.AGENT_REGISTRATION, identity.to_doc(), self.authority_key)
        return identity

    # ---- 追加 ----
    def append(self, record_type: RecordType, body: Any, key: AgentKey) -> LedgerRef:
        record = LedgerRecord(RecordType(record_type), body, key.agent_id, self.clock.now())
        record = LedgerRecord(record.record_type, record.body, record.submitter,
                              record.timestamp, key.sign(record.signing_bytes()))
        return self.submit(record)

    def submit(self, record: LedgerRecord) -> LedgerRef:
        """追加一条已签名记录，返回 (height, index)"""
        _validate_body(record.record_type, record.body)
        if not self.identities.is_registered(record.submitter):
            raise UnknownAgent(f"提交者未登记: {record.submitter}", agentId=record.submitter)
        if not self.identities.verify(record.submitter, record.signing_bytes(),
                                      record.signature, at=record.timestamp):
            raise InvalidSignature(f"账本记录签名无效: {record.submitter}", submitter=record.submitter)
        with self._lock:
            if self._open and self._interval_due(self._open[0].timestamp, self.config.seal_interval):
                self._seal_locked()
            ref = LedgerRef(len(self._blocks), len(self._open))
            self._open.append(record)
            logger.debug(f"账本追加 {record.record_type.value} @ {ref.height}:{ref.index}")
            for listener in self._listeners:
                listener(record, ref)
            if len(self._open) >= self.config.block_size:
                self._seal_locked()
            return ref

    def record_transaction(self, body: Dict[str, Any], key: AgentKey) -> Tuple[LedgerRef, LedgerRecord]:
        ref = self.append(RecordType.TRANSACTION, body, key)
        return ref, self.record_at(ref)

    def record_security_policy(self, policy_doc: Dict[str, Any], key: AgentKey) -> LedgerRef:
        return self.append(RecordType.SECURITY_POLICY, policy_doc, key)

    # ---- 封块 ----
    def _interval_due(self, since: datetime, interval: float) -> bool:
        return (self.clock.now() - since).total_seconds() >= interval

    def _seal_locked(self) -> Optional[LedgerBlock]:
        if not self._open:
            return None
        height = len(self._blocks)
        prev_hash = self._blocks[-1].block_hash if self._blocks else ZERO_HASH
        records = tuple(self._open)
        digests = [r.digest().hex() for r in records]
        block = LedgerBlock(height, records, prev_hash, compute_block_hash(height, prev_hash, digests))
        self._blocks.append(block)
        self._open = []
        logger.info(f"封存区块 {height}，共 {len(records)} 条记录")
        return block

    def seal_block(self) -> Optional[LedgerBlock]:
        with self._lock:
            return self._seal_locked()

    def tick(self, force: bool = False) -> Optional[LedgerRef]:
        """按间隔（或强制）锚定常规消息并封块，由驱动方在串行点调用"""
        ref = None
        with self._lock:
            if self._routine:
                earliest = min(ts for ts, _ in self._routine)
                if force or self._interval_due(earliest, self.config.anchor_interval):
                    ref = self._flush_routine_locked()
            if self._open and (force or self._interval_due(self._open[0].timestamp, self.config.seal_interval)):
                self._seal_locked()
        return ref

    # ---- 常规消息批量锚定 ----
    def observe_envelope(self, env: MessageEnvelope) -> bytes:
        digest = envelope_digest(env)
        with self._lock:
            self._routine.append((env.timestamp, digest))
        return digest

    def _flush_routine_locked(self) -> LedgerRef:
        batch = sorted(self._routine, key=lambda item: (item[0], item[1]))
        self._routine = []
        window = (batch[0][0], batch[-1][0])
        return self.anchor_batch([digest for _, digest in batch], window)

    def anchor_batch(self, digests: Sequence[bytes], window: Tuple[datetime, datetime]) -> LedgerRef:
        """对一批信封摘要建 Merkle 树并以 BatchAnchor 记录其根"""
        if not digests:
            raise EmptyBatch("批量锚定至少需要一个摘要")
        leaves = [bytes(d) for d in digests]
        root = merkle_root(leaves)
        body = {
            "merkleRoot": root.hex(),
            "count": len(leaves),
            "window": {"from": format_instant(window[0]), "to": format_instant(window[1])},
        }
        ref = self.append(RecordType.BATCH_ANCHOR, body, self.authority_key)
        batch = _AnchoredBatch(ref, leaves, root)
        with self._lock:
            for i, leaf in enumerate(leaves):
                self._anchored.setdefault(leaf.hex(), (batch, i))
        logger.info(f"批量锚定 {len(leaves)} 条常规消息，根 {root.hex()[:16]}")
        return ref

    def prove_envelope(self, digest: bytes) -> Optional[Tuple[LedgerRef, List[ProofStep], bytes]]:
        """返回 (锚定记录位置, Merkle 路径, 根)；未锚定时返回 None"""
        with self._lock:
            entry = self._anchored.get(digest.hex())
        if entry is None:
            return None
        batch, index = entry
        return batch.ref, inclusion_proof(batch.leaves, index), batch.root

    def envelope_known(self, digest: bytes) -> bool:
        with self._lock:
            if digest.hex() in self._anchored:
                return True
            return any(d == digest for _, d in self._routine)

    # ---- 查询 ----
    @property
    def blocks(self) -> Tuple[LedgerBlock, ...]:
        with self._lock:
            return tuple(self._blocks)

    @property
    def open_records(self) -> Tuple[LedgerRecord, ...]:
        with self._lock:
            return tuple(self._open)

    def record_at(self, ref: LedgerRef) -> LedgerRecord:
        with self._lock:
            if ref.height < len(self._blocks):
                records = self._blocks[ref.height].records
            elif ref.height == len(self._blocks):
                records = tuple(self._open)
            else:
                records = ()
            if not 0 <= ref.index < len(records):
                raise DanglingEvidence(f"账本中不存在记录 {ref.height}:{ref.index}",
                                       height=ref.height, index=ref.index)
            return records[ref.index]

    def block_inclusion_proof(self, ref: LedgerRef) -> BlockInclusionProof:
        with self._lock:
            if ref.height >= len(self._blocks):
                raise ValueError(f"区块 {ref.height} 尚未封存")
            block = self._blocks[ref.height]
        if not 0 <= ref.index < len(block.records):
            raise DanglingEvidence(f"区块 {ref.height} 中不存在下标 {ref.index}")
        return BlockInclusionProof(block.height, ref.index, block.prev_hash, tuple(block.record_digests()))

    def verify_chain(self) -> Optional[int]:
        return verify_chain(self.blocks)

    def export_anchors(self) -> List[Tuple[int, str]]:
        """外部链挂接钩子：(height, blockHash) 列表"""
        return [(b.height, b.block_hash) for b in self.blocks]

    def all_records(self) -> List[Tuple[LedgerRef, LedgerRecord]]:
        with self._lock:
            rows = [(LedgerRef(b.height, i), r) for b in self._blocks for i, r in enumerate(b.records)]
            rows.extend((LedgerRef(len(self._blocks), i), r) for i, r in enumerate(self._open))
            return rows

    def summary(self) -> Dict[str, Any]:
        """按记录类型汇总账本"""
        rows = [{"recordType": r.record_type.value, "submitter": r.submitter,
                 "tier": classify(r.record_type).value} for _, r in self.all_records()]
        if not rows:
            return {"blocks": len(self.blocks), "records": 0, "byType": {}, "byTier": {}}
        df = pd.DataFrame(rows)
        by_type = df["recordType"].value_counts().sort_index()
        by_tier = df["tier"].value_counts().sort_index()
        return {
            "blocks": len(self.blocks),
            "records": int(len(df)),
            "byType": {k: int(v) for k, v in by_type.items()},
            "byTier": {k: int(v) for k, v in by_tier.items()},
        }

    # ---- 信誉 ----
    def reputation(self, agent_id: str) -> ReputationScore:
        with self._lock:
            return self._reputation.get(agent_id, ReputationScore(agent_id))

    def _resolve_evidence(self, evidence: Mapping[str, Any]) -> None:
        if not isinstance(evidence, Mapping):
            raise DanglingEvidence("证据必须是映射")
        if "ledger" in evidence:
            ref = evidence["ledger"]
            try:
                self.record_at(LedgerRef(int(ref[0]), int(ref[1])))
            except (TypeError, ValueError, IndexError):
                raise DanglingEvidence(f"无法解析的账本引用: {ref!r}")
            return
        if "envelope" in evidence:
            try:
                digest = bytes.fromhex(evidence["envelope"])
            except (TypeError, ValueError):
                raise DanglingEvidence(f"无法解析的信封摘要: {evidence['envelope']!r}")
            if not self.envelope_known(digest):
                raise DanglingEvidence(f"信封未被锚定: {evidence['envelope']}")
            return
        raise DanglingEvidence("证据必须引用账本记录或已锚定的信封")

    def update_reputation(self, agent_id: str, outcome: Outcome, evidence: Mapping[str, Any],
                          reporter: Optional[AgentKey] = None) -> ReputationScore:
        """按平滑成功率更新信誉，并追加 ReputationUpdate 记录"""
        if not self.identities.is_registered(agent_id):
            raise UnknownAgent(f"未登记的智能体: {agent_id}", agentId=agent_id)
        self._resolve_evidence(evidence)
        outcome = Outcome(outcome)
        with self._lock:
            current = self._reputation.get(agent_id, ReputationScore(agent_id))
            if outcome is Outcome.SUCCESS:
                updated = ReputationScore(agent_id, current.successes + 1, current.failures)
            else:
                updated = ReputationScore(agent_id, current.successes, current.failures + 1)
            self._reputation[agent_id] = updated
        body = {"agentId": agent_id, "outcome": outcome.value, "evidence": dict(evidence),
                "successes": updated.successes, "failures": updated.failures}
        self.append(RecordType.REPUTATION_UPDATE, body, reporter or self.authority_key)
        return updated

    # ---- 持久化 ----
    def save(self, path: str) -> None:
        self.seal_block()
        save_ledger(self.blocks, path)


def _validate_body(record_type: RecordType, body: Any) -> None:
    try:
        canonicalize(body)
    except (ModxError, TypeError) as e:
        raise MalformedRecord(f"记录体不是合法文档: {e}")
    if record_type is RecordType.TRANSACTION:
        if not isinstance(body, dict):
            raise MalformedRecord("交易记录体必须是对象")
        missing = [f for f in TRANSACTION_FIELDS if f not in body]
        if missing:
            raise MalformedRecord(f"交易记录缺少字段: {', '.join(missing)}", missing=missing)
        if not isinstance(body["actionParameters"], dict):
            raise MalformedRecord("actionParameters 必须是对象")
    elif record_type is RecordType.BATCH_ANCHOR:
        if not isinstance(body, dict) or not {"merkleRoot", "count", "window"} <= set(body):
            raise MalformedRecord("批量锚定记录缺少 merkleRoot/count/window")
        if not isinstance(body["count"], int) or body["count"] < 1:
            raise MalformedRecord("批量锚定记录的 count 必须为正整数")


# ---------------------------------------------------------------------------
# JSON-lines 持久化
# ---------------------------------------------------------------------------

def ledger_lines(blocks: Sequence[LedgerBlock]) -> List[bytes]:
    lines = []
    for block in blocks:
        for record in block.records:
            lines.append(canonicalize({"kind": "record", "height": block.height, "record": record.to_doc()}))
        lines.append(canonicalize({
            "kind": "block", "height": block.height, "prevHash": block.prev_hash,
            "blockHash": block.block_hash, "recordCount": len(block.records),
        }))
    return lines


def save_ledger(blocks: Sequence[LedgerBlock], path: str) -> None:
    with open(path, "wb") as f:
        for line in ledger_lines(blocks):
            f.write(line)
            f.write(b"\n")
    logger.info(f"账本已保存到: {path}")


def parse_ledger(data: bytes) -> Tuple[List[LedgerBlock], Optional[int]]:
    """
    解析账本文件内容

    返回:
        (已解析的区块, 出错位置所在的高度)；每一行都必须是规范化 JSON
    """
    blocks: List[LedgerBlock] = []
    pending: List[LedgerRecord] = []
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines = lines[:-1]
    for raw in lines:
        height = len(blocks)
        try:
            doc = parse_doc(raw)
            if canonicalize(doc) != raw or not isinstance(doc, dict):
                return blocks, height
            kind = doc.get("kind")
            if kind == "record":
                if set(doc) != {"kind", "height", "record"} or doc["height"] != height:
                    return blocks, height
                pending.append(LedgerRecord.from_doc(doc["record"]))
            elif kind == "block":
                if set(doc) != {"kind", "height", "prevHash", "blockHash", "recordCount"}:
                    return blocks, height
                if doc["height"] != height or doc["recordCount"] != len(pending):
                    return blocks, height
                if not isinstance(doc["prevHash"], str) or not isinstance(doc["blockHash"], str):
                    return blocks, height
                blocks.append(LedgerBlock(height, tuple(pending), doc["prevHash"], doc["blockHash"]))
                pending = []
            else:
                return blocks, height
        except (ModxError, MalformedDocument, TypeError, ValueError):
            return blocks, height
    if pending:
        return blocks, len(blocks)
    return blocks, None


def load_ledger(path: str) -> Tuple[List[LedgerBlock], Optional[int]]:
    with open(path, "rb") as f:
        return parse_ledger(f.read())


def verify_ledger_bytes(data: bytes) -> Optional[int]:
    blocks, bad_height = parse_ledger(data)
    chain_bad = verify_chain(blocks)
    candidates = [h for h in (bad_height, chain_bad) if h is not None]
    return min(candidates) if candidates else None


def verify_ledger_file(path: str) -> Optional[int]:
    """校验账本文件，返回第一个异常高度；完好时返回 None"""
    with open(path, "rb") as f:
        return verify_ledger_bytes(f.read())
