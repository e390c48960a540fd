"""
上下文状态共享

智能体默认无状态，只有在策略中声明过的上下文名下才能加入共享空间；
写入受可共享类型限制，上下文随任务完成或时限到期而关闭，参与者可以撤回。
"""
import copy
import itertools
import logging
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from src.broker.umb_broker import UMBBroker, reply_topic
from src.core.clock import Clock
from src.core.errors import (
    ConsentMissing, ContextClosed, InvalidPolicy, KeyAbsent, MalformedDocument,
    ModxError, NotParticipant, NotRevocable, TypeNotShareable, UnknownContext,
)
from src.core.model import (
    MessageEnvelope, MessageType, TopicPattern, canonicalize, format_instant, validate_agent_id,
)
from src.state.version_vector import Causality, VersionVector
from src.trust.identity import AgentKey
from src.utils import EventLog, save_json

logger = logging.getLogger(__name__)

CONTEXT_SERVICE_ID = "modx-context"
STATE_TOPIC = "state.ops"

TASK_BOUNDED = "task-bounded"
TIME_BOUNDED = "time-bounded"


@dataclass(frozen=True)
class StatePolicy:
    agent_id: str
    default_mode: str = "stateless"
    sharing_enabled: bool = False
    contexts: Tuple[str, ...] = ()
    shareable_types: Tuple[str, ...] = ()
    lifespan: str = TASK_BOUNDED
    lifespan_seconds: Optional[float] = None
    revocable: bool = True

    def __post_init__(self):
        validate_agent_id(self.agent_id)
        if self.default_mode not in ("stateless", "stateful"):
            raise InvalidPolicy(f"defaultMode 只能是 stateless/stateful: {self.default_mode}", agentId=self.agent_id)
        if self.sharing_enabled and not self.contexts:
            raise InvalidPolicy(f"{self.agent_id} 开启了上下文共享但没有声明 contexts", agentId=self.agent_id)
        if self.lifespan not in (TASK_BOUNDED, TIME_BOUNDED):
            raise InvalidPolicy(f"不支持的 stateLifespan: {self.lifespan}", agentId=self.agent_id)
        if self.lifespan == TIME_BOUNDED and (self.lifespan_seconds is None or self.lifespan_seconds <= 0):
            raise InvalidPolicy(f"{self.agent_id} 的 time-bounded 策略需要正的 lifespanSeconds", agentId=self.agent_id)

    def consents_to(self, context_name: str) -> bool:
        return self.sharing_enabled and context_name in self.contexts

    @classmethod
    def stateless(cls, agent_id: str) -> "StatePolicy":
        return cls(agent_id)

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "StatePolicy":
        """读取 {"agentId", "statePolicy": {"defaultMode", "contextualSharing": {...}}}"""
        if not isinstance(doc, dict) or "agentId" not in doc:
            raise InvalidPolicy("状态策略需要 agentId")
        policy = doc.get("statePolicy", {}) or {}
        sharing = policy.get("contextualSharing", {}) or {}
        try:
            return cls(
                agent_id=doc["agentId"],
                default_mode=policy.get("defaultMode", "stateless"),
                sharing_enabled=bool(sharing.get("enabled", False)),
                contexts=tuple(sharing.get("contexts", [])),
                shareable_types=tuple(sharing.get("shareableStateTypes", [])),
                lifespan=sharing.get("stateLifespan", TASK_BOUNDED),
                lifespan_seconds=sharing.get("lifespanSeconds"),
                revocable=bool(sharing.get("revocable", True)),
            )
        except TypeError as e:
            raise InvalidPolicy(f"状态策略格式错误: {e}", agentId=str(doc.get("agentId")))

    def to_doc(self) -> Dict[str, Any]:
        sharing: Dict[str, Any] = {
            "enabled": self.sharing_enabled,
            "contexts": list(self.contexts),
            "shareableStateTypes": list(self.shareable_types),
            "stateLifespan": self.lifespan,
            "revocable": self.revocable,
        }
        if self.lifespan_seconds is not None:
            sharing["lifespanSeconds"] = self.lifespan_seconds
        return {"agentId": self.agent_id,
                "statePolicy": {"defaultMode": self.default_mode, "contextualSharing": sharing}}


class ContextStatus(str, Enum):
    ACTIVE = "Active"
    COMPLETED = "Completed"
    EXPIRED = "Expired"
    REVOKED = "Revoked"


@dataclass(frozen=True)
class ContextEntry:
    key: str
    value: Any
    state_type: str
    version: VersionVector
    writer: str
    written_at: datetime
    tombstoned: bool = False

    def to_doc(self) -> Dict[str, Any]:
        return {
            "key": self.key,
            "value": copy.deepcopy(self.value),
            "stateType": self.state_type,
            "version": self.version.to_doc(),
            "writer": self.writer,
            "writtenAt": format_instant(self.written_at),
            "tombstoned": self.tombstoned,
        }


def _tie_key(entry: ContextEntry):
    # 并发写入的全序：时间晚者优先，其次 AgentId 小者，最后比较值的规范化字节
    return (-entry.written_at.timestamp(), entry.writer, canonicalize(entry.value))


def resolve_entries(entries: Iterable[ContextEntry]) -> ContextEntry:
    """在一组同键条目中选出胜者，结果与输入顺序无关"""
    pool = list(entries)
    if not pool:
        raise ValueError("没有可比较的条目")
    frontier = [e for e in pool
                if not any(other.version.compare(e.version) is Causality.AFTER for other in pool)]
    return min(frontier, key=_tie_key)


def resolve_conflict(a: ContextEntry, b: ContextEntry) -> ContextEntry:
    """支配的版本直接胜出；并发时 writtenAt 大者胜，再按 AgentId 字典序小者胜"""
    if a.key != b.key:
        raise ValueError(f"只能合并同一个键的条目: {a.key} vs {b.key}")
    return resolve_entries((a, b))


@dataclass
class ContextSpace:
    context_id: str
    name: str
    initiator: str
    created_at: datetime
    bound_task_id: Optional[str] = None
    expires_at: Optional[datetime] = None
    participants: Dict[str, datetime] = field(default_factory=dict)
    entries: Dict[str, ContextEntry] = field(default_factory=dict)
    status: ContextStatus = ContextStatus.ACTIVE
    revoked_by: Set[str] = field(default_factory=set)

    def to_doc(self) -> Dict[str, Any]:
        return {
            "contextId": self.context_id,
            "contextName": self.name,
            "initiator": self.initiator,
            "createdAt": format_instant(self.created_at),
            "boundTaskId": self.bound_task_id,
            "expiresAt": format_instant(self.expires_at) if self.expires_at else None,
            "participants": {a: format_instant(t) for a, t in sorted(self.participants.items())},
            "entries": [e.to_doc() for _, e in sorted(self.entries.items())],
            "status": self.status.value,
            "revokedBy": sorted(self.revoked_by),
        }


class ContextStore:
    """
    集中式上下文存储

    单个上下文上的写操作串行化；complete_task 在存储锁内一次性关闭所有绑定的上下文。
    """

    def __init__(self, clock: Clock, event_log: Optional[EventLog] = None):
        self.clock = clock
        self.event_log = event_log or EventLog()
        self._lock = threading.RLock()
        self._policies: Dict[str, StatePolicy] = {}
        self._contexts: Dict[str, ContextSpace] = {}
        self._counter = itertools.count(1)

    # ---- 策略 ----
    def register_policy(self, policy: StatePolicy) -> None:
        with self._lock:
            self._policies[policy.agent_id] = policy
        logger.info(f"登记状态策略: {policy.agent_id} (contexts={list(policy.contexts)})")

    def policy_for(self, agent_id: str) -> StatePolicy:
        with self._lock:
            return self._policies.get(agent_id) or StatePolicy.stateless(agent_id)

    # ---- 生命周期 ----
    def _emit(self, event: str, space: ContextSpace, **fields) -> None:
        self.event_log.emit(event, at=format_instant(self.clock.now()), contextId=space.context_id,
                            contextName=space.name, **fields)

    def _get(self, context_id: str) -> ContextSpace:
        space = self._contexts.get(context_id)
        if space is None:
            raise UnknownContext(f"不存在的上下文: {context_id}", contextId=context_id)
        return space

    def _transition(self, space: ContextSpace, status: ContextStatus, **fields) -> None:
        if space.status is not ContextStatus.ACTIVE:
            return
        space.status = status
        logger.info(f"上下文 {space.context_id} ({space.name}) → {status.value}")
        self._emit(f"context.{status.value.lower()}", space, **fields)

    def _refresh(self, space: ContextSpace) -> None:
        if space.status is ContextStatus.ACTIVE and space.expires_at is not None \
                and self.clock.now() >= space.expires_at:
            self._transition(space, ContextStatus.EXPIRED, reason="timeout")

    def _require_active(self, space: ContextSpace) -> None:
        self._refresh(space)
        if space.status is not ContextStatus.ACTIVE:
            raise ContextClosed(f"上下文 {space.context_id} 已是 {space.status.value}",
                                contextId=space.context_id, status=space.status.value)

    def _require_participant(self, space: ContextSpace, agent_id: str) -> None:
        if agent_id not in space.participants:
            raise NotParticipant(f"{agent_id} 不是上下文 {space.context_id} 的参与者",
                                 contextId=space.context_id, agentId=agent_id)

    def create_context(self, name: str, initiator: str, task_id: Optional[str] = None) -> ContextSpace:
        policy = self.policy_for(initiator)
        if not policy.consents_to(name):
            raise ConsentMissing(f"{initiator} 的策略未同意上下文 {name}", agentId=initiator, context=name)
        now = self.clock.now()
        expires_at = None
        if policy.lifespan == TIME_BOUNDED:
            expires_at = now + timedelta(seconds=policy.lifespan_seconds)
        with self._lock:
            context_id = f"ctx-{next(self._counter):04d}"
            space = ContextSpace(context_id, name, initiator, now,
                                 bound_task_id=task_id if policy.lifespan == TASK_BOUNDED else None,
                                 expires_at=expires_at, participants={initiator: now})
            self._contexts[context_id] = space
        self._emit("context.created", space, initiator=initiator, taskId=space.bound_task_id)
        return space

    def join_context(self, context_id: str, agent_id: str) -> Dict[str, Any]:
        with self._lock:
            space = self._get(context_id)
            self._require_active(space)
            if not self.policy_for(agent_id).consents_to(space.name):
                raise ConsentMissing(f"{agent_id} 的策略未同意上下文 {space.name}",
                                     agentId=agent_id, context=space.name)
            if agent_id not in space.participants:
                space.participants[agent_id] = self.clock.now()
                space.revoked_by.discard(agent_id)
                self._emit("context.joined", space, agentId=agent_id)
            return {"contextId": context_id, "participants": sorted(space.participants)}

    # ---- 读写 ----
    def write_state(self, context_id: str, agent_id: str, key: str, value: Any, state_type: str,
                    base_version: Optional[VersionVector] = None) -> VersionVector:
        """
        写入共享状态，返回存储后的版本

        base_version 表示写入方读到的版本；它与当前版本并发时，按 resolve_conflict
        决定保留哪一个值，存储版本取两者合并。
        """
        canonicalize(value)
        with self._lock:
            space = self._get(context_id)
            self._require_active(space)
            self._require_participant(space, agent_id)
            if state_type not in self.policy_for(agent_id).shareable_types:
                raise TypeNotShareable(f"{agent_id} 不能共享类型 {state_type}",
                                       agentId=agent_id, stateType=state_type)
            current = space.entries.get(key)
            now = self.clock.now()
            if base_version is None:
                base_version = current.version if current else VersionVector()
            candidate = ContextEntry(key, copy.deepcopy(value), state_type,
                                     base_version.increment(agent_id), agent_id, now)
            lost_to: Optional[ContextEntry] = None
            if current is None or candidate.version.dominates(current.version):
                stored = candidate
            else:
                winner = resolve_conflict(current, candidate)
                stored = replace(winner, version=current.version.merge(candidate.version))
                if winner is not candidate:
                    lost_to = winner
                logger.debug(f"上下文 {context_id} 键 {key} 并发写入，胜者 {winner.writer}")
            space.entries[key] = stored
        if lost_to is not None:
            logger.warning(f"上下文 {context_id} 键 {key}: {agent_id} 的并发写入未生效，"
                           f"保留 {lost_to.writer} 的{'撤回墓碑' if lost_to.tombstoned else '值'}")
            self._emit("state.conflict", space, agentId=agent_id, key=key, winner=lost_to.writer,
                       tombstoned=lost_to.tombstoned, version=stored.version.to_doc())
        self._emit("state.written", space, agentId=agent_id, key=key, stateType=state_type,
                   version=stored.version.to_doc())
        return stored.version

    def read_state(self, context_id: str, agent_id: str, key: str) -> Dict[str, Any]:
        with self._lock:
            space = self._get(context_id)
            self._require_active(space)
            self._require_participant(space, agent_id)
            entry = space.entries.get(key)
        if entry is None or entry.tombstoned:
            raise KeyAbsent(f"上下文 {context_id} 中没有键 {key}", contextId=context_id, key=key)
        return {"value": copy.deepcopy(entry.value), "version": entry.version,
                "writer": entry.writer, "stateType": entry.state_type}

    # ---- 撤回与关闭 ----
    def revoke(self, context_id: str, agent_id: str) -> Dict[str, Any]:
        with self._lock:
            space = self._get(context_id)
            self._require_active(space)
            self._require_participant(space, agent_id)
            if not self.policy_for(agent_id).revocable:
                raise NotRevocable(f"{agent_id} 的策略不允许撤回", agentId=agent_id)
            tombstoned = []
            for key, entry in space.entries.items():
                if entry.writer == agent_id and not entry.tombstoned:
                    space.entries[key] = replace(entry, tombstoned=True)
                    tombstoned.append(key)
            del space.participants[agent_id]
            space.revoked_by.add(agent_id)
            self._emit("context.withdrawn", space, agentId=agent_id, tombstoned=sorted(tombstoned))
            if len(space.participants) < 2:
                self._transition(space, ContextStatus.REVOKED, revokedBy=sorted(space.revoked_by))
            return {"contextId": context_id, "tombstoned": sorted(tombstoned), "status": space.status.value}

    def close_context(self, context_id: str, agent_id: str) -> ContextSpace:
        """发起方主动结束上下文"""
        with self._lock:
            space = self._get(context_id)
            self._require_active(space)
            if agent_id != space.initiator:
                raise NotParticipant(f"只有发起方 {space.initiator} 可以关闭上下文",
                                     contextId=context_id, agentId=agent_id)
            self._transition(space, ContextStatus.COMPLETED, closedBy=agent_id)
            return space

    def complete_task(self, task_id: str) -> List[str]:
        """任务完成：所有绑定该任务且仍活跃的上下文转为 Expired"""
        with self._lock:
            expired = []
            for space in sorted(self._contexts.values(), key=lambda s: s.context_id):
                self._refresh(space)
                if space.bound_task_id == task_id and space.status is ContextStatus.ACTIVE:
                    self._transition(space, ContextStatus.EXPIRED, reason="task-complete", taskId=task_id)
                    expired.append(space.context_id)
        return expired

    # ---- 查询 ----
    def get(self, context_id: str) -> ContextSpace:
        with self._lock:
            space = self._get(context_id)
            self._refresh(space)
            return space

    def contexts(self) -> List[ContextSpace]:
        with self._lock:
            for space in self._contexts.values():
                self._refresh(space)
            return [self._contexts[k] for k in sorted(self._contexts)]

    def snapshot(self, path: Optional[str] = None) -> Dict[str, Any]:
        with self._lock:
            doc = {
                "policies": [self._policies[a].to_doc() for a in sorted(self._policies)],
                "contexts": [s.to_doc() for s in self.contexts()],
            }
        if path:
            save_json(path, doc)
        return doc


def _version_from(payload: Dict[str, Any]) -> Optional[VersionVector]:
    doc = payload.get("baseVersion")
    if doc is None:
        return None
    try:
        return VersionVector.from_doc(doc)
    except (TypeError, ValueError) as e:
        raise MalformedDocument(f"baseVersion 非法: {e}")


class ContextService:
    """通过 StateOp 信封暴露上下文存储，请求方即信封的 sender"""

    def __init__(self, store: ContextStore, service_key: AgentKey):
        self.store = store
        self.service_key = service_key
        self._ops: Dict[str, Callable[[str, Dict[str, Any]], Any]] = {
            "create": lambda agent, p: self.store.create_context(p["contextName"], agent, p.get("taskId")).to_doc(),
            "join": lambda agent, p: self.store.join_context(p["contextId"], agent),
            "write": lambda agent, p: self.store.write_state(
                p["contextId"], agent, p["key"], p["value"], p["stateType"], _version_from(p)).to_doc(),
            "read": lambda agent, p: self._read(agent, p),
            "revoke": lambda agent, p: self.store.revoke(p["contextId"], agent),
            "close": lambda agent, p: self.store.close_context(p["contextId"], agent).to_doc(),
        }

    def _read(self, agent: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        result = self.store.read_state(payload["contextId"], agent, payload["key"])
        result["version"] = result["version"].to_doc()
        return result

    def handle_state_op(self, env: MessageEnvelope) -> MessageEnvelope:
        payload = env.payload if isinstance(env.payload, dict) else {}
        op = payload.get("op")
        try:
            handler = self._ops.get(op)
            if handler is None:
                raise MalformedDocument(f"不支持的状态操作: {op!r}", op=str(op))
            try:
                result = handler(env.sender, payload)
            except KeyError as e:
                raise MalformedDocument(f"状态操作 {op} 缺少字段: {e.args[0]}", op=op)
            message_type, body = MessageType.RESPONSE, {"op": op, "result": result}
        except ModxError as e:
            logger.warning(f"状态操作 {env.message_id} 失败: {e}")
            message_type, body = MessageType.ERROR, e.to_doc()
        response = MessageEnvelope(
            message_id=f"{env.message_id}/r",
            message_type=message_type,
            topic=reply_topic(env.sender),
            sender=self.service_key.agent_id,
            timestamp=self.store.clock.now(),
            payload=body,
            correlation_id=env.correlation_id,
        )
        return self.service_key.sign_envelope(response)

    def attach(self, broker: UMBBroker) -> None:
        def on_message(env: MessageEnvelope) -> None:
            if env.message_type is MessageType.STATE_OP:
                broker.publish(self.handle_state_op(env))

        broker.subscribe(self.service_key.agent_id, TopicPattern.parse(STATE_TOPIC))
        broker.connect(self.service_key.agent_id, on_message)


def load_policies(docs: Sequence[Dict[str, Any]]) -> List[StatePolicy]:
    return [StatePolicy.from_doc(doc) for doc in docs]
