"""
统一消息总线（UMB）

基于主题的发布订阅：每个订阅者一个有界邮箱，流式连接时立即按发布顺序投递，
离线时排队到保留窗口结束，也可以用游标轮询取回。route_request 在总线之上实现
请求/响应四步交换，超时后到达的响应直接丢弃并记录。
"""
import itertools
import logging
import threading
from collections import deque
from concurrent.futures import Future, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, Optional, Set, Tuple, Union

from src.broker.topic_index import TopicIndex
from src.core.clock import Clock, elapsed_seconds
from src.core.errors import (
    DuplicateMessage, InvalidCursor, InvalidSignature, MalformedEnvelope,
    NoSubscriber, RequestTimeout, UnknownAgent, UnknownSender, UnknownSubscription,
)
from src.core.model import (
    REPLY_TYPES, REQUEST_TYPES, MessageEnvelope, Topic, TopicPattern,
    format_instant, validate_agent_id,
)
from src.trust.ledger import TrustLedger

logger = logging.getLogger(__name__)

Sink = Callable[[MessageEnvelope], None]


def capability_topic(agent_id: str, capability: str) -> Topic:
    return Topic(("capability", agent_id, capability))


def reply_topic(agent_id: str) -> Topic:
    return Topic(("reply", agent_id))


@dataclass(frozen=True)
class BrokerConfig:
    retention_window: float = 300.0        # 离线排队保留秒数
    max_queue_per_subscriber: int = 1000
    fallback_poll_interval: float = 2.0    # 建议的轮询间隔（秒）
    request_deadline: float = 5.0          # route_request 的响应期限（秒）
    max_clock_skew: float = 60.0           # 信封时间戳与总线时钟的最大偏差（秒）
    bind_host: str = "127.0.0.1"
    bind_port: int = 8765

    def __post_init__(self):
        if self.retention_window <= 0:
            raise ValueError(f"retentionWindow 必须为正数: {self.retention_window}")
        if self.max_queue_per_subscriber < 1:
            raise ValueError(f"maxQueuePerSubscriber 必须 ≥ 1: {self.max_queue_per_subscriber}")
        if self.fallback_poll_interval <= 0 or self.request_deadline <= 0:
            raise ValueError("轮询间隔和请求期限必须为正数")
        if self.max_clock_skew <= 0:
            raise ValueError(f"maxClockSkew 必须为正数: {self.max_clock_skew}")

    @property
    def skew_limit(self) -> float:
        """实际生效的偏差上限，不超过保留窗口"""
        return min(self.max_clock_skew, self.retention_window)

    @classmethod
    def from_dict(cls, params: Dict[str, Any]) -> "BrokerConfig":
        return cls(
            retention_window=float(params.get("retentionWindow", 300.0)),
            max_queue_per_subscriber=int(params.get("maxQueuePerSubscriber", 1000)),
            fallback_poll_interval=float(params.get("fallbackPollInterval", 2.0)),
            request_deadline=float(params.get("requestDeadline", 5.0)),
            max_clock_skew=float(params.get("maxClockSkew", 60.0)),
            bind_host=str(params.get("bindHost", "127.0.0.1")),
            bind_port=int(params.get("bindPort", 8765)),
        )


@dataclass(frozen=True)
class Subscription:
    subscription_id: str
    subscriber: str
    pattern: TopicPattern
    created_at: datetime

    def to_doc(self) -> Dict[str, Any]:
        return {
            "subscriptionId": self.subscription_id,
            "subscriber": self.subscriber,
            "pattern": self.pattern.render(),
            "createdAt": format_instant(self.created_at),
        }


class DeliveryStatus(str, Enum):
    DELIVERED = "Delivered"
    QUEUED = "Queued"
    EXPIRED = "Expired"


@dataclass(frozen=True)
class DeliveryReceipt:
    message_id: str
    subscriber: str
    status: DeliveryStatus
    attempt: int = 1

    def to_doc(self) -> Dict[str, Any]:
        return {"messageId": self.message_id, "subscriber": self.subscriber,
                "status": self.status.value, "attempt": self.attempt}


@dataclass(frozen=True)
class PollResult:
    envelopes: List[MessageEnvelope]
    cursor: int


@dataclass
class _QueuedItem:
    seq: int
    envelope: MessageEnvelope
    enqueued_at: datetime
    subscription_ids: Set[str]
    attempt: int = 1
    queued: bool = False


@dataclass
class _Mailbox:
    """单个订阅者的邮箱，独立加锁"""
    agent_id: str
    lock: threading.RLock = field(default_factory=threading.RLock)
    items: Deque[_QueuedItem] = field(default_factory=deque)
    next_seq: int = 1
    acked: int = 0
    sink: Optional[Sink] = None
    draining: bool = False

    @property
    def last_seq(self) -> int:
        return self.next_seq - 1


@dataclass
class _PendingRequest:
    request: MessageEnvelope
    future: Future


class UMBBroker:
    """
    单逻辑实例的消息总线

    订阅表由一把锁保护（发布/订阅/轮询对它线性化），每个邮箱有自己的锁；
    投递回调总在锁外调用，回调里可以再次发布。
    """

    def __init__(self, trust: TrustLedger, clock: Clock, config: Optional[BrokerConfig] = None):
        self.trust = trust
        self.clock = clock
        self.config = config or BrokerConfig()
        self._lock = threading.RLock()
        self._index = TopicIndex()
        self._subscriptions: Dict[str, Subscription] = {}
        self._by_pair: Dict[Tuple[str, str], str] = {}
        self._mailboxes: Dict[str, _Mailbox] = {}
        self._receipts: Dict[Tuple[str, str, str], DeliveryReceipt] = {}
        self._receipt_times: Dict[Tuple[str, str, str], datetime] = {}
        # 以下三张表都记录写入时刻，超过保留窗口后由 _sweep 清理
        self._seen: Dict[Tuple[str, str], datetime] = {}
        self._last_stamp: Dict[str, datetime] = {}
        self._pending: Dict[str, _PendingRequest] = {}
        self._expired_correlations: Dict[str, datetime] = {}
        self._next_sweep: Optional[datetime] = None
        self._sub_counter = itertools.count(1)
        self._trace: List[Dict[str, Any]] = []
        self._trace_lock = threading.Lock()
        self._receipt_lock = threading.Lock()

    # ---- 追踪 ----
    def _record(self, event: str, env: MessageEnvelope, subscriber: Optional[str] = None, **extra) -> None:
        entry = {
            "at": format_instant(self.clock.now()),
            "event": event,
            "messageId": env.message_id,
            "topic": env.topic.render(),
            "sender": env.sender,
            "subscriber": subscriber,
            "correlationId": env.correlation_id,
        }
        entry.update(extra)
        with self._trace_lock:
            self._trace.append(entry)

    def trace(self) -> List[Dict[str, Any]]:
        """按 (时间, messageId, 事件, 订阅者) 排序的总线追踪"""
        with self._trace_lock:
            entries = list(self._trace)
        return sorted(entries, key=lambda e: (e["at"], e["messageId"], e["event"], e["subscriber"] or ""))

    # ---- 订阅 ----
    def _require_registered(self, agent_id: str) -> None:
        validate_agent_id(agent_id)
        if not self.trust.identities.is_registered(agent_id):
            raise UnknownAgent(f"未登记的智能体: {agent_id}", agentId=agent_id)

    def _mailbox(self, agent_id: str) -> _Mailbox:
        with self._lock:
            box = self._mailboxes.get(agent_id)
            if box is None:
                box = self._mailboxes[agent_id] = _Mailbox(agent_id)
            return box

    def subscribe(self, subscriber: str, pattern: Union[TopicPattern, str]) -> Subscription:
        """订阅主题模式；相同 (subscriber, pattern) 重复订阅返回同一个订阅"""
        pattern = TopicPattern.of(pattern)
        self._require_registered(subscriber)
        with self._lock:
            existing = self._by_pair.get((subscriber, pattern.render()))
            if existing is not None:
                return self._subscriptions[existing]
            subscription = Subscription(f"sub-{next(self._sub_counter):06d}", subscriber,
                                        pattern, self.clock.now())
            self._subscriptions[subscription.subscription_id] = subscription
            self._by_pair[(subscriber, pattern.render())] = subscription.subscription_id
            self._index.add(pattern, subscription.subscription_id)
            self._mailbox(subscriber)
        logger.debug(f"{subscriber} 订阅 {pattern} ({subscription.subscription_id})")
        return subscription

    def unsubscribe(self, subscription_id: str) -> Subscription:
        """取消订阅，并丢弃只因该订阅而排队的消息"""
        with self._lock:
            subscription = self._subscriptions.pop(subscription_id, None)
            if subscription is None:
                raise UnknownSubscription(f"订阅不存在: {subscription_id}", subscriptionId=subscription_id)
            del self._by_pair[(subscription.subscriber, subscription.pattern.render())]
            self._index.remove(subscription.pattern, subscription_id)
            box = self._mailboxes.get(subscription.subscriber)
        if box is not None:
            with box.lock:
                kept = deque()
                for item in box.items:
                    item.subscription_ids.discard(subscription_id)
                    if item.subscription_ids:
                        kept.append(item)
                    else:
                        with self._receipt_lock:
                            key = (item.envelope.sender, item.envelope.message_id, box.agent_id)
                            self._receipts.pop(key, None)
                            self._receipt_times.pop(key, None)
                box.items = kept
        logger.debug(f"取消订阅 {subscription_id}")
        return subscription

    def subscriptions(self, subscriber: Optional[str] = None) -> List[Subscription]:
        with self._lock:
            subs = sorted(self._subscriptions.values(), key=lambda s: s.subscription_id)
        return [s for s in subs if subscriber is None or s.subscriber == subscriber]

    def matching_subscribers(self, topic: Union[Topic, str]) -> List[str]:
        topic = Topic.of(topic)
        with self._lock:
            ids = self._index.match(topic)
            return sorted({self._subscriptions[i].subscriber for i in ids})

    # ---- 发布 ----
    def _verify(self, env: MessageEnvelope, now: datetime) -> None:
        """
        签名按总线收到信封时生效的密钥校验，不采信发送方自报的时间戳

        时间戳本身必须落在总线时钟的允许偏差内。
        """
        if not self.trust.identities.is_registered(env.sender):
            raise UnknownSender(f"发送方未登记: {env.sender}", sender=env.sender)
        skew = abs(elapsed_seconds(now, env.timestamp))
        if skew > self.config.skew_limit:
            raise MalformedEnvelope(f"信封时间戳偏离总线时钟 {skew:.3f}s: {env.message_id}",
                                    messageId=env.message_id, timestamp=format_instant(env.timestamp),
                                    limit=self.config.skew_limit)
        if not self.trust.identities.verify(env.sender, env.signing_bytes(), env.signature, at=now):
            raise InvalidSignature(f"信封签名无效: {env.message_id}", messageId=env.message_id)

    def publish(self, env: MessageEnvelope) -> List[DeliveryReceipt]:
        """校验并按主题扇出，返回每个匹配订阅者一张回执"""
        now = self.clock.now()
        self._sweep(now)
        self._verify(env, now)
        with self._lock:
            key = (env.sender, env.message_id)
            if key in self._seen:
                raise DuplicateMessage(f"重复的消息: {env.sender}/{env.message_id}",
                                       messageId=env.message_id)
            last = self._last_stamp.get(env.sender)
            if last is not None and env.timestamp < last:
                raise MalformedEnvelope(
                    f"{env.sender} 的时间戳倒退: {format_instant(env.timestamp)} < {format_instant(last)}",
                    messageId=env.message_id, sender=env.sender, last=format_instant(last))
            self._seen[key] = now
            self._last_stamp[env.sender] = env.timestamp
        self.trust.observe_envelope(env)
        self._record("publish", env)

        if env.message_type in REPLY_TYPES and env.correlation_id is not None:
            if not self._settle_reply(env):
                return []

        with self._lock:
            grouped: Dict[str, Set[str]] = {}
            for sub_id in self._index.match(env.topic):
                grouped.setdefault(self._subscriptions[sub_id].subscriber, set()).add(sub_id)
            boxes = [(self._mailbox(agent), sub_ids) for agent, sub_ids in sorted(grouped.items())]

        for box, sub_ids in boxes:
            self._enqueue(box, env, sub_ids)
        for box, _ in boxes:
            self._drain(box)
        return [self.receipt(env.sender, env.message_id, box.agent_id)
                or DeliveryReceipt(env.message_id, box.agent_id, DeliveryStatus.EXPIRED)
                for box, _ in boxes]

    def _settle_reply(self, env: MessageEnvelope) -> bool:
        """把响应交给等待中的请求；返回 False 表示该响应已被丢弃"""
        with self._lock:
            pending = self._pending.get(env.correlation_id)
            late = env.correlation_id in self._expired_correlations
            if pending is not None:
                waited = elapsed_seconds(pending.request.timestamp, env.timestamp)
                if waited > self.config.request_deadline:
                    del self._pending[env.correlation_id]
                    self._expired_correlations[env.correlation_id] = self.clock.now()
                    pending.future.set_exception(RequestTimeout(
                        f"{env.correlation_id} 在 {self.config.request_deadline}s 内没有响应",
                        correlationId=env.correlation_id))
                    late = True
                else:
                    del self._pending[env.correlation_id]
                    pending.future.set_result(env)
                    return True
        if late:
            logger.warning(f"丢弃超时后到达的响应 {env.message_id} (correlationId={env.correlation_id})")
            self._record("late-response-dropped", env)
            return False
        return True

    def _enqueue(self, box: _Mailbox, env: MessageEnvelope, sub_ids: Set[str]) -> None:
        now = self.clock.now()
        with box.lock:
            self._purge_locked(box, now)
            if len(box.items) >= self.config.max_queue_per_subscriber:
                evicted = box.items.popleft()
                box.acked = max(box.acked, evicted.seq)
                self._set_receipt(evicted.envelope, box.agent_id, DeliveryStatus.EXPIRED, evicted.attempt)
                logger.warning(f"{box.agent_id} 的队列已满，丢弃最早的消息 {evicted.envelope.message_id}")
                self._record("expire", evicted.envelope, box.agent_id, reason="overflow")
            item = _QueuedItem(box.next_seq, env, now, set(sub_ids), queued=box.sink is None)
            box.next_seq += 1
            box.items.append(item)
            self._set_receipt(env, box.agent_id, DeliveryStatus.QUEUED, item.attempt)
        if item.queued:
            self._record("queue", env, box.agent_id)

    def _set_receipt(self, env: MessageEnvelope, subscriber: str, status: DeliveryStatus, attempt: int) -> None:
        key = (env.sender, env.message_id, subscriber)
        with self._receipt_lock:
            self._receipts[key] = DeliveryReceipt(env.message_id, subscriber, status, max(1, attempt))
            self._receipt_times[key] = self.clock.now()

    def _sweep(self, now: datetime) -> None:
        """
        清理超过保留窗口的簿记：过期排队消息、已结清的回执、去重表和超时的 correlationId

        每四分之一个保留窗口最多执行一次。
        """
        with self._lock:
            if self._next_sweep is not None and now < self._next_sweep:
                return
            self._next_sweep = now + timedelta(seconds=self.config.retention_window / 4)
            horizon = now - timedelta(seconds=self.config.retention_window)
            for key in [k for k, at in self._seen.items() if at < horizon]:
                del self._seen[key]
            for correlation in [c for c, at in self._expired_correlations.items() if at < horizon]:
                del self._expired_correlations[correlation]
            boxes = list(self._mailboxes.values())
        for box in boxes:
            with box.lock:
                self._purge_locked(box, now)
        with self._receipt_lock:
            settled = [k for k, at in self._receipt_times.items()
                       if at < horizon and self._receipts[k].status is not DeliveryStatus.QUEUED]
            for key in settled:
                del self._receipts[key]
                del self._receipt_times[key]

    def bookkeeping_size(self) -> Dict[str, int]:
        with self._lock:
            sizes = {"seen": len(self._seen), "expiredCorrelations": len(self._expired_correlations)}
        with self._receipt_lock:
            sizes["receipts"] = len(self._receipts)
        return sizes

    def _purge_locked(self, box: _Mailbox, now: datetime) -> None:
        horizon = now - timedelta(seconds=self.config.retention_window)
        while box.items and box.items[0].enqueued_at < horizon:
            item = box.items.popleft()
            box.acked = max(box.acked, item.seq)
            self._set_receipt(item.envelope, box.agent_id, DeliveryStatus.EXPIRED, item.attempt)
            logger.warning(f"{box.agent_id} 的消息 {item.envelope.message_id} 超过保留窗口，已过期")
            self._record("expire", item.envelope, box.agent_id, reason="retention")

    def _drain(self, box: _Mailbox) -> None:
        """通过流式连接按序清空邮箱；同一时刻只有一个线程在投递"""
        with box.lock:
            if box.draining or box.sink is None:
                return
            box.draining = True
        try:
            while True:
                with box.lock:
                    if box.sink is None or not box.items:
                        return
                    item = box.items[0]
                    sink = box.sink
                    if item.queued:
                        item.attempt += 1
                        item.queued = False
                try:
                    sink(item.envelope)
                except Exception as e:
                    logger.warning(f"向 {box.agent_id} 投递 {item.envelope.message_id} 失败，断开流式连接: {e}")
                    with box.lock:
                        box.sink = None
                        item.queued = True
                    return
                with box.lock:
                    try:
                        box.items.remove(item)
                    except ValueError:
                        continue
                    box.acked = max(box.acked, item.seq)
                    self._set_receipt(item.envelope, box.agent_id, DeliveryStatus.DELIVERED, item.attempt)
                self._record("deliver", item.envelope, box.agent_id, attempt=item.attempt)
        finally:
            with box.lock:
                box.draining = False

    # ---- 流式连接 ----
    def connect(self, agent_id: str, sink: Sink) -> None:
        """建立流式连接，先按发布顺序补发离线期间排队的消息"""
        self._require_registered(agent_id)
        box = self._mailbox(agent_id)
        with box.lock:
            box.sink = sink
            self._purge_locked(box, self.clock.now())
        logger.info(f"{agent_id} 已建立流式连接")
        self._drain(box)

    def disconnect(self, agent_id: str) -> None:
        with self._lock:
            box = self._mailboxes.get(agent_id)
        if box is not None:
            with box.lock:
                box.sink = None
            logger.info(f"{agent_id} 断开流式连接")

    def is_connected(self, agent_id: str) -> bool:
        with self._lock:
            box = self._mailboxes.get(agent_id)
        return box is not None and box.sink is not None

    # ---- 轮询回退 ----
    def fallback_poll(self, subscriber: str, cursor: int = 0) -> PollResult:
        """
        返回游标之后仍在排队的消息

        同一游标重复轮询返回相同列表；传入的游标同时确认其之前的消息。
        """
        self._require_registered(subscriber)
        box = self._mailbox(subscriber)
        with box.lock:
            if not isinstance(cursor, int) or isinstance(cursor, bool) or cursor < 0 or cursor > box.last_seq:
                raise InvalidCursor(f"非法的游标: {cursor!r}", cursor=str(cursor), lastSeq=box.last_seq)
            self._purge_locked(box, self.clock.now())
            self._release_locked(box, cursor)
            items = [item for item in box.items if item.seq > cursor]
            for item in items:
                if item.queued:
                    item.attempt += 1
                    item.queued = False
            envelopes = [item.envelope for item in items]
            new_cursor = items[-1].seq if items else max(cursor, box.acked)
        for env in envelopes:
            self._record("poll", env, subscriber)
        return PollResult(envelopes, new_cursor)

    def acknowledge(self, subscriber: str, cursor: int) -> int:
        """确认游标之前的消息并释放队列，返回释放条数"""
        self._require_registered(subscriber)
        box = self._mailbox(subscriber)
        with box.lock:
            if cursor < 0 or cursor > box.last_seq:
                raise InvalidCursor(f"非法的游标: {cursor!r}", cursor=str(cursor), lastSeq=box.last_seq)
            return self._release_locked(box, cursor)

    def _release_locked(self, box: _Mailbox, cursor: int) -> int:
        released = 0
        while box.items and box.items[0].seq <= cursor:
            item = box.items.popleft()
            self._set_receipt(item.envelope, box.agent_id, DeliveryStatus.DELIVERED, item.attempt)
            released += 1
        box.acked = max(box.acked, cursor)
        return released

    def queue_depth(self, subscriber: str) -> int:
        box = self._mailbox(subscriber)
        with box.lock:
            return len(box.items)

    # ---- 请求/响应 ----
    def route_request(self, env: MessageEnvelope, target: Union[Topic, str, None] = None) -> MessageEnvelope:
        """
        请求/响应四步交换

        (1) 接收请求 (2) 投递给能力主题的订阅者 (3) 接收 correlationId 相同的响应
        (4) 把响应交还请求方。双方只通过总线通信。
        """
        if env.message_type not in REQUEST_TYPES:
            raise MalformedEnvelope(f"{env.message_type.value} 不能作为请求发送")
        if not env.correlation_id:
            raise MalformedEnvelope("请求缺少 correlationId")
        target = Topic.of(target) if target is not None else env.topic
        if target != env.topic:
            raise MalformedEnvelope(f"请求主题 {env.topic} 与目标 {target} 不一致")
        if not self.matching_subscribers(target):
            raise NoSubscriber(f"没有智能体订阅 {target}", topic=target.render())

        future: Future = Future()
        with self._lock:
            if env.correlation_id in self._pending:
                raise MalformedEnvelope(f"correlationId 正在使用中: {env.correlation_id}")
            self._pending[env.correlation_id] = _PendingRequest(env, future)
        try:
            self.publish(env)
        except Exception:
            with self._lock:
                self._pending.pop(env.correlation_id, None)
            raise

        try:
            response = future.result(timeout=self.clock.wait_budget(self.config.request_deadline))
        except FutureTimeout:
            with self._lock:
                self._pending.pop(env.correlation_id, None)
                self._expired_correlations[env.correlation_id] = self.clock.now()
            self._record("timeout", env)
            logger.warning(f"请求 {env.message_id} 超时 (correlationId={env.correlation_id})")
            raise RequestTimeout(f"{env.correlation_id} 在 {self.config.request_deadline}s 内没有响应",
                                 correlationId=env.correlation_id)
        except RequestTimeout:
            self._record("timeout", env)
            logger.warning(f"请求 {env.message_id} 超时 (correlationId={env.correlation_id})")
            raise
        self._record("response", response, env.sender)
        return response

    # ---- 回执 ----
    def receipts(self, message_id: Optional[str] = None) -> List[DeliveryReceipt]:
        with self._receipt_lock:
            rows = [r for r in self._receipts.values() if message_id is None or r.message_id == message_id]
        return sorted(rows, key=lambda r: (r.message_id, r.subscriber))

    def receipt(self, sender: str, message_id: str, subscriber: str) -> Optional[DeliveryReceipt]:
        with self._receipt_lock:
            return self._receipts.get((sender, message_id, subscriber))
