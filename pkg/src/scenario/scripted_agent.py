"""
脚本化智能体

按操作名查表应答请求，可注入确定性的故障：前 N 次调用失败（返回 Error、
超期应答或不应答），以及固定的响应延迟。
"""
import copy
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Dict, List, Mapping, Optional

from src.broker.umb_broker import UMBBroker, reply_topic
from src.core.errors import ScenarioError
from src.core.model import MessageEnvelope, MessageType, TopicPattern
from src.state.context_state import StatePolicy
from src.trust.identity import AgentKey
from src.utils import load_json

logger = logging.getLogger(__name__)

FAULT_MODES = ("error", "timeout", "drop")


@dataclass
class Behavior:
    """单个操作的应答脚本"""

    response: Any = field(default_factory=dict)
    cases: List[Dict[str, Any]] = field(default_factory=list)
    fail_first_n: int = 0
    mode: str = "error"
    delay: float = 0.5

    def __post_init__(self):
        if self.mode not in FAULT_MODES:
            raise ScenarioError(f"不支持的故障模式: {self.mode}")
        if self.fail_first_n < 0 or self.delay < 0:
            raise ScenarioError("failFirstN 和 delay 不能为负")

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Behavior":
        return cls(
            response=copy.deepcopy(doc.get("response", {})),
            cases=copy.deepcopy(doc.get("cases", [])),
            fail_first_n=int(doc.get("failFirstN", 0)),
            mode=str(doc.get("mode", "error")),
            delay=float(doc.get("delay", 0.5)),
        )

    def with_fault(self, fault: Mapping[str, Any]) -> "Behavior":
        return Behavior(self.response, self.cases,
                        int(fault.get("failFirstN", self.fail_first_n)),
                        str(fault.get("mode", self.mode)),
                        float(fault.get("delay", self.delay)))

    def answer(self, parameters: Any) -> Any:
        """第一个 when 子集匹配的 case 胜出，否则返回默认 response"""
        for case in self.cases:
            when = case.get("when", {})
            if isinstance(parameters, dict) and all(parameters.get(k) == v for k, v in when.items()):
                return copy.deepcopy(case.get("response", {}))
        return copy.deepcopy(self.response)


class ScriptedAgent:

    def __init__(self, agent_id: str, aidl: Dict[str, Any], behaviors: Mapping[str, Behavior],
                 policy: Optional[StatePolicy] = None, deadline: float = 5.0):
        self.agent_id = agent_id
        self.aidl = aidl
        self.behaviors: Dict[str, Behavior] = dict(behaviors)
        self.policy = policy or StatePolicy.stateless(agent_id)
        self.deadline = deadline
        self.key: Optional[AgentKey] = None
        self._calls: Dict[str, int] = {}
        self._last_reply: Optional[datetime] = None
        self._lock = threading.Lock()
        operations = {op for cap in aidl.get("capabilities", []) for op in cap.get("semantics", {}).get("operations", [])}
        missing = sorted(operations - set(self.behaviors))
        if missing:
            raise ScenarioError(f"{agent_id} 的操作没有应答脚本: {', '.join(missing)}", agentId=agent_id)

    @classmethod
    def from_doc(cls, doc: Dict[str, Any], deadline: float = 5.0) -> "ScriptedAgent":
        """读取 {"aidl": {...}, "statePolicy": {...}?, "behavior": {op: {...}}}"""
        try:
            aidl = doc["aidl"]
            agent_id = aidl["agentId"]
        except (KeyError, TypeError):
            raise ScenarioError("智能体定义需要 aidl.agentId")
        policy = None
        if "statePolicy" in doc:
            policy = StatePolicy.from_doc({"agentId": agent_id, "statePolicy": doc["statePolicy"]})
        behaviors = {op: Behavior.from_doc(b) for op, b in doc.get("behavior", {}).items()}
        return cls(agent_id, aidl, behaviors, policy, deadline)

    @classmethod
    def load(cls, path: str, deadline: float = 5.0) -> "ScriptedAgent":
        return cls.from_doc(load_json(path), deadline)

    def inject_faults(self, faults: Mapping[str, Mapping[str, Any]]) -> None:
        for op, fault in faults.items():
            if op not in self.behaviors:
                raise ScenarioError(f"{self.agent_id} 没有操作 {op}", agentId=self.agent_id, operation=op)
            self.behaviors[op] = self.behaviors[op].with_fault(fault)

    @property
    def last_sent(self) -> Optional[datetime]:
        """最近一次应答的时间戳；超时故障会让它领先于场景时钟"""
        with self._lock:
            return self._last_reply

    def calls(self, operation: str) -> int:
        with self._lock:
            return self._calls.get(operation, 0)

    # ---- 总线 ----
    def attach(self, broker: UMBBroker, key: AgentKey) -> None:
        self.key = key
        broker.subscribe(self.agent_id, TopicPattern(("capability", self.agent_id, "*")))

        def on_message(env: MessageEnvelope) -> None:
            if env.message_type is not MessageType.REQUEST:
                return
            reply = self.handle(env)
            if reply is not None:
                broker.publish(reply)

        broker.connect(self.agent_id, on_message)

    def handle(self, env: MessageEnvelope) -> Optional[MessageEnvelope]:
        payload = env.payload if isinstance(env.payload, dict) else {}
        operation = payload.get("operation")
        behavior = self.behaviors.get(operation)
        with self._lock:
            call = self._calls.get(operation, 0) + 1
            self._calls[operation] = call

        delay = behavior.delay if behavior else 0.0
        message_type, body = MessageType.RESPONSE, None
        if behavior is None:
            message_type = MessageType.ERROR
            body = {"error": "UnsupportedOperation", "message": f"{self.agent_id} 不支持 {operation}"}
        elif call <= behavior.fail_first_n:
            logger.info(f"{self.agent_id}.{operation} 第 {call} 次调用按脚本失败 ({behavior.mode})")
            if behavior.mode == "drop":
                return None
            if behavior.mode == "timeout":
                delay = self.deadline + 1.0
                body = behavior.answer(payload.get("parameters"))
            else:
                message_type = MessageType.ERROR
                body = {"error": "AgentFault", "message": f"{self.agent_id}.{operation} 暂时不可用", "attempt": call}
        else:
            body = behavior.answer(payload.get("parameters"))

        # 同一发送方的时间戳不能倒退
        with self._lock:
            stamp = env.timestamp + timedelta(seconds=delay)
            if self._last_reply is not None and stamp < self._last_reply:
                stamp = self._last_reply
            self._last_reply = stamp
        reply = MessageEnvelope(
            message_id=f"{env.message_id}/r",
            message_type=message_type,
            topic=reply_topic(env.sender),
            sender=self.agent_id,
            timestamp=stamp,
            payload=body,
            correlation_id=env.correlation_id,
        )
        return self.key.sign_envelope(reply)
