"""
线路层数据模型

智能体标识、主题、消息信封、规范化序列化，以及载荷和翻译共用的文档树。
DocValue 直接使用 Python 的 None/bool/int/float/str/list/dict 表示。
"""
import base64
import copy
import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pytz

from src.core.errors import (
    InvalidAgentId, InvalidPattern, InvalidTopic, MalformedDocument,
    MalformedEnvelope, NonFiniteNumber,
)

AGENT_ID_RE = re.compile(r"^[a-z0-9-]+$")
SEGMENT_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


def validate_agent_id(value: Any) -> str:
    """校验 AgentId，返回原字符串"""
    if not isinstance(value, str) or not AGENT_ID_RE.match(value):
        raise InvalidAgentId(f"非法的智能体标识: {value!r}", agentId=str(value))
    return value


# ---------------------------------------------------------------------------
# 规范化序列化
# ---------------------------------------------------------------------------

def _render_number(value: Any) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    number = float(value)
    if not math.isfinite(number):
        raise NonFiniteNumber(f"文档中包含非有限数值: {number}")
    # 整数值的浮点与同值整数输出相同字节
    if number.is_integer():
        return str(int(number))
    return repr(number)


def _render(value: Any, out: list) -> None:
    if value is None:
        out.append("null")
    elif isinstance(value, (bool, np.bool_)):
        out.append("true" if value else "false")
    elif isinstance(value, (int, float, np.integer, np.floating)):
        out.append(_render_number(value))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, dict):
        out.append("{")
        keys = list(value.keys())
        for key in keys:
            if not isinstance(key, str):
                raise MalformedDocument(f"映射键必须是字符串: {key!r}")
        for i, key in enumerate(sorted(keys)):
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _render(value[key], out)
        out.append("}")
    elif isinstance(value, (list, tuple, np.ndarray)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _render(item, out)
        out.append("]")
    else:
        raise MalformedDocument(f"不支持的文档值类型: {type(value).__name__}")


def canonicalize(doc: Any) -> bytes:
    """规范化序列化：键按码点排序、无多余空白、UTF-8、数值取最短往返形式"""
    out: list = []
    _render(doc, out)
    try:
        return "".join(out).encode("utf-8")
    except UnicodeEncodeError as e:
        raise MalformedDocument(f"文档包含无法编码为 UTF-8 的字符: {e.reason}")


def _reject_constant(name: str) -> Any:
    raise NonFiniteNumber(f"文档中包含非有限数值: {name}")


def _unique_pairs(pairs):
    doc = {}
    for key, value in pairs:
        if key in doc:
            raise MalformedDocument(f"映射键重复: {key}", key=key)
        doc[key] = value
    return doc


def parse_doc(data: Union[bytes, str]) -> Any:
    """解析 JSON 文本为 DocValue，拒绝 NaN/Infinity、重复键和不成对的代理码点"""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedDocument(f"文档不是合法的 UTF-8: {e}")
    try:
        doc = json.loads(data, parse_constant=_reject_constant, object_pairs_hook=_unique_pairs)
    except json.JSONDecodeError as e:
        raise MalformedDocument(f"JSON 解析失败: {e}")
    _reject_surrogates(doc)
    return doc


def _reject_surrogates(value: Any) -> None:
    if isinstance(value, str):
        try:
            value.encode("utf-8")
        except UnicodeEncodeError:
            raise MalformedDocument(f"字符串包含不成对的代理码点: {value!r}")
    elif isinstance(value, dict):
        for key, item in value.items():
            _reject_surrogates(key)
            _reject_surrogates(item)
    elif isinstance(value, list):
        for item in value:
            _reject_surrogates(item)


def doc_digest(doc: Any) -> bytes:
    return hashlib.sha256(canonicalize(doc)).digest()


# ---------------------------------------------------------------------------
# 时间
# ---------------------------------------------------------------------------

def utc_instant(value: datetime) -> datetime:
    """转换为 UTC 并截断到毫秒"""
    if value.tzinfo is None:
        value = pytz.utc.localize(value)
    value = value.astimezone(pytz.utc)
    return value.replace(microsecond=(value.microsecond // 1000) * 1000)


def format_instant(value: datetime) -> str:
    value = utc_instant(value)
    return value.strftime("%Y-%m-%dT%H:%M:%S.") + f"{value.microsecond // 1000:03d}Z"


def parse_instant(text: str) -> datetime:
    if not isinstance(text, str) or not text.endswith("Z"):
        raise MalformedDocument(f"时间戳必须是 UTC 且以 Z 结尾: {text!r}")
    raw = text[:-1]
    for fmt in ("%Y-%m-%dT%H:%M:%S.%f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M"):
        try:
            return utc_instant(pytz.utc.localize(datetime.strptime(raw, fmt)))
        except ValueError:
            continue
    raise MalformedDocument(f"无法解析时间戳: {text!r}")


# ---------------------------------------------------------------------------
# 主题
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Topic:
    """点号分隔的主题，例如 flight-disruption 或 capability.flight-agent-001.flightBooking"""

    segments: Tuple[str, ...]

    def __post_init__(self):
        if not self.segments:
            raise InvalidTopic("主题至少需要一个段")
        for segment in self.segments:
            if not isinstance(segment, str) or not SEGMENT_RE.match(segment):
                raise InvalidTopic(f"非法的主题段: {segment!r}", topic=".".join(map(str, self.segments)))

    @classmethod
    def parse(cls, text: str) -> "Topic":
        if not isinstance(text, str) or not text:
            raise InvalidTopic(f"非法的主题: {text!r}")
        return cls(tuple(text.split(".")))

    @classmethod
    def of(cls, value: Union["Topic", str]) -> "Topic":
        return value if isinstance(value, Topic) else cls.parse(value)

    def render(self) -> str:
        return ".".join(self.segments)

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class TopicPattern:
    """订阅模式：`*` 匹配恰好一个段，`#` 只能出现在末尾并匹配零个或多个段"""

    segments: Tuple[str, ...]

    def __post_init__(self):
        if not self.segments:
            raise InvalidPattern("订阅模式至少需要一个段")
        last = len(self.segments) - 1
        for i, segment in enumerate(self.segments):
            if segment == "#":
                if i != last:
                    raise InvalidPattern("`#` 只能出现在模式末尾", pattern=self.render())
            elif segment != "*" and (not isinstance(segment, str) or not SEGMENT_RE.match(segment)):
                raise InvalidPattern(f"非法的模式段: {segment!r}", pattern=".".join(map(str, self.segments)))

    @classmethod
    def parse(cls, text: str) -> "TopicPattern":
        if not isinstance(text, str) or not text:
            raise InvalidPattern(f"非法的订阅模式: {text!r}")
        return cls(tuple(text.split(".")))

    @classmethod
    def of(cls, value: Union["TopicPattern", str]) -> "TopicPattern":
        return value if isinstance(value, TopicPattern) else cls.parse(value)

    def matches(self, topic: Topic) -> bool:
        segments = topic.segments
        for i, expected in enumerate(self.segments):
            if expected == "#":
                return True
            if i >= len(segments):
                return False
            if expected != "*" and expected != segments[i]:
                return False
        return len(self.segments) == len(segments)

    def render(self) -> str:
        return ".".join(self.segments)

    def __str__(self) -> str:
        return self.render()


# ---------------------------------------------------------------------------
# 消息信封
# ---------------------------------------------------------------------------

class MessageType(str, Enum):
    CAPABILITY_QUERY = "CapabilityQuery"
    CAPABILITY_RESPONSE = "CapabilityResponse"
    REQUEST = "Request"
    RESPONSE = "Response"
    EVENT = "Event"
    STATE_OP = "StateOp"
    WORKFLOW_OP = "WorkflowOp"
    ERROR = "Error"


# 可以经 route_request 发出并等待关联响应的消息类型
REQUEST_TYPES = frozenset({
    MessageType.REQUEST, MessageType.CAPABILITY_QUERY,
    MessageType.STATE_OP, MessageType.WORKFLOW_OP,
})
REPLY_TYPES = frozenset({MessageType.RESPONSE, MessageType.CAPABILITY_RESPONSE, MessageType.ERROR})


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    padding = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + padding)


@dataclass(frozen=True)
class MessageEnvelope:
    """总线上交换的签名消息单元，签名覆盖除 signature 外的全部字段"""

    message_id: str
    message_type: MessageType
    topic: Topic
    sender: str
    timestamp: datetime
    payload: Any = field(default_factory=dict)
    correlation_id: Optional[str] = None
    signature: bytes = b""

    def __post_init__(self):
        if not self.message_id or not isinstance(self.message_id, str):
            raise MalformedEnvelope("messageId 不能为空")
        object.__setattr__(self, "message_type", MessageType(self.message_type))
        object.__setattr__(self, "topic", Topic.of(self.topic))
        validate_agent_id(self.sender)
        object.__setattr__(self, "timestamp", utc_instant(self.timestamp))
        # 先规范化一次，既校验有限性，也切断与调用方对象的共享
        canonicalize(self.payload)
        object.__setattr__(self, "payload", copy.deepcopy(self.payload))

    def unsigned_doc(self) -> Dict[str, Any]:
        return {
            "messageId": self.message_id,
            "messageType": self.message_type.value,
            "topic": self.topic.render(),
            "sender": self.sender,
            "correlationId": self.correlation_id,
            "timestamp": format_instant(self.timestamp),
            "payload": self.payload,
        }

    def signing_bytes(self) -> bytes:
        return canonicalize(self.unsigned_doc())

    def to_doc(self) -> Dict[str, Any]:
        doc = self.unsigned_doc()
        doc["signature"] = b64url_encode(self.signature)
        return doc

    def with_signature(self, signature: bytes) -> "MessageEnvelope":
        return dataclasses.replace(self, signature=signature)

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "MessageEnvelope":
        if not isinstance(doc, dict):
            raise MalformedEnvelope("信封必须是 JSON 对象")
        try:
            return cls(
                message_id=doc["messageId"],
                message_type=MessageType(doc["messageType"]),
                topic=Topic.parse(doc["topic"]),
                sender=doc["sender"],
                correlation_id=doc.get("correlationId"),
                timestamp=parse_instant(doc["timestamp"]),
                payload=doc.get("payload", {}),
                signature=b64url_decode(doc.get("signature", "")),
            )
        except KeyError as e:
            raise MalformedEnvelope(f"信封缺少字段: {e.args[0]}")
        except ValueError as e:
            raise MalformedEnvelope(f"信封字段非法: {e}")


def envelope_digest(env: MessageEnvelope) -> bytes:
    """信封摘要：去掉签名后的规范化字节的 SHA-256"""
    return hashlib.sha256(env.signing_bytes()).digest()


def normalize_iri(iri: str) -> str:
    """去掉 http(s):// 前缀和末尾斜杠，schema.org/Flight 与 http://schema.org/Flight 视为同一术语"""
    text = iri.strip()
    for prefix in ("https://", "http://"):
        if text.startswith(prefix):
            text = text[len(prefix):]
            break
    return text.rstrip("/")
