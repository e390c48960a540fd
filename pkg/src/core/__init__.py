"""
核心数据模型包：错误体系、时钟、主题与信封、规范化序列化。
"""

from .errors import ModxError
from .clock import Clock, SimulatedClock, SystemClock
from .model import (
    MessageEnvelope, MessageType, Topic, TopicPattern,
    canonicalize, envelope_digest, format_instant, parse_doc, parse_instant,
    validate_agent_id,
)

__all__ = [
    'ModxError',
    'Clock',
    'SimulatedClock',
    'SystemClock',
    'MessageEnvelope',
    'MessageType',
    'Topic',
    'TopicPattern',
    'canonicalize',
    'envelope_digest',
    'format_instant',
    'parse_doc',
    'parse_instant',
    'validate_agent_id',
]
