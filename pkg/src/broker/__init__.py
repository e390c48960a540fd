"""
统一消息总线包
"""

from .topic_index import TopicIndex
from .umb_broker import (
    BrokerConfig, DeliveryReceipt, DeliveryStatus, PollResult, Subscription, UMBBroker,
    capability_topic, reply_topic,
)

__all__ = [
    'TopicIndex',
    'BrokerConfig',
    'DeliveryReceipt',
    'DeliveryStatus',
    'PollResult',
    'Subscription',
    'UMBBroker',
    'capability_topic',
    'reply_topic',
]
