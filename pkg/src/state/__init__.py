"""
上下文状态共享：版本向量、状态策略与上下文存储。
"""

from .version_vector import Causality, VersionVector
from .context_state import (
    CONTEXT_SERVICE_ID, STATE_TOPIC, ContextEntry, ContextService, ContextSpace, ContextStatus,
    ContextStore, StatePolicy, load_policies, resolve_conflict, resolve_entries,
)

__all__ = [
    'Causality',
    'VersionVector',
    'CONTEXT_SERVICE_ID',
    'STATE_TOPIC',
    'ContextEntry',
    'ContextService',
    'ContextSpace',
    'ContextStatus',
    'ContextStore',
    'StatePolicy',
    'load_policies',
    'resolve_conflict',
    'resolve_entries',
]
