"""
Mod-X 错误体系

所有领域错误都继承自 ModxError，code 字段与协议中约定的错误名一致，
便于在 Error 信封和 CLI 的 --json 输出中原样返回。
"""
from typing import Any, Dict, Optional


class ModxError(Exception):
    """领域错误基类"""

    code = "ModxError"

    def __init__(self, message: Optional[str] = None, **details: Any):
        self.message = message or self.code
        self.details = details
        super().__init__(self.message)

    def to_doc(self) -> Dict[str, Any]:
        """转换为可序列化的错误文档"""
        return {
            "error": self.code,
            "message": self.message,
            "details": _plain(self.details),
        }

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = [_plain(v) for v in value]
        return sorted(items, key=str) if isinstance(value, (set, frozenset)) else items
    if isinstance(value, bytes):
        return value.hex()
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    return str(value)


# ---- core-model ----
class NonFiniteNumber(ModxError):
    code = "NonFiniteNumber"


class MalformedDocument(ModxError):
    code = "MalformedDocument"


class InvalidTopic(ModxError):
    code = "InvalidTopic"


class InvalidAgentId(ModxError):
    code = "InvalidAgentId"


class MalformedEnvelope(ModxError):
    code = "MalformedEnvelope"


# ---- umb-broker ----
class InvalidSignature(ModxError):
    code = "InvalidSignature"


class UnknownSender(ModxError):
    code = "UnknownSender"


class UnknownAgent(ModxError):
    code = "UnknownAgent"


class InvalidPattern(ModxError):
    code = "InvalidPattern"


class UnknownSubscription(ModxError):
    code = "UnknownSubscription"


class NoSubscriber(ModxError):
    code = "NoSubscriber"


class RequestTimeout(ModxError):
    code = "Timeout"


class InvalidCursor(ModxError):
    code = "InvalidCursor"


class DuplicateMessage(ModxError):
    code = "DuplicateMessage"


# ---- capability-registry ----
class DimensionMismatch(ModxError):
    code = "DimensionMismatch"


class StaleVersion(ModxError):
    code = "StaleVersion"


class ZeroVector(ModxError):
    code = "ZeroVector"


class EmbeddingFailure(ModxError):
    code = "EmbeddingFailure"


class MalformedQuery(ModxError):
    code = "MalformedQuery"


class MalformedCapability(ModxError):
    code = "MalformedCapability"


class OntologyCycle(ModxError):
    code = "OntologyCycle"


# ---- translation-layer ----
class EmptyText(ModxError):
    code = "EmptyText"


class RankDeficient(ModxError):
    code = "RankDeficient"


class MissingLookupKey(ModxError):
    code = "MissingLookupKey"


class PathConflict(ModxError):
    code = "PathConflict"


class InvalidConceptTable(ModxError):
    code = "InvalidConceptTable"


# ---- context-state ----
class ConsentMissing(ModxError):
    code = "ConsentMissing"


class ContextClosed(ModxError):
    code = "ContextClosed"


class NotParticipant(ModxError):
    code = "NotParticipant"


class TypeNotShareable(ModxError):
    code = "TypeNotShareable"


class KeyAbsent(ModxError):
    code = "KeyAbsent"


class NotRevocable(ModxError):
    code = "NotRevocable"


class UnknownContext(ModxError):
    code = "UnknownContext"


class InvalidPolicy(ModxError):
    code = "InvalidPolicy"


# ---- orchestrator ----
class CycleDetected(ModxError):
    code = "CycleDetected"


class DanglingPlaceholder(ModxError):
    code = "DanglingPlaceholder"


class OrphanEdge(ModxError):
    code = "OrphanEdge"


class NoCapableAgent(ModxError):
    code = "NoCapableAgent"


class BudgetExceeded(ModxError):
    code = "BudgetExceeded"


class CompensationFailed(ModxError):
    code = "CompensationFailed"


class InvalidWorkflow(ModxError):
    code = "InvalidWorkflow"


class AgentFault(ModxError):
    """响应方返回了 Error 信封"""
    code = "AgentFault"


# ---- trust-ledger ----
class DuplicateAgent(ModxError):
    code = "DuplicateAgent"


class MalformedRecord(ModxError):
    code = "MalformedRecord"


class EmptyBatch(ModxError):
    code = "EmptyBatch"


class DanglingEvidence(ModxError):
    code = "DanglingEvidence"


# ---- scenario-harness ----
class ScenarioError(ModxError):
    code = "ScenarioError"
