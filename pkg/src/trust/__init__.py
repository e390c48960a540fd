"""
信任层：智能体身份、Merkle 批量锚定、分级哈希链账本与信誉。
"""

from .identity import AgentIdentity, AgentKey, IdentityRegistry, jws_compact, verify_jws
from .merkle import inclusion_proof, merkle_root, verify_inclusion
from .ledger import (
    AUTHORITY_ID, LedgerConfig, LedgerRecord, LedgerRef, Outcome, RecordType,
    ReputationScore, Tier, TrustLedger, classify, verify_chain, verify_ledger_file,
)

__all__ = [
    'AgentIdentity',
    'AgentKey',
    'IdentityRegistry',
    'jws_compact',
    'verify_jws',
    'inclusion_proof',
    'merkle_root',
    'verify_inclusion',
    'AUTHORITY_ID',
    'LedgerConfig',
    'LedgerRecord',
    'LedgerRef',
    'Outcome',
    'RecordType',
    'ReputationScore',
    'Tier',
    'TrustLedger',
    'classify',
    'verify_chain',
    'verify_ledger_file',
]
