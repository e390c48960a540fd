"""
能力发现：本体图、AIDL 声明、匹配打分与能力注册表。
"""

from .ontology import OntologyGraph
from .aidl import CapabilityNeed, CapabilityRecord, humanize_capability, parse_aidl
from .scoring import (
    ConstraintPlan, ConstraintVerdict, MatchResult, OntoMatch, SynthesisWeights,
    constraint_check, onto_score, vec_score,
)
from .capability_registry import (
    QUERY_TOPIC, REGISTRY_ID, CapabilityRegistry, DiscoveryConfig, matches_to_listing,
)

__all__ = [
    'OntologyGraph',
    'CapabilityNeed',
    'CapabilityRecord',
    'humanize_capability',
    'parse_aidl',
    'ConstraintPlan',
    'ConstraintVerdict',
    'MatchResult',
    'OntoMatch',
    'SynthesisWeights',
    'constraint_check',
    'onto_score',
    'vec_score',
    'QUERY_TOPIC',
    'REGISTRY_ID',
    'CapabilityRegistry',
    'DiscoveryConfig',
    'matches_to_listing',
]
