"""
翻译层：确定性嵌入、嵌入空间对齐、概念映射翻译与约束改写。
"""

from .embedder import HashingEmbedder, load_synonym_groups, tokenize
from .alignment import AlignmentMap, align, fit_alignment, load_alignment
from .translator import ConceptEntry, ConceptMapTable, merge_documents, translate
from .constraints import (
    ConstraintCatalog, ConstraintRewrite, Predicate, filter_results, rewrite_for_constraint,
)

__all__ = [
    'HashingEmbedder',
    'load_synonym_groups',
    'tokenize',
    'AlignmentMap',
    'align',
    'fit_alignment',
    'load_alignment',
    'ConceptEntry',
    'ConceptMapTable',
    'merge_documents',
    'translate',
    'ConstraintCatalog',
    'ConstraintRewrite',
    'Predicate',
    'filter_results',
    'rewrite_for_constraint',
]
