"""
跨域编排：工作流定义、分层并行执行与失败恢复。
"""

from .workflow import (
    BudgetConstraint, NodeState, WorkflowNode, WorkflowSpec,
    plan_parallel, resolve_template, topological_order, validate,
)
from .executor import ExecutionState, OrchestratorConfig, RecoveryAction, WorkflowExecutor

__all__ = [
    'BudgetConstraint',
    'NodeState',
    'WorkflowNode',
    'WorkflowSpec',
    'plan_parallel',
    'resolve_template',
    'topological_order',
    'validate',
    'ExecutionState',
    'OrchestratorConfig',
    'RecoveryAction',
    'WorkflowExecutor',
]
