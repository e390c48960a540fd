"""
场景回放：脚本化智能体与确定性的端到端驱动。
"""

from .scripted_agent import FAULT_MODES, Behavior, ScriptedAgent
from .harness import ScenarioRunner, ScenarioSpec, evaluate_assertions, report_bytes, run_scenario

__all__ = [
    'FAULT_MODES',
    'Behavior',
    'ScriptedAgent',
    'ScenarioRunner',
    'ScenarioSpec',
    'evaluate_assertions',
    'report_bytes',
    'run_scenario',
]
