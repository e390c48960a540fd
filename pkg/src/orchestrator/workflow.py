"""
工作流定义

节点是能力需求加请求模板，边是依赖关系。请求模板里的 ${nodeId.path}
引用上游节点的输出，${inputs.key} 引用工作流输入。
"""
import copy
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Set, Tuple

from src.core.errors import (
    CycleDetected, DanglingPlaceholder, InvalidWorkflow, MalformedQuery, OrphanEdge,
)
from src.discovery.aidl import CapabilityNeed
from src.utils import load_json

PLACEHOLDER_RE = re.compile(r"\$\{([A-Za-z0-9_\-]+)((?:\.[A-Za-z0-9_\-]+)*)\}")
INPUTS = "inputs"

_MISSING = object()


class NodeState(str, Enum):
    PENDING = "Pending"
    READY = "Ready"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    COMPENSATED = "Compensated"
    SKIPPED = "Skipped"


TERMINAL_STATES = frozenset({NodeState.SUCCEEDED, NodeState.FAILED, NodeState.COMPENSATED, NodeState.SKIPPED})


@dataclass(frozen=True)
class WorkflowNode:
    node_id: str
    need: CapabilityNeed
    operation: str
    request_template: Any = field(default_factory=dict)
    compensation_operation: Optional[str] = None
    max_retries: int = 0
    high_value: bool = False
    transaction_type: Optional[str] = None
    ledger_parameters: Any = None

    @classmethod
    def from_doc(cls, node_id: str, doc: Dict[str, Any]) -> "WorkflowNode":
        try:
            need = CapabilityNeed.from_doc(doc["need"])
            max_retries = int(doc.get("maxRetries", 0))
        except KeyError as e:
            raise InvalidWorkflow(f"节点 {node_id} 缺少字段: {e.args[0]}", nodeId=node_id)
        except (MalformedQuery, TypeError, ValueError) as e:
            raise InvalidWorkflow(f"节点 {node_id} 定义非法: {e}", nodeId=node_id)
        if max_retries < 0:
            raise InvalidWorkflow(f"节点 {node_id} 的 maxRetries 不能为负", nodeId=node_id)
        return cls(
            node_id=node_id,
            need=need,
            operation=str(doc.get("operation", "")) or need.functionality,
            request_template=copy.deepcopy(doc.get("requestTemplate", {})),
            compensation_operation=doc.get("compensationOperation"),
            max_retries=max_retries,
            high_value=bool(doc.get("highValue", False)),
            transaction_type=doc.get("transactionType"),
            ledger_parameters=copy.deepcopy(doc.get("ledgerParameters")),
        )

    def to_doc(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {
            "need": self.need.to_doc(),
            "operation": self.operation,
            "requestTemplate": copy.deepcopy(self.request_template),
            "maxRetries": self.max_retries,
            "highValue": self.high_value,
        }
        for key, value in (("compensationOperation", self.compensation_operation),
                           ("transactionType", self.transaction_type),
                           ("ledgerParameters", self.ledger_parameters)):
            if value is not None:
                doc[key] = copy.deepcopy(value)
        return doc


@dataclass(frozen=True)
class BudgetConstraint:
    limit: float
    currency: str
    cost_path: str

    def __post_init__(self):
        if self.limit < 0:
            raise InvalidWorkflow(f"预算上限不能为负: {self.limit}")

    def cost_of(self, request: Any) -> float:
        """请求中 costPath 处的金额，缺失时为 0"""
        value = lookup_path(request, self.cost_path)
        if value is _MISSING or value is None:
            return 0.0
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidWorkflow(f"{self.cost_path} 处的金额不是数值: {value!r}", costPath=self.cost_path)
        return float(value)


@dataclass
class WorkflowSpec:
    workflow_id: str
    nodes: Dict[str, WorkflowNode]
    edges: List[Tuple[str, str]] = field(default_factory=list)
    budget: Optional[BudgetConstraint] = None
    inputs: Dict[str, Any] = field(default_factory=dict)
    translations: Dict[str, Dict[str, str]] = field(default_factory=dict)

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "WorkflowSpec":
        if not isinstance(doc, dict) or "workflowId" not in doc or not isinstance(doc.get("nodes"), dict):
            raise InvalidWorkflow("工作流需要 workflowId 和 nodes 对象")
        nodes = {node_id: WorkflowNode.from_doc(node_id, node) for node_id, node in doc["nodes"].items()}
        try:
            edges = [(str(a), str(b)) for a, b in doc.get("edges", [])]
        except (TypeError, ValueError):
            raise InvalidWorkflow("edges 必须是 [from, to] 对的数组")
        budget = None
        if doc.get("budgetConstraint") is not None:
            b = doc["budgetConstraint"]
            try:
                budget = BudgetConstraint(float(b["limit"]), str(b.get("currency", "USD")), str(b["costPath"]))
            except (KeyError, TypeError, ValueError) as e:
                raise InvalidWorkflow(f"budgetConstraint 格式错误: {e}")
        return cls(str(doc["workflowId"]), nodes, edges, budget,
                   copy.deepcopy(doc.get("inputs", {})), copy.deepcopy(doc.get("translations", {})))

    @classmethod
    def load(cls, path: str) -> "WorkflowSpec":
        return cls.from_doc(load_json(path))

    def to_doc(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {
            "workflowId": self.workflow_id,
            "nodes": {k: n.to_doc() for k, n in sorted(self.nodes.items())},
            "edges": [list(e) for e in self.edges],
            "inputs": copy.deepcopy(self.inputs),
        }
        if self.budget is not None:
            doc["budgetConstraint"] = {"limit": self.budget.limit, "currency": self.budget.currency,
                                       "costPath": self.budget.cost_path}
        if self.translations:
            doc["translations"] = copy.deepcopy(self.translations)
        return doc

    def dependencies(self, node_id: str) -> List[str]:
        return sorted(a for a, b in self.edges if b == node_id)

    def ancestors(self, node_id: str) -> Set[str]:
        found: Set[str] = set()
        stack = self.dependencies(node_id)
        while stack:
            current = stack.pop()
            if current not in found:
                found.add(current)
                stack.extend(self.dependencies(current))
        return found

    def descendants(self, node_id: str) -> Set[str]:
        found: Set[str] = set()
        stack = [b for a, b in self.edges if a == node_id]
        while stack:
            current = stack.pop()
            if current not in found:
                found.add(current)
                stack.extend(b for a, b in self.edges if a == current)
        return found


# ---------------------------------------------------------------------------
# 占位符
# ---------------------------------------------------------------------------

def lookup_path(doc: Any, path: str) -> Any:
    """按点号路径取值，列表段用数字下标；取不到时返回内部哨兵"""
    node = doc
    for key in [k for k in path.split(".") if k]:
        if isinstance(node, dict) and key in node:
            node = node[key]
        elif isinstance(node, list) and key.isdigit() and int(key) < len(node):
            node = node[int(key)]
        else:
            return _MISSING
    return node


def placeholders(template: Any) -> List[Tuple[str, str]]:
    """模板中引用的 (来源, 路径) 列表"""
    found: List[Tuple[str, str]] = []
    if isinstance(template, str):
        found.extend((m.group(1), m.group(2).lstrip(".")) for m in PLACEHOLDER_RE.finditer(template))
    elif isinstance(template, dict):
        for value in template.values():
            found.extend(placeholders(value))
    elif isinstance(template, list):
        for value in template:
            found.extend(placeholders(value))
    return found


def resolve_template(template: Any, bindings: Mapping[str, Any], inputs: Mapping[str, Any]) -> Any:
    """
    展开请求模板

    整个字符串就是一个占位符时保留被引用值的类型；嵌在文本中时按字符串拼接。
    """

    def fetch(source: str, path: str) -> Any:
        root = inputs if source == INPUTS else bindings.get(source, _MISSING)
        value = _MISSING if root is _MISSING else lookup_path(root, path)
        if value is _MISSING:
            raise DanglingPlaceholder(f"占位符 ${{{source}.{path}}} 无法解析", source=source, path=path)
        return value

    if isinstance(template, str):
        whole = PLACEHOLDER_RE.fullmatch(template)
        if whole:
            return copy.deepcopy(fetch(whole.group(1), whole.group(2).lstrip(".")))
        return PLACEHOLDER_RE.sub(lambda m: str(fetch(m.group(1), m.group(2).lstrip("."))), template)
    if isinstance(template, dict):
        return {k: resolve_template(v, bindings, inputs) for k, v in template.items()}
    if isinstance(template, list):
        return [resolve_template(v, bindings, inputs) for v in template]
    return copy.deepcopy(template)


# ---------------------------------------------------------------------------
# 校验与分层
# ---------------------------------------------------------------------------

def _find_cycle(spec: WorkflowSpec) -> Optional[List[str]]:
    children: Dict[str, List[str]] = {n: [] for n in spec.nodes}
    for a, b in spec.edges:
        children[a].append(b)
    state: Dict[str, int] = {}
    stack: List[str] = []

    def visit(node: str) -> Optional[List[str]]:
        state[node] = 1
        stack.append(node)
        for child in sorted(children[node]):
            if state.get(child) == 1:
                return stack[stack.index(child):]
            if child not in state:
                cycle = visit(child)
                if cycle:
                    return cycle
        stack.pop()
        state[node] = 2
        return None

    for node in sorted(spec.nodes):
        if node not in state:
            cycle = visit(node)
            if cycle:
                return cycle
    return None


def validate(spec: WorkflowSpec) -> Dict[str, Any]:
    """确认无悬空边、无环、所有占位符都指向祖先节点或工作流输入"""
    if not spec.nodes:
        raise InvalidWorkflow(f"工作流 {spec.workflow_id} 没有节点")
    for a, b in spec.edges:
        missing = [n for n in (a, b) if n not in spec.nodes]
        if missing:
            raise OrphanEdge(f"边 {a}→{b} 引用了不存在的节点 {', '.join(missing)}", edge=[a, b])
    cycle = _find_cycle(spec)
    if cycle:
        raise CycleDetected(f"工作流存在环: {' → '.join(cycle + [cycle[0]])}", cycle=cycle)
    for node_id, node in sorted(spec.nodes.items()):
        ancestors = spec.ancestors(node_id)
        for source, path in placeholders(node.request_template):
            if source == INPUTS:
                if lookup_path(spec.inputs, path) is _MISSING:
                    raise DanglingPlaceholder(f"节点 {node_id} 引用了不存在的输入 {path}",
                                              nodeId=node_id, source=source, path=path)
            elif source not in ancestors:
                raise DanglingPlaceholder(f"节点 {node_id} 引用了非祖先节点 {source}",
                                          nodeId=node_id, source=source, path=path)
        for source, path in placeholders(node.ledger_parameters):
            if source != INPUTS and source != node_id and source not in ancestors:
                raise DanglingPlaceholder(f"节点 {node_id} 的账本参数引用了非祖先节点 {source}",
                                          nodeId=node_id, source=source, path=path)
    return {"workflowId": spec.workflow_id, "nodes": len(spec.nodes), "edges": len(spec.edges), "valid": True}


def plan_parallel(spec: WorkflowSpec) -> List[List[str]]:
    """按最长依赖路径分层，同层节点互不依赖"""
    level: Dict[str, int] = {}

    def depth(node: str) -> int:
        if node not in level:
            deps = spec.dependencies(node)
            level[node] = 1 + max(depth(d) for d in deps) if deps else 0
        return level[node]

    for node in spec.nodes:
        depth(node)
    waves: List[List[str]] = [[] for _ in range(max(level.values()) + 1)] if level else []
    for node, k in level.items():
        waves[k].append(node)
    return [sorted(wave) for wave in waves]


def topological_order(spec: WorkflowSpec) -> List[str]:
    return [node for wave in plan_parallel(spec) for node in wave]
