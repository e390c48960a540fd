"""
工作流执行与失败恢复

每一层（wave）内的节点按轮次推进：协调者在一轮开始时统一盖时间戳并签名请求，
用线程池并发经总线发出，再按 nodeId 顺序串行应用结果。失败按
重试 → 替换候选 → 回滚 的顺序逐级升级。
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import timedelta
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from src.broker.umb_broker import UMBBroker, capability_topic
from src.core.clock import SimulatedClock
from src.core.errors import (
    AgentFault, BudgetExceeded, CompensationFailed, ModxError, NoCapableAgent, RequestTimeout,
)
from src.core.model import MessageEnvelope, MessageType, envelope_digest, format_instant
from src.discovery.capability_registry import CapabilityRegistry
from src.discovery.scoring import ConstraintPlan, MatchResult
from src.orchestrator.workflow import (
    NodeState, WorkflowNode, WorkflowSpec, plan_parallel, resolve_template, topological_order, validate,
)
from src.state.context_state import ContextStore
from src.translation.constraints import filter_results, rewrite_for_constraint
from src.translation.translator import ConceptMapTable, translate
from src.trust.identity import AgentKey, jws_compact
from src.trust.ledger import Outcome
from src.utils import EventLog

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OrchestratorConfig:
    max_workers: int = 4
    substitute_depth: int = 2               # 最多尝试几个排名靠后的候选
    retry_backoff: float = 1.0              # 重试前推进的秒数
    fresh_retries_on_substitute: bool = True

    def __post_init__(self):
        if self.max_workers < 1:
            raise ValueError(f"maxWorkers 必须 ≥ 1: {self.max_workers}")
        if self.substitute_depth < 0 or self.retry_backoff < 0:
            raise ValueError("substituteDepth 和 retryBackoff 不能为负")

    @classmethod
    def from_dict(cls, params: Mapping[str, Any]) -> "OrchestratorConfig":
        return cls(
            max_workers=int(params.get("maxWorkers", 4)),
            substitute_depth=int(params.get("substituteDepth", 2)),
            retry_backoff=float(params.get("retryBackoff", 1.0)),
            fresh_retries_on_substitute=bool(params.get("freshRetriesOnSubstitute", True)),
        )


class RecoveryAction(str, Enum):
    RETRY = "Retry"
    SUBSTITUTE = "Substitute"
    ROLLBACK = "Rollback"


@dataclass
class ExecutionState:
    workflow_id: str
    node_states: Dict[str, NodeState]
    attempts: Dict[str, int]
    bindings: Dict[str, Any] = field(default_factory=dict)
    bound_agent: Dict[str, Tuple[str, str]] = field(default_factory=dict)
    failures: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    status: str = "Running"
    spent: float = 0.0
    dispatch_log: List[Dict[str, Any]] = field(default_factory=list)
    recovery_log: List[Dict[str, Any]] = field(default_factory=list)
    compensations: List[str] = field(default_factory=list)
    transactions: List[List[int]] = field(default_factory=list)

    @classmethod
    def start(cls, spec: WorkflowSpec) -> "ExecutionState":
        return cls(spec.workflow_id,
                   {n: NodeState.PENDING for n in spec.nodes},
                   {n: 0 for n in spec.nodes})

    def to_doc(self) -> Dict[str, Any]:
        return {
            "workflowId": self.workflow_id,
            "status": self.status,
            "nodeStates": {k: v.value for k, v in sorted(self.node_states.items())},
            "attempts": dict(sorted(self.attempts.items())),
            "bindings": {k: self.bindings[k] for k in sorted(self.bindings)},
            "boundAgent": {k: list(v) for k, v in sorted(self.bound_agent.items())},
            "failures": {k: self.failures[k] for k in sorted(self.failures)},
            "spent": self.spent,
            "dispatchLog": list(self.dispatch_log),
            "recoveryLog": list(self.recovery_log),
            "compensations": list(self.compensations),
            "transactions": list(self.transactions),
        }


@dataclass
class _NodeRun:
    node: WorkflowNode
    candidates: List[MatchResult]
    base_request: Any
    index: int = 0
    retries: int = 0

    @property
    def candidate(self) -> MatchResult:
        return self.candidates[self.index]


@dataclass
class _Dispatch:
    node_id: str
    run: _NodeRun
    envelope: MessageEnvelope
    cost: float


class WorkflowExecutor:

    def __init__(self, registry: CapabilityRegistry, broker: UMBBroker, coordinator_key: AgentKey,
                 config: Optional[OrchestratorConfig] = None,
                 tables: Optional[Mapping[str, ConceptMapTable]] = None,
                 contexts: Optional[ContextStore] = None,
                 event_log: Optional[EventLog] = None):
        self.registry = registry
        self.broker = broker
        self.trust = broker.trust
        self.clock = broker.clock
        self.key = coordinator_key
        self.config = config or OrchestratorConfig()
        self.tables: Dict[str, ConceptMapTable] = dict(tables or {})
        self.contexts = contexts
        self.event_log = event_log or EventLog()

    # ---- 事件 ----
    def _emit(self, event: str, state: ExecutionState, **fields) -> None:
        self.event_log.emit(event, at=format_instant(self.clock.now()), workflowId=state.workflow_id, **fields)

    def _set(self, state: ExecutionState, node_id: str, new_state: NodeState, **fields) -> None:
        state.node_states[node_id] = new_state
        self._emit(f"node.{new_state.value.lower()}", state, nodeId=node_id, **fields)

    # ---- 入口 ----
    def execute(self, spec: WorkflowSpec) -> ExecutionState:
        """执行到终态；NoCapableAgent、BudgetExceeded 等失败记录在状态里而不是抛出"""
        validate(spec)
        state = ExecutionState.start(spec)
        waves = plan_parallel(spec)
        logger.info(f"工作流 {spec.workflow_id} 开始执行: {len(spec.nodes)} 个节点，{len(waves)} 层")
        self._emit("workflow.started", state, waves=waves)

        for wave in waves:
            runs: Dict[str, _NodeRun] = {}
            for node_id in wave:
                if state.status == "Failed":
                    self._set(state, node_id, NodeState.SKIPPED, reason="workflow-failed")
                    continue
                blocked = [d for d in spec.dependencies(node_id) if state.node_states[d] is not NodeState.SUCCEEDED]
                if blocked:
                    self._set(state, node_id, NodeState.SKIPPED, reason="dependency", blockedBy=blocked)
                    continue
                run = self._prepare(spec, state, node_id)
                if run is not None:
                    runs[node_id] = run
            if state.status == "Failed":
                for node_id in sorted(runs):
                    self._set(state, node_id, NodeState.SKIPPED, reason="workflow-failed")
            elif runs:
                self._run_wave(spec, state, runs)

        if state.status != "Failed":
            state.status = "Succeeded"
        if self.contexts is not None:
            expired = self.contexts.complete_task(spec.workflow_id)
            if expired:
                self._emit("contexts.expired", state, contexts=expired)
        self.trust.tick(force=True)
        self._emit(f"workflow.{state.status.lower()}", state, spent=state.spent)
        logger.info(f"工作流 {spec.workflow_id} 结束: {state.status}，花费 {state.spent}")
        return state

    # ---- 准备 ----
    def _prepare(self, spec: WorkflowSpec, state: ExecutionState, node_id: str) -> Optional[_NodeRun]:
        node = spec.nodes[node_id]
        self._set(state, node_id, NodeState.READY)
        try:
            candidates = self.registry.discover(node.need)
            if not candidates:
                raise NoCapableAgent(f"没有智能体能满足节点 {node_id}: {node.need.functionality!r}", nodeId=node_id)
            base_request = resolve_template(node.request_template, state.bindings, spec.inputs)
        except ModxError as e:
            self._terminal_failure(spec, state, node_id, e)
            return None
        self._emit("node.candidates", state, nodeId=node_id,
                   candidates=[[m.agent_id, m.capability, round(m.score, 6)] for m in candidates])
        return _NodeRun(node, candidates, base_request)

    def _request_for(self, spec: WorkflowSpec, run: _NodeRun) -> Any:
        """按当前候选注入约束参数，再套用该智能体的请求翻译表"""
        match = run.candidate
        request = run.base_request
        record = self.registry.get(match.agent_id, match.capability)
        if record is not None:
            for verdict in self.registry.verdicts(run.node.need, record):
                if verdict.plan is ConstraintPlan.SEMANTIC_TRANSLATION:
                    request = rewrite_for_constraint(request, verdict.rewrite)
        table = self._table(spec, match.agent_id, "request")
        return translate(request, table) if table is not None else request

    def _table(self, spec: WorkflowSpec, agent_id: str, direction: str) -> Optional[ConceptMapTable]:
        name = spec.translations.get(agent_id, {}).get(direction)
        if name is None:
            return None
        table = self.tables.get(name)
        if table is None:
            logger.warning(f"找不到概念映射表 {name}，{agent_id} 的{direction}不做翻译")
        return table

    # ---- 轮次 ----
    def _run_wave(self, spec: WorkflowSpec, state: ExecutionState, active: Dict[str, _NodeRun]) -> None:
        while active:
            admitted: List[Tuple[str, Any, float]] = []
            reserved = 0.0
            for node_id in sorted(active):
                run = active[node_id]
                try:
                    request = self._request_for(spec, run)
                    cost = spec.budget.cost_of(request) if spec.budget else 0.0
                    if spec.budget and state.spent + reserved + cost > spec.budget.limit:
                        raise BudgetExceeded(
                            f"节点 {node_id} 花费 {cost} 会使总额超过 {spec.budget.limit} {spec.budget.currency}",
                            nodeId=node_id, cost=cost, spent=state.spent + reserved, limit=spec.budget.limit)
                except ModxError as e:
                    del active[node_id]
                    self._terminal_failure(spec, state, node_id, e)
                    break
                reserved += cost
                admitted.append((node_id, request, cost))
            # 准入失败时本轮其余节点都不发出
            if state.status == "Failed":
                for node_id in sorted(active):
                    self._set(state, node_id, NodeState.SKIPPED, reason="workflow-failed")
                active.clear()
                return
            batch = []
            for node_id, request, cost in admitted:
                run = active[node_id]
                batch.append(_Dispatch(node_id, run, self._stamp(spec, state, node_id, run, request), cost))

            outcomes = self._dispatch(batch)
            self._advance_clock(batch, outcomes)

            needs_backoff = False
            for item, outcome in zip(batch, outcomes):
                if isinstance(outcome, MessageEnvelope) and outcome.message_type is not MessageType.ERROR:
                    try:
                        self._succeed(spec, state, item, outcome)
                        del active[item.node_id]
                        continue
                    except ModxError as e:
                        outcome = e
                failure = outcome if isinstance(outcome, ModxError) else AgentFault(
                    f"{item.run.candidate.agent_id} 返回错误", response=outcome.payload)
                self._report(item.run.candidate.agent_id, Outcome.FAILURE, outcome, item.envelope)
                action = self.recover(spec, state, item.node_id, item.run, failure)
                if action is RecoveryAction.ROLLBACK:
                    del active[item.node_id]
                elif action is RecoveryAction.RETRY:
                    needs_backoff = True

            self.trust.tick()
            if state.status == "Failed":
                for node_id in sorted(active):
                    self._set(state, node_id, NodeState.SKIPPED, reason="workflow-failed")
                active.clear()
            elif needs_backoff and isinstance(self.clock, SimulatedClock):
                self.clock.advance(self.config.retry_backoff)

    def _stamp(self, spec: WorkflowSpec, state: ExecutionState, node_id: str, run: _NodeRun,
               request: Any) -> MessageEnvelope:
        state.attempts[node_id] += 1
        attempt = state.attempts[node_id]
        match = run.candidate
        correlation = f"{spec.workflow_id}:{node_id}:{attempt}"
        env = MessageEnvelope(
            message_id=correlation,
            message_type=MessageType.REQUEST,
            topic=capability_topic(match.agent_id, match.capability),
            sender=self.key.agent_id,
            timestamp=self.clock.now(),
            payload={"operation": run.node.operation, "parameters": request},
            correlation_id=correlation,
        )
        cost = spec.budget.cost_of(request) if spec.budget else 0.0
        state.dispatch_log.append({"at": format_instant(env.timestamp), "nodeId": node_id,
                                   "agentId": match.agent_id, "attempt": attempt, "cost": cost})
        self._set(state, node_id, NodeState.RUNNING, agentId=match.agent_id, attempt=attempt)
        return self.key.sign_envelope(env)

    def _dispatch(self, batch: List[_Dispatch]) -> List[Union[MessageEnvelope, ModxError]]:

        def call(item: _Dispatch) -> Union[MessageEnvelope, ModxError]:
            try:
                return self.broker.route_request(item.envelope)
            except ModxError as e:
                return e

        if not batch:
            return []
        with ThreadPoolExecutor(max_workers=min(self.config.max_workers, len(batch))) as executor:
            return list(executor.map(call, batch))

    def _advance_clock(self, batch: List[_Dispatch], outcomes: List[Any]) -> None:
        if not isinstance(self.clock, SimulatedClock):
            return
        deadline = timedelta(seconds=self.broker.config.request_deadline)
        for item, outcome in zip(batch, outcomes):
            if isinstance(outcome, MessageEnvelope):
                self.clock.advance_to(outcome.timestamp)
            elif isinstance(outcome, RequestTimeout):
                self.clock.advance_to(item.envelope.timestamp + deadline)

    # ---- 结果 ----
    def _succeed(self, spec: WorkflowSpec, state: ExecutionState, item: _Dispatch,
                 response: MessageEnvelope) -> None:
        match = item.run.candidate
        output = response.payload
        table = self._table(spec, match.agent_id, "response")
        if table is not None:
            output = translate(output, table)
        record = self.registry.get(match.agent_id, match.capability)
        if record is not None and isinstance(output, dict) and isinstance(output.get("results"), list):
            for verdict in self.registry.verdicts(item.run.node.need, record):
                if verdict.plan is ConstraintPlan.POST_FILTER:
                    output = {**output, "results": filter_results(output["results"], verdict.rewrite)}

        # 交易先入账；账本参数解析失败时节点状态、花费和绑定都保持不变
        if item.run.node.high_value:
            self._record_transaction(spec, state, item, response, {**state.bindings, item.node_id: output})

        state.bindings[item.node_id] = output
        state.bound_agent[item.node_id] = (match.agent_id, match.capability)
        state.spent += item.cost
        self._set(state, item.node_id, NodeState.SUCCEEDED, agentId=match.agent_id,
                  attempt=state.attempts[item.node_id], cost=item.cost)
        self._report(match.agent_id, Outcome.SUCCESS, response, response)

    def _record_transaction(self, spec: WorkflowSpec, state: ExecutionState, item: _Dispatch,
                            response: MessageEnvelope, bindings: Dict[str, Any]) -> None:
        node = item.run.node
        body = {
            "transactionType": node.transaction_type or node.operation,
            "agentId": item.run.candidate.agent_id,
            "requestorId": self.key.agent_id,
            "timestamp": format_instant(response.timestamp),
            "actionParameters": resolve_template(node.ledger_parameters or {}, bindings, spec.inputs),
            "verificationStatus": "approved",
        }
        body["securityToken"] = jws_compact(dict(body), self.key)
        ref, _ = self.trust.record_transaction(body, self.key)
        state.transactions.append(ref.to_doc())
        self._emit("ledger.transaction", state, nodeId=item.node_id, ledger=ref.to_doc())

    def _report(self, agent_id: str, outcome: Outcome, result: Any, fallback: MessageEnvelope) -> None:
        """以总线上实际出现过的信封为证据更新信誉"""
        evidence_env = result if isinstance(result, MessageEnvelope) else fallback
        digest = envelope_digest(evidence_env)
        if not self.trust.envelope_known(digest):
            logger.debug(f"{agent_id} 的结果没有可锚定的证据，跳过信誉更新")
            return
        try:
            self.trust.update_reputation(agent_id, outcome, {"envelope": digest.hex()}, reporter=self.key)
        except ModxError as e:
            logger.warning(f"更新 {agent_id} 的信誉失败: {e}")

    # ---- 恢复 ----
    def recover(self, spec: WorkflowSpec, state: ExecutionState, node_id: str, run: _NodeRun,
                failure: ModxError) -> RecoveryAction:
        """重试同一智能体 → 换下一名候选 → 回滚已成功的祖先节点"""
        agent_id = run.candidate.agent_id
        state.failures[node_id] = failure.to_doc()
        logger.warning(f"节点 {node_id} 在 {agent_id} 上失败: {failure}")
        if run.retries < run.node.max_retries:
            run.retries += 1
            action = RecoveryAction.RETRY
        elif run.index < min(self.config.substitute_depth, len(run.candidates) - 1):
            run.index += 1
            if self.config.fresh_retries_on_substitute:
                run.retries = 0
            action = RecoveryAction.SUBSTITUTE
        else:
            action = RecoveryAction.ROLLBACK
        entry = {"nodeId": node_id, "action": action.value, "agentId": agent_id, "error": failure.code}
        if action is RecoveryAction.SUBSTITUTE:
            entry["substitute"] = run.candidate.agent_id
        state.recovery_log.append(entry)
        self._emit("node.recovery", state, **entry)
        if action is RecoveryAction.ROLLBACK:
            self._terminal_failure(spec, state, node_id, failure)
        return action

    def _terminal_failure(self, spec: WorkflowSpec, state: ExecutionState, node_id: str, failure: ModxError) -> None:
        state.failures[node_id] = failure.to_doc()
        self._set(state, node_id, NodeState.FAILED, error=failure.code)
        state.status = "Failed"
        self.rollback(spec, state, node_id)

    def rollback(self, spec: WorkflowSpec, state: ExecutionState, failed_node: str) -> List[str]:
        """按逆拓扑序补偿失败节点所有已成功的祖先；补偿失败只记录，不中断"""
        ancestors = spec.ancestors(failed_node)
        order = [n for n in reversed(topological_order(spec))
                 if n in ancestors and state.node_states[n] is NodeState.SUCCEEDED]
        compensated = []
        for node_id in order:
            node = spec.nodes[node_id]
            if not node.compensation_operation:
                logger.warning(f"节点 {node_id} 没有补偿操作，回滚时跳过")
                self._emit("compensation.skipped", state, nodeId=node_id)
                continue
            state.compensations.append(node_id)
            try:
                self._compensate(spec, state, node_id, node)
            except ModxError as e:
                error = CompensationFailed(f"节点 {node_id} 补偿失败: {e}", nodeId=node_id, cause=e.code)
                logger.warning(str(error))
                state.failures[f"{node_id}:compensation"] = error.to_doc()
                self._emit("compensation.failed", state, nodeId=node_id, error=e.code)
                self._ledger_compensation(state, node_id, "failed")
                continue
            self._set(state, node_id, NodeState.COMPENSATED)
            self._ledger_compensation(state, node_id, "approved")
            compensated.append(node_id)
        return compensated

    def _compensate(self, spec: WorkflowSpec, state: ExecutionState, node_id: str, node: WorkflowNode) -> None:
        agent_id, capability = state.bound_agent[node_id]
        correlation = f"{spec.workflow_id}:{node_id}:compensate"
        env = self.key.sign_envelope(MessageEnvelope(
            message_id=correlation,
            message_type=MessageType.REQUEST,
            topic=capability_topic(agent_id, capability),
            sender=self.key.agent_id,
            timestamp=self.clock.now(),
            payload={"operation": node.compensation_operation,
                     "parameters": {"original": state.bindings.get(node_id)}},
            correlation_id=correlation,
        ))
        self._emit("compensation.dispatched", state, nodeId=node_id, agentId=agent_id,
                   operation=node.compensation_operation)
        response = self.broker.route_request(env)
        if isinstance(self.clock, SimulatedClock):
            self.clock.advance_to(response.timestamp)
        if response.message_type is MessageType.ERROR:
            raise AgentFault(f"{agent_id} 拒绝了补偿请求", response=response.payload)

    def _ledger_compensation(self, state: ExecutionState, node_id: str, status: str) -> None:
        agent_id, _ = state.bound_agent[node_id]
        body = {
            "transactionType": "compensation",
            "agentId": agent_id,
            "requestorId": self.key.agent_id,
            "timestamp": format_instant(self.clock.now()),
            "actionParameters": {"workflowId": state.workflow_id, "nodeId": node_id},
            "verificationStatus": status,
        }
        ref, _ = self.trust.record_transaction(body, self.key)
        state.transactions.append(ref.to_doc())
