"""
场景回放

在模拟时钟上启动总线、信任层、注册表、上下文服务和脚本化智能体，
依次执行：身份与能力登记 → 能力查询 → 上下文共享 → 工作流执行 → 报告汇总。
同一场景、同一种子、同一变体得到逐字节相同的报告。
"""
import copy
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

from src.broker.umb_broker import BrokerConfig, UMBBroker
from src.core.clock import SimulatedClock
from src.core.errors import ModxError, ScenarioError
from src.core.model import MessageEnvelope, MessageType, Topic, canonicalize, format_instant
from src.discovery.aidl import CapabilityNeed
from src.discovery.capability_registry import QUERY_TOPIC, CapabilityRegistry, DiscoveryConfig
from src.discovery.ontology import OntologyGraph
from src.orchestrator.executor import ExecutionState, OrchestratorConfig, WorkflowExecutor
from src.orchestrator.workflow import WorkflowSpec, lookup_path
from src.scenario.scripted_agent import ScriptedAgent
from src.state.context_state import CONTEXT_SERVICE_ID, STATE_TOPIC, ContextService, ContextStore
from src.translation.alignment import load_alignment
from src.translation.constraints import ConstraintCatalog
from src.translation.embedder import HashingEmbedder
from src.translation.translator import ConceptMapTable
from src.trust.identity import AgentKey
from src.trust.ledger import LedgerConfig, RecordType, TrustLedger
from src.utils import EventLog, dump_json, load_json

logger = logging.getLogger(__name__)


def _merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class ScenarioSpec:
    """场景文件；其中的相对路径都相对场景文件所在目录"""

    name: str
    base_dir: str
    doc: Dict[str, Any]
    variants: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str) -> "ScenarioSpec":
        doc = load_json(path)
        if not isinstance(doc, dict) or "workflow" not in doc:
            raise ScenarioError(f"场景文件缺少 workflow: {path}")
        return cls(str(doc.get("name", os.path.basename(path))), os.path.dirname(os.path.abspath(path)),
                   doc, dict(doc.get("variants", {})))

    def path(self, ref: str) -> str:
        return ref if os.path.isabs(ref) else os.path.join(self.base_dir, ref)

    def section(self, key: str, default: Any = None) -> Any:
        return copy.deepcopy(self.doc.get(key, default))

    def variant(self, name: Optional[str]) -> Dict[str, Any]:
        if name is None:
            return {}
        if name not in self.variants:
            raise ScenarioError(f"场景 {self.name} 没有变体 {name}，可选: {', '.join(sorted(self.variants))}")
        return copy.deepcopy(self.variants[name])


class ScenarioRunner:

    def __init__(self, spec: ScenarioSpec, seed: int = 7, variant: Optional[str] = None,
                 trace_path: Optional[str] = None):
        self.spec = spec
        self.seed = seed
        self.variant_name = variant
        self.variant = spec.variant(variant)
        self.events = EventLog(trace_path)
        config = spec.section("config", {})
        self.clock = SimulatedClock(spec.doc.get("clockStart", "2025-05-17T09:42:17Z"))
        self.trust = TrustLedger(self.clock, LedgerConfig.from_dict(config.get("ledger", {})), key_seed=seed)
        self.broker = UMBBroker(self.trust, self.clock, BrokerConfig.from_dict(config.get("broker", {})))
        self.keys: Dict[str, AgentKey] = {}
        self.agents: Dict[str, ScriptedAgent] = {}

    # ---- 步骤 ----
    def _step(self, name: str, func: Callable[[], Any]) -> Any:
        try:
            return func()
        except ModxError as e:
            raise ScenarioError(f"场景步骤 {name} 失败: {e}", step=name, cause=e.code)

    def _build_registry(self) -> CapabilityRegistry:
        config = self.spec.section("config", {})
        synonyms = load_json(self.spec.path(self.spec.doc["synonyms"])) if "synonyms" in self.spec.doc else None
        embedder = HashingEmbedder.from_config(config.get("embedder", {}), synonyms)
        ontology = OntologyGraph.load(self.spec.path(self.spec.doc["ontology"]))
        catalog = ConstraintCatalog.load(self.spec.path(self.spec.doc["constraintCatalog"])) \
            if "constraintCatalog" in self.spec.doc else ConstraintCatalog()
        registry = CapabilityRegistry(embedder.dimension, embedder, ontology, catalog, self.trust,
                                      DiscoveryConfig.from_dict(config.get("discovery", {})))
        for ref in self.spec.doc.get("alignments", []):
            registry.add_alignment(load_alignment(self.spec.path(ref), embedder))
        for name, need in self.spec.doc.get("needAliases", {}).items():
            registry.register_need_alias(name, CapabilityNeed.from_doc(need))
        return registry

    def _load_agents(self) -> List[ScriptedAgent]:
        removed = set(self.variant.get("removeAgents", []))
        deadline = self.broker.config.request_deadline
        agents = []
        for ref in self.spec.doc.get("agents", []):
            agent = ScriptedAgent.load(self.spec.path(ref), deadline)
            if agent.agent_id in removed or "*" in removed:
                continue
            agent.inject_faults(self.variant.get("faults", {}).get(agent.agent_id, {}))
            agents.append(agent)
        return agents

    def _register_agents(self, registry: CapabilityRegistry, contexts: ContextStore) -> None:
        for agent in self.agents.values():
            _, key = self.trust.generate_identity(agent.agent_id)
            self.keys[agent.agent_id] = key
            registry.register(agent.aidl, key.sign_doc(agent.aidl))
            contexts.register_policy(agent.policy)
            if agent.policy.sharing_enabled:
                self.trust.record_security_policy(agent.policy.to_doc(), key)
            agent.attach(self.broker, key)
            self.events.emit("agent.registered", at=format_instant(self.clock.now()), agentId=agent.agent_id)

    def _request(self, sender: str, message_type: MessageType, topic: str, payload: Dict[str, Any],
                 correlation: str) -> MessageEnvelope:
        key = self.keys[sender]
        agent = self.agents.get(sender)
        if agent is not None and agent.last_sent is not None:
            self.clock.advance_to(agent.last_sent)
        env = key.sign_envelope(MessageEnvelope(
            message_id=correlation, message_type=message_type, topic=Topic.parse(topic),
            sender=sender, timestamp=self.clock.now(), payload=payload, correlation_id=correlation,
        ))
        response = self.broker.route_request(env)
        self.clock.advance_to(response.timestamp)
        return response

    def _capability_query(self, coordinator: str) -> Dict[str, Any]:
        query = self.spec.section("query")
        if not query:
            return {}
        request_id = query.get("requestId", f"{self.spec.name}-query")
        response = self._request(coordinator, MessageType.CAPABILITY_QUERY, QUERY_TOPIC,
                                 {"requestId": request_id, "capabilities": query["capabilities"]}, request_id)
        self.events.emit("discovery.answered", at=format_instant(self.clock.now()), requestId=request_id,
                         messageType=response.message_type.value)
        return response.payload

    def _context_sharing(self, workflow_id: str) -> Dict[str, Any]:
        """按场景脚本经 StateOp 信封开启并使用共享上下文，上下文绑定到工作流任务"""
        plan = self.spec.section("contextSharing")
        if not plan or plan.get("initiator") not in self.agents:
            return {"skipped": True}
        initiator = plan["initiator"]
        log: Dict[str, Any] = {"steps": []}

        def op(agent: str, payload: Dict[str, Any]) -> Dict[str, Any]:
            step = len(log["steps"]) + 1
            response = self._request(agent, MessageType.STATE_OP, STATE_TOPIC, payload,
                                     f"{workflow_id}:ctx:{step}")
            entry = {"agent": agent, "op": payload["op"], "type": response.message_type.value,
                     "payload": response.payload}
            log["steps"].append(entry)
            return response.payload

        created = op(initiator, {"op": "create", "contextName": plan["contextName"], "taskId": workflow_id})
        context_id = created.get("result", {}).get("contextId")
        log["contextId"] = context_id
        for member in plan.get("join", []):
            if member in self.agents:
                op(member, {"op": "join", "contextId": context_id})
        for write in plan.get("writes", []):
            if write.get("agent") in self.agents:
                op(write["agent"], {"op": "write", "contextId": context_id, "key": write["key"],
                                    "value": write["value"], "stateType": write["stateType"]})
        for read in plan.get("reads", []):
            if read.get("agent") in self.agents:
                op(read["agent"], {"op": "read", "contextId": context_id, "key": read["key"]})
        return log

    def _after_completion(self, log: Dict[str, Any]) -> None:
        """任务完成后再读一次，确认上下文已过期"""
        plan = self.spec.section("contextSharing") or {}
        if log.get("skipped") or not plan.get("reads"):
            return
        read = plan["reads"][0]
        response = self._request(read["agent"], MessageType.STATE_OP, STATE_TOPIC,
                                 {"op": "read", "contextId": log["contextId"], "key": read["key"]},
                                 f"{log['contextId']}:after")
        log["afterCompletion"] = {"type": response.message_type.value, "payload": response.payload}

    # ---- 主流程 ----
    def run(self) -> Dict[str, Any]:
        config = self.spec.section("config", {})
        coordinator = self.spec.doc.get("coordinator", "coordinator-agent-main")
        logger.info(f"场景 {self.spec.name} 开始 (seed={self.seed}, variant={self.variant_name})")

        registry = self._step("registry", self._build_registry)
        contexts = ContextStore(self.clock, self.events)
        _, context_key = self.trust.generate_identity(CONTEXT_SERVICE_ID)
        service = ContextService(contexts, context_key)
        _, self.keys[coordinator] = self.trust.generate_identity(coordinator)
        self.agents = {a.agent_id: a for a in self._step("agents", self._load_agents)}
        self._step("register", lambda: self._register_agents(registry, contexts))
        registry.attach(self.broker)
        service.attach(self.broker)

        workflow_doc = self.spec.doc["workflow"]
        if isinstance(workflow_doc, str):
            workflow_doc = load_json(self.spec.path(workflow_doc))
        workflow_doc = _merge(workflow_doc, {"inputs": self.variant.get("inputs", {})})
        spec = self._step("workflow", lambda: WorkflowSpec.from_doc(workflow_doc))

        discovery = self._step("query", lambda: self._capability_query(coordinator))
        context_log = self._step("context", lambda: self._context_sharing(spec.workflow_id))

        tables = {name: ConceptMapTable.load(self.spec.path(ref))
                  for name, ref in self.spec.doc.get("conceptTables", {}).items()}
        executor = WorkflowExecutor(registry, self.broker, self.keys[coordinator],
                                    OrchestratorConfig.from_dict(config.get("orchestrator", {})),
                                    tables, contexts, self.events)
        state = self._step("execute", lambda: executor.execute(spec))
        self._step("context-after", lambda: self._after_completion(context_log))
        self.trust.tick(force=True)
        self.trust.seal_block()

        report = self._report(spec, state, discovery, context_log)
        report["assertions"] = evaluate_assertions(self._expected(), report)
        return report

    def _expected(self) -> Dict[str, Any]:
        """变体里的断言按顶层键整体替换基准断言"""
        return {**self.spec.section("expected", {}), **self.variant.get("expected", {})}

    def _report(self, spec: WorkflowSpec, state: ExecutionState, discovery: Dict[str, Any],
                context_log: Dict[str, Any]) -> Dict[str, Any]:
        reputation = {agent: self.trust.reputation(agent).to_doc() for agent in sorted(self.agents)}
        transactions = [
            {"ledger": ref.to_doc(), **record.body}
            for ref, record in self.trust.all_records()
            if record.record_type is RecordType.TRANSACTION
        ]
        return {
            "scenario": self.spec.name,
            "variant": self.variant_name,
            "seed": self.seed,
            "discovery": discovery,
            "workflow": state.to_doc(),
            "translations": {node: state.bindings[node] for node in sorted(state.bindings)},
            "context": context_log,
            "contextEvents": [e for e in self.events.events() if e["event"].startswith("context.")],
            "transactions": transactions,
            "ledger": {**self.trust.summary(), "anchors": [list(a) for a in self.trust.export_anchors()],
                       "firstBadHeight": self.trust.verify_chain()},
            "reputation": reputation,
            "trace": self.broker.trace(),
            "events": self.events.events(),
        }


# ---------------------------------------------------------------------------
# 断言
# ---------------------------------------------------------------------------

def _check(name: str, passed: bool, expected: Any, actual: Any) -> Dict[str, Any]:
    return {"name": name, "passed": bool(passed), "expected": expected, "actual": actual}


def evaluate_assertions(expected: Dict[str, Any], report: Dict[str, Any]) -> List[Dict[str, Any]]:
    """把场景里的黄金断言逐条求值，结果写进报告"""
    workflow = report["workflow"]
    results = []
    if "status" in expected:
        results.append(_check("status", workflow["status"] == expected["status"],
                              expected["status"], workflow["status"]))
    if "maxSpent" in expected:
        results.append(_check("maxSpent", workflow["spent"] <= expected["maxSpent"],
                              expected["maxSpent"], workflow["spent"]))
    for node, value in sorted(expected.get("nodeStates", {}).items()):
        actual = workflow["nodeStates"].get(node)
        results.append(_check(f"nodeStates.{node}", actual == value, value, actual))
    for node, value in sorted(expected.get("attempts", {}).items()):
        actual = workflow["attempts"].get(node)
        results.append(_check(f"attempts.{node}", actual == value, value, actual))
    for node, value in sorted(expected.get("boundAgent", {}).items()):
        actual = workflow["boundAgent"].get(node, [None])[0]
        results.append(_check(f"boundAgent.{node}", actual == value, value, actual))
    if "compensations" in expected:
        results.append(_check("compensations", workflow["compensations"] == expected["compensations"],
                              expected["compensations"], workflow["compensations"]))
    for path, value in sorted(expected.get("bindings", {}).items()):
        actual = lookup_path(workflow["bindings"], path)
        actual = actual if isinstance(actual, (str, int, float, bool, type(None), list, dict)) else None
        results.append(_check(f"bindings.{path}", actual == value, value, actual))
    if "approvedTransactions" in expected:
        approved = sorted(t["transactionType"] for t in report["transactions"]
                          if t.get("verificationStatus") == "approved")
        results.append(_check("approvedTransactions", approved == sorted(expected["approvedTransactions"]),
                              sorted(expected["approvedTransactions"]), approved))
    for capability, agents in sorted(expected.get("discoveryTop", {}).items()):
        ranked = [m["agentId"] for m in report["discovery"].get("results", {}).get(capability, [])]
        results.append(_check(f"discoveryTop.{capability}", ranked[:len(agents)] == agents, agents, ranked))
    if "contextExpired" in expected:
        after = report["context"].get("afterCompletion", {})
        actual = after.get("payload", {}).get("error") == "ContextClosed"
        results.append(_check("contextExpired", actual == expected["contextExpired"],
                              expected["contextExpired"], actual))
    if expected.get("ledgerIntact"):
        bad = report["ledger"]["firstBadHeight"]
        results.append(_check("ledgerIntact", bad is None, None, bad))
    return results


def run_scenario(path: str, seed: int = 7, variant: Optional[str] = None,
                 trace_path: Optional[str] = None) -> Dict[str, Any]:
    return ScenarioRunner(ScenarioSpec.load(path), seed, variant, trace_path).run()


def report_bytes(report: Dict[str, Any]) -> bytes:
    """报告的稳定文本形式，用于逐字节比较"""
    canonicalize(report)
    return dump_json(report).encode("utf-8")
