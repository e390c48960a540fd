"""
能力注册表测试：签名登记、版本单调、嵌入对齐、排序与总线查询
"""
import copy

import numpy as np
import pytest

from conftest import fixture_path
from src.core.errors import DimensionMismatch, EmbeddingFailure, InvalidSignature, StaleVersion
from src.core.model import MessageEnvelope, MessageType, Topic
from src.discovery.aidl import CapabilityNeed
from src.discovery.capability_registry import (
    QUERY_TOPIC, REGISTRY_ID, CapabilityRegistry, DiscoveryConfig, matches_to_listing,
)
from src.discovery.ontology import OntologyGraph
from src.discovery.scoring import ConstraintPlan
from src.translation.alignment import load_alignment
from src.translation.constraints import ConstraintCatalog
from src.translation.embedder import HashingEmbedder
from src.trust.ledger import LedgerRef, RecordType
from src.utils import load_json

NEED = [0.15, 0.79, 0.08, 0.66]


def _registry(trust, dimension, embedder, config=None):
    return CapabilityRegistry(
        dimension, embedder,
        OntologyGraph.load(fixture_path("ontology.json")),
        ConstraintCatalog.load(fixture_path("concepts", "constraints.json")),
        trust, config,
    )


def _register(registry, trust, aidl, keys):
    key = keys.get(aidl["agentId"])
    if key is None:
        _, key = trust.generate_identity(aidl["agentId"])
        keys[aidl["agentId"]] = key
    return registry.register(aidl, key.sign_doc(aidl))


@pytest.fixture
def agents():
    return load_json(fixture_path("discovery", "agents_4d.json"))


@pytest.fixture
def keys():
    return {}


@pytest.fixture
def registry4(trust, agents, keys):
    registry = _registry(trust, 4, HashingEmbedder(4, 7))
    for aidl in agents:
        _register(registry, trust, aidl, keys)
    return registry


@pytest.fixture
def need():
    return CapabilityNeed.from_doc(load_json(fixture_path("discovery", "need_4d.json")))


def _cos(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return max(0.0, float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))


class TestGoldenRanking:

    def test_scores_and_order(self, registry4, agents, need):
        embeddings = {a["agentId"]: a["capabilities"][0]["semantics"]["embedding"] for a in agents}
        expected = {
            "flight-agent-001": 0.4 * 0.9 + 0.4 * _cos(NEED, embeddings["flight-agent-001"]) + 0.2 * 1.0,
            "travel-agent-005": 0.4 * 0.9 + 0.4 * _cos(NEED, embeddings["travel-agent-005"]) + 0.2 * 0.9,
            "booking-agent-003": 0.4 * 0.81 + 0.4 * _cos(NEED, embeddings["booking-agent-003"]) + 0.0,
        }
        results = registry4.discover(need)
        assert [r.agent_id for r in results] == ["flight-agent-001", "travel-agent-005", "booking-agent-003"]
        for result in results:
            assert result.score == pytest.approx(expected[result.agent_id], abs=1e-9)
        assert results[0].vec_score == pytest.approx(0.9988, abs=1e-3)

    def test_constraint_plans(self, registry4, need):
        plans = {r.agent_id: r.constraint_plan for r in registry4.discover(need)}
        assert plans["flight-agent-001"] == {
            "businessClass": ConstraintPlan.EXPLICIT_PARAMETER,
            "directFlights": ConstraintPlan.SEMANTIC_TRANSLATION,
        }
        assert plans["travel-agent-005"]["directFlights"] is ConstraintPlan.POST_FILTER
        assert set(plans["booking-agent-003"].values()) == {ConstraintPlan.UNSATISFIED}

    def test_hotel_below_floor(self, registry4, need):
        assert "hotel-agent-009" not in {r.agent_id for r in registry4.discover(need)}

    def test_zero_floor_keeps_everything(self, trust, agents, keys, need):
        registry = _registry(trust, 4, HashingEmbedder(4, 7), DiscoveryConfig(score_floor=0.0))
        for aidl in agents:
            _register(registry, trust, aidl, keys)
        results = registry.discover(need)
        assert results[-1].agent_id == "hotel-agent-009"
        scores = [r.score for r in results]
        assert scores == sorted(scores, reverse=True)

    def test_listing_shape(self, registry4, need):
        listing = matches_to_listing(registry4.discover(need))["matches"]
        assert listing[0]["agentId"] == "flight-agent-001"
        assert listing[0]["ontologicalMatch"] == "Moderate"
        assert listing[0]["constraintSatisfaction"] == "Complete"
        assert listing[1]["constraintPlan"]["directFlights"] == "PostFilter"
        assert listing[2]["constraintSatisfaction"] == "None"

    def test_reputation_multiplier(self, trust, agents, keys, need):
        registry = _registry(trust, 4, HashingEmbedder(4, 7), DiscoveryConfig(reputation_multiplier=True,
                                                                                score_floor=0.0))
        for aidl in agents:
            _register(registry, trust, aidl, keys)
        for _ in range(3):
            trust.update_reputation("travel-agent-005", "Success", {"ledger": [0, 0]})
            trust.update_reputation("flight-agent-001", "Failure", {"ledger": [0, 0]})
        results = registry.discover(need)
        assert results[0].agent_id == "travel-agent-005"
        assert results[0].reputation == pytest.approx(0.8)


class TestRegister:

    def test_ack_and_ledger_record(self, trust, agents, keys):
        registry = _registry(trust, 4, HashingEmbedder(4, 7))
        ack = _register(registry, trust, agents[0], keys)
        assert ack["agentId"] == "flight-agent-001"
        (entry,) = ack["registered"]
        assert (entry["capability"], entry["version"]) == ("flightBooking", "1.2.0")
        record = trust.record_at(LedgerRef(*entry["ledger"]))
        assert record.record_type is RecordType.AGENT_REGISTRATION
        assert record.body["capability"] == "flightBooking"

    def test_registry_has_identity(self, trust, agents, keys):
        _registry(trust, 4, HashingEmbedder(4, 7))
        assert trust.identities.is_registered(REGISTRY_ID)

    def test_bad_signature(self, trust, agents, keys):
        registry = _registry(trust, 4, HashingEmbedder(4, 7))
        _, key = trust.generate_identity("flight-agent-001")
        signature = key.sign_doc(agents[0])
        tampered = copy.deepcopy(agents[0])
        tampered["capabilities"][0]["version"] = "9.9.9"
        with pytest.raises(InvalidSignature):
            registry.register(tampered, signature)
        assert registry.records() == []

    def test_unregistered_agent(self, trust, agents):
        registry = _registry(trust, 4, HashingEmbedder(4, 7))
        with pytest.raises(InvalidSignature):
            registry.register(agents[0], b"\x00" * 64)

    def test_stale_version(self, trust, agents, keys):
        registry = _registry(trust, 4, HashingEmbedder(4, 7))
        _register(registry, trust, agents[0], keys)
        with pytest.raises(StaleVersion):
            _register(registry, trust, agents[0], keys)
        older = copy.deepcopy(agents[0])
        older["capabilities"][0]["version"] = "1.1.9"
        with pytest.raises(StaleVersion):
            _register(registry, trust, older, keys)

        newer = copy.deepcopy(agents[0])
        newer["capabilities"][0]["version"] = "1.10.0"
        _register(registry, trust, newer, keys)
        assert registry.get("flight-agent-001", "flightBooking").version == "1.10.0"

    def test_wrong_dimension(self, trust, agents, keys):
        registry = _registry(trust, 8, HashingEmbedder(8, 7))
        with pytest.raises(DimensionMismatch):
            _register(registry, trust, agents[0], keys)

    def test_embedding_text(self, trust, keys, embedder):
        registry = _registry(trust, 64, embedder)
        aidl = {"agentId": "transfer-agent-004", "capabilities": [{
            "name": "airportTransfer", "version": "1.0.0",
            "semantics": {"ontology": "travel:LocalTransport", "operations": ["book"],
                          "embeddingText": "book airport transfer local transport"},
        }]}
        _register(registry, trust, aidl, keys)
        stored = registry.get("transfer-agent-004", "airportTransfer").embedding
        np.testing.assert_allclose(stored, embedder.embed("book airport transfer local transport"))

    def test_unembeddable_text(self, trust, keys, embedder):
        registry = _registry(trust, 64, embedder)
        aidl = {"agentId": "transfer-agent-004", "capabilities": [{
            "name": "airportTransfer", "version": "1.0.0",
            "semantics": {"ontology": "travel:LocalTransport", "operations": ["book"], "embeddingText": "..."},
        }]}
        with pytest.raises(EmbeddingFailure):
            _register(registry, trust, aidl, keys)

    def test_foreign_embedding_model_is_aligned(self, trust, agents, keys, embedder):
        registry = _registry(trust, 64, embedder)
        aidl = copy.deepcopy(agents[0])
        aidl["capabilities"][0]["semantics"]["embeddingModel"] = "aidl-reference-4d"
        with pytest.raises(DimensionMismatch):
            _register(registry, trust, aidl, keys)

        registry.add_alignment(load_alignment(fixture_path("alignment", "aidl-reference-4d.json"), embedder))
        _register(registry, trust, aidl, keys)
        stored = registry.get("flight-agent-001", "flightBooking").embedding
        assert stored.shape == (64,)
        assert float(stored @ embedder.embed("find and book flights")) == pytest.approx(1.0, abs=1e-9)

    def test_deregister(self, registry4):
        assert registry4.deregister("hotel-agent-009", "accommodation")
        assert not registry4.deregister("hotel-agent-009", "accommodation")
        assert registry4.get("hotel-agent-009", "accommodation") is None


class TestQuery:

    def test_bare_capability_name(self, registry4):
        results = registry4.answer_query(["flightBooking"])
        assert [r["agentId"] for r in results["flightBooking"]] == ["flight-agent-001"]
        assert results["flightBooking"][0]["breakdown"]["ontoFlag"] == "unconstrained"

    def test_alias(self, registry4, need):
        registry4.register_need_alias("flights", need)
        results = registry4.answer_query(["flights", "hotelBooking"])
        assert [r["agentId"] for r in results["flights"]][:2] == ["flight-agent-001", "travel-agent-005"]
        assert results["hotelBooking"] == []

    def test_query_over_bus(self, registry4, broker, trust, keys, need):
        registry4.attach(broker)
        _, coordinator = trust.generate_identity("coordinator-agent-main")
        query = coordinator.sign_envelope(MessageEnvelope(
            message_id="q-1",
            message_type=MessageType.CAPABILITY_QUERY,
            topic=Topic.parse(QUERY_TOPIC),
            sender="coordinator-agent-main",
            timestamp=trust.clock.now(),
            payload={"requestId": "trip-7", "capabilities": [need.to_doc()["required"]]},
            correlation_id="corr-q-1",
        ))
        response = broker.route_request(query)
        assert response.message_type is MessageType.CAPABILITY_RESPONSE
        assert response.sender == REGISTRY_ID
        assert trust.identities.verify_envelope(response)
        assert response.payload["requestId"] == "trip-7"
        (matches,) = response.payload["results"].values()
        assert matches[0]["agentId"] == "flight-agent-001"

    def test_malformed_query_returns_error_envelope(self, registry4, trust):
        _, coordinator = trust.generate_identity("coordinator-agent-main")
        query = coordinator.sign_envelope(MessageEnvelope(
            message_id="q-2",
            message_type=MessageType.CAPABILITY_QUERY,
            topic=Topic.parse(QUERY_TOPIC),
            sender="coordinator-agent-main",
            timestamp=trust.clock.now(),
            payload={"capabilities": []},
            correlation_id="corr-q-2",
        ))
        response = registry4.handle_capability_query(query)
        assert response.message_type is MessageType.ERROR
        assert response.payload["error"] == "MalformedQuery"
        assert response.correlation_id == "corr-q-2"
