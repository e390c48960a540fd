"""
匹配打分与 AIDL 解析测试
"""
import copy

import numpy as np
import pytest

from conftest import fixture_path
from src.core.errors import DimensionMismatch, InvalidAgentId, MalformedCapability, MalformedQuery, ZeroVector
from src.discovery.aidl import CapabilityNeed, humanize_capability, parse_aidl
from src.discovery.ontology import OntologyGraph
from src.discovery.scoring import (
    MISSING_TERM, UNCONSTRAINED, ConstraintPlan, SynthesisWeights, constraint_check, onto_score, vec_score,
)
from src.translation.constraints import ConstraintCatalog
from src.utils import load_json


@pytest.fixture
def ontology():
    return OntologyGraph.load(fixture_path("ontology.json"))


@pytest.fixture
def catalog():
    return ConstraintCatalog.load(fixture_path("concepts", "constraints.json"))


@pytest.fixture
def records():
    found = {}
    for aidl in load_json(fixture_path("discovery", "agents_4d.json")):
        for record in parse_aidl(aidl):
            found[record.agent_id] = record
    return found


class TestOntoScore:

    def test_unconstrained(self, ontology):
        match = onto_score(None, "http://schema.org/Flight", ontology)
        assert (match.score, match.flag) == (1.0, UNCONSTRAINED)

    def test_identical_iri_even_outside_graph(self, ontology):
        assert onto_score("https://example.org/Ferry/", "http://example.org/Ferry", ontology).score == 1.0

    def test_decays_per_subclass_step(self, ontology):
        assert onto_score("travel:Transportation", "http://schema.org/Flight", ontology).score == pytest.approx(0.9)
        assert onto_score("travel:Transportation", "travel:TicketBooking", ontology).score == pytest.approx(0.81)
        assert onto_score("travel:Transportation", "travel:TicketBooking", ontology, decay=0.5).score == 0.25

    def test_more_general_offer_does_not_match(self, ontology):
        match = onto_score("http://schema.org/Flight", "travel:Transportation", ontology)
        assert match.score == 0.0 and match.flag is None

    def test_missing_term(self, ontology):
        match = onto_score("travel:Ferry", "travel:Transportation", ontology)
        assert (match.score, match.flag) == (0.0, MISSING_TERM)


class TestVecScore:

    def test_reference_vectors(self):
        assert vec_score([0.15, 0.79, 0.08, 0.66], [0.2, 0.8, 0.1, 0.7]) == pytest.approx(0.9988, abs=1e-3)

    def test_positive_scaling_invariant(self):
        a, b = np.array([0.3, -0.2, 0.9]), np.array([0.1, 0.4, 0.5])
        assert vec_score(a, b) == pytest.approx(vec_score(3.5 * a, 0.01 * b))

    def test_opposite_clamps_to_zero(self):
        assert vec_score([1.0, 0.0], [-1.0, 0.0]) == 0.0

    def test_errors(self):
        with pytest.raises(DimensionMismatch):
            vec_score([1.0, 0.0], [1.0, 0.0, 0.0])
        with pytest.raises(ZeroVector):
            vec_score([0.0, 0.0], [1.0, 0.0])


class TestConstraintCheck:

    def test_parameter_name_match(self, records, catalog):
        verdict = constraint_check("businessClass", records["flight-agent-001"], catalog)
        assert verdict.plan is ConstraintPlan.EXPLICIT_PARAMETER
        assert verdict.parameter == "search.class"

    def test_enum_value_match(self, records, catalog):
        verdict = constraint_check("businessClass", records["travel-agent-005"], catalog)
        assert verdict.plan is ConstraintPlan.EXPLICIT_PARAMETER
        assert verdict.parameter == "search.cabin"

    def test_semantic_translation(self, records, catalog):
        verdict = constraint_check("directFlights", records["flight-agent-001"], catalog)
        assert verdict.plan is ConstraintPlan.SEMANTIC_TRANSLATION
        assert verdict.rewrite.injection == ("maxConnections", 0)

    def test_post_filter(self, records, catalog):
        verdict = constraint_check("directFlights", records["travel-agent-005"], catalog)
        assert verdict.plan is ConstraintPlan.POST_FILTER
        assert verdict.score == 0.8

    def test_unsatisfied(self, records, catalog):
        for constraint in ("businessClass", "directFlights"):
            verdict = constraint_check(constraint, records["booking-agent-003"], catalog)
            assert verdict.plan is ConstraintPlan.UNSATISFIED
            assert verdict.score == 0.0


class TestWeights:

    def test_synthesize(self):
        assert SynthesisWeights().synthesize(0.9, 1.0, 0.5) == pytest.approx(0.36 + 0.4 + 0.1)

    @pytest.mark.parametrize("values", [[0.5, 0.5, 0.5], [1.2, -0.1, -0.1]])
    def test_invalid(self, values):
        with pytest.raises(ValueError):
            SynthesisWeights.from_list(values)


class TestAidl:

    @pytest.fixture
    def aidl(self):
        return copy.deepcopy(load_json(fixture_path("discovery", "agents_4d.json"))[0])

    def test_parse_listing(self, aidl):
        (record,) = parse_aidl(aidl)
        assert record.key == ("flight-agent-001", "flightBooking")
        assert record.operations == ("search", "price", "book", "cancel")
        assert ("search", "class", "string?") in record.parameters()
        np.testing.assert_array_equal(record.embedding, [0.2, 0.8, 0.1, 0.7])

    def test_round_trip(self, aidl):
        (record,) = parse_aidl(aidl)
        assert record.to_aidl() == aidl["capabilities"][0]

    @pytest.mark.parametrize("mutate", [
        lambda d: d["capabilities"][0].pop("version"),
        lambda d: d["capabilities"][0].update(version="1.2"),
        lambda d: d["capabilities"][0]["semantics"].update(operations=[]),
        lambda d: d["capabilities"][0]["semantics"].pop("embedding"),
        lambda d: d["capabilities"][0]["semantics"].update(embedding=[0.1, "x"]),
        lambda d: d["capabilities"][0]["interface"]["inputs"].update(refund={}),
        lambda d: d["capabilities"].append(copy.deepcopy(d["capabilities"][0])),
        lambda d: d.update(capabilities=[]),
        lambda d: d.pop("capabilities"),
    ])
    def test_malformed(self, aidl, mutate):
        mutate(aidl)
        with pytest.raises(MalformedCapability):
            parse_aidl(aidl)

    def test_embedding_text_is_enough(self, aidl):
        semantics = aidl["capabilities"][0]["semantics"]
        del semantics["embedding"]
        semantics["embeddingText"] = "find and book flights"
        (record,) = parse_aidl(aidl)
        assert record.embedding is None and record.embedding_text == "find and book flights"

    def test_invalid_agent_id(self, aidl):
        aidl["agentId"] = "Flight Agent"
        with pytest.raises(InvalidAgentId):
            parse_aidl(aidl)


@pytest.mark.parametrize("name, expected", [
    ("flightBooking", "flight booking"),
    ("hotelReservation", "hotel reservation"),
    ("XMLParser", "xml parser"),
    ("budget", "budget"),
])
def test_humanize_capability(name, expected):
    assert humanize_capability(name) == expected


class TestNeed:

    def test_from_fixture(self):
        need = CapabilityNeed.from_doc(load_json(fixture_path("discovery", "need_4d.json")))
        assert need.functionality == "Find and book flights"
        assert need.constraints == ("businessClass", "directFlights")
        assert need.embedding == (0.15, 0.79, 0.08, 0.66)
        assert CapabilityNeed.from_doc(need.to_doc()) == need

    @pytest.mark.parametrize("doc", [
        {"functionality": ""},
        {"functionality": "x", "constraints": "direct"},
        {"functionality": "x", "constraints": [1]},
        {"functionality": "x", "ontology": 5},
        {"functionality": "x", "embedding": [True, 1.0]},
        {"functionality": "x", "embedding": [float("nan")]},
        "flights",
    ])
    def test_malformed(self, doc):
        with pytest.raises(MalformedQuery):
            CapabilityNeed.from_doc(doc)
