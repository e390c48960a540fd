import pytest

from conftest import fixture_path
from src.core.errors import InvalidConceptTable, PathConflict
from src.translation.constraints import (
    ConstraintCatalog, ConstraintRewrite, Predicate, filter_results, rewrite_for_constraint,
)


@pytest.fixture
def catalog():
    return ConstraintCatalog.load(fixture_path("concepts", "constraints.json"))


def test_terms_include_synonyms(catalog):
    assert catalog.terms_for("premium") == ["premium", "business", "first", "deluxe"]
    assert catalog.terms_for("businessClass") == ["businessclass", "class", "business"]
    assert catalog.terms_for("quietRoom") == ["quietroom"]


def test_direct_flights_rewrites(catalog):
    injection, post_filter = catalog.rewrites_for("directFlights")
    assert injection.is_injection and not post_filter.is_injection
    assert injection.applies_to("https://schema.org/Flight/", ["search", "book"])
    assert not injection.applies_to("http://schema.org/LodgingBusiness", ["search"])
    assert not injection.applies_to("http://schema.org/Flight", ["book"])
    assert post_filter.applies_to(None, [])
    assert catalog.rewrites_for("quietRoom") == []


def test_injection_adds_parameter(catalog):
    injection = catalog.rewrites_for("directFlights")[0]
    request = {"origin": "SFO", "destination": "NRT"}
    rewritten = rewrite_for_constraint(request, injection)
    assert rewritten == {"origin": "SFO", "destination": "NRT", "maxConnections": 0}
    assert "maxConnections" not in request
    assert rewrite_for_constraint(rewritten, injection) == rewritten


def test_injection_conflict(catalog):
    injection = catalog.rewrites_for("directFlights")[0]
    with pytest.raises(PathConflict):
        rewrite_for_constraint({"maxConnections": 1}, injection)


def test_nested_injection_path():
    rw = ConstraintRewrite("flexibleFare", injection=("fare.refundable", True))
    assert rewrite_for_constraint({"fare": {"class": "business"}}, rw) == \
        {"fare": {"class": "business", "refundable": True}}
    with pytest.raises(PathConflict):
        rewrite_for_constraint({"fare": "basic"}, rw)


def test_filter_drops_failing_and_missing(catalog):
    post_filter = catalog.rewrites_for("directFlights")[1]
    results = [{"flightNo": "NH007", "connections": 0}, {"flightNo": "UA837", "connections": 1},
               {"flightNo": "ZZ000"}]
    assert filter_results(results, post_filter) == [results[0]]


def test_modes_are_exclusive(catalog):
    injection, post_filter = catalog.rewrites_for("directFlights")
    with pytest.raises(InvalidConceptTable):
        filter_results([], injection)
    with pytest.raises(InvalidConceptTable):
        rewrite_for_constraint({}, post_filter)


@pytest.mark.parametrize("op, value, candidate, expected", [
    ("eq", 0, 0, True),
    ("ne", 0, 1, True),
    ("lt", 500, 480, True),
    ("lte", 500, 500, True),
    ("gt", 4, 3, False),
    ("gte", 4, 4, True),
    ("in", ["economy", "premium"], "premium", True),
    ("lt", 500, "cheap", False),
])
def test_predicates(op, value, candidate, expected):
    assert Predicate(op, value).test(candidate) is expected


@pytest.mark.parametrize("doc", [
    {"constraint": "x"},
    {"constraint": "x", "injection": {"path": "a", "value": 1}, "filterField": "b",
     "predicate": {"op": "eq", "value": 1}},
    {"constraint": "x", "filterField": "b"},
    {"constraint": "x", "filterField": "b", "predicate": {"op": "like", "value": 1}},
    {"injection": {"path": "a", "value": 1}},
])
def test_invalid_rewrites(doc):
    with pytest.raises(InvalidConceptTable):
        ConstraintRewrite.from_doc(doc)


def test_rewrite_doc_round_trip(catalog):
    for rw in catalog.rewrites:
        assert ConstraintRewrite.from_doc(rw.to_doc()) == rw
