"""
线路层数据模型测试：规范化序列化、时间戳、主题与信封
"""
import math
from datetime import datetime

import numpy as np
import pytest
import pytz

from src.core.errors import (
    InvalidAgentId, InvalidPattern, InvalidTopic, MalformedDocument,
    MalformedEnvelope, NonFiniteNumber,
)
from src.core.model import (
    MessageEnvelope, MessageType, Topic, TopicPattern, canonicalize, envelope_digest,
    format_instant, normalize_iri, parse_doc, parse_instant, validate_agent_id,
)


def _envelope(**overrides):
    fields = dict(
        message_id="msg-1",
        message_type=MessageType.EVENT,
        topic=Topic.parse("flight-disruption"),
        sender="flight-agent-001",
        timestamp=parse_instant("2025-05-17T09:42:17Z"),
        payload={"flight": "NH007", "delayMinutes": 45},
    )
    fields.update(overrides)
    return MessageEnvelope(**fields)


class TestCanonicalize:

    def test_keys_sorted_without_whitespace(self):
        assert canonicalize({"b": 1, "a": [1.5, True, None]}) == b'{"a":[1.5,true,null],"b":1}'

    def test_nested_keys_sorted(self):
        doc = {"z": {"y": 1, "x": {"d": 0, "c": 0}}, "a": "v"}
        assert canonicalize(doc) == b'{"a":"v","z":{"x":{"c":0,"d":0},"y":1}}'

    def test_integral_float_renders_as_integer(self):
        assert canonicalize({"cost": 1650.0}) == b'{"cost":1650}'
        assert canonicalize(1650.0) == canonicalize(1650)

    @pytest.mark.parametrize("number", [1e16, 2.0 ** 60, -1e20])
    def test_large_integral_float_matches_integer(self, number):
        assert canonicalize(number) == canonicalize(int(number)) == str(int(number)).encode("ascii")

    def test_lone_surrogate_rejected(self):
        with pytest.raises(MalformedDocument):
            canonicalize({"city": "\ud800"})

    def test_shortest_round_trip_float(self):
        assert canonicalize(0.1) == b"0.1"
        assert float(canonicalize(1 / 3)) == 1 / 3

    def test_numpy_scalars_and_arrays(self):
        doc = {"x": np.float64(0.5), "n": np.int64(3), "v": np.array([1.0, 2.5]), "ok": np.bool_(True)}
        assert canonicalize(doc) == b'{"n":3,"ok":true,"v":[1,2.5],"x":0.5}'

    def test_utf8_not_escaped(self):
        assert canonicalize({"city": "東京"}) == '{"city":"東京"}'.encode("utf-8")

    def test_key_order_does_not_matter(self):
        assert canonicalize({"a": 1, "b": 2}) == canonicalize({"b": 2, "a": 1})

    @pytest.mark.parametrize("value", [math.nan, math.inf, -math.inf])
    def test_non_finite_rejected(self, value):
        with pytest.raises(NonFiniteNumber):
            canonicalize({"price": value})

    def test_non_string_key_rejected(self):
        with pytest.raises(MalformedDocument):
            canonicalize({1: "x"})

    def test_unsupported_type_rejected(self):
        with pytest.raises(MalformedDocument):
            canonicalize({"when": datetime(2025, 5, 17)})


class TestParseDoc:

    def test_parse_round_trips_canonical_bytes(self):
        raw = b'{"a":[1,2],"b":{"c":"d"}}'
        assert canonicalize(parse_doc(raw)) == raw

    def test_nan_rejected(self):
        with pytest.raises(NonFiniteNumber):
            parse_doc('{"a": NaN}')

    def test_infinity_rejected(self):
        with pytest.raises(NonFiniteNumber):
            parse_doc('[Infinity]')

    def test_duplicate_keys_rejected(self):
        with pytest.raises(MalformedDocument):
            parse_doc('{"a": 1, "a": 2}')

    def test_invalid_json_rejected(self):
        with pytest.raises(MalformedDocument):
            parse_doc(b'{"a": ')

    def test_invalid_utf8_rejected(self):
        with pytest.raises(MalformedDocument):
            parse_doc(b'\xff\xfe')

    @pytest.mark.parametrize("text", ['"\\ud800"', '{"\\udc00": 1}', '["a\\ud83d"]'])
    def test_unpaired_surrogate_rejected(self, text):
        with pytest.raises(MalformedDocument):
            parse_doc(text)

    def test_surrogate_pair_accepted(self):
        assert parse_doc('"\\ud83d\\ude00"') == "\U0001F600"


class TestInstants:

    def test_format_truncates_to_milliseconds(self):
        value = pytz.utc.localize(datetime(2025, 5, 17, 9, 42, 17, 123987))
        assert format_instant(value) == "2025-05-17T09:42:17.123Z"

    def test_parse_without_fraction(self):
        assert format_instant(parse_instant("2025-05-17T09:42:17Z")) == "2025-05-17T09:42:17.000Z"

    def test_round_trip(self):
        text = "2025-06-11T23:59:59.999Z"
        assert format_instant(parse_instant(text)) == text

    def test_non_utc_converted(self):
        tokyo = pytz.timezone("Asia/Tokyo").localize(datetime(2025, 5, 17, 18, 42, 17))
        assert format_instant(tokyo) == "2025-05-17T09:42:17.000Z"

    @pytest.mark.parametrize("text", ["2025-05-17T09:42:17", "2025-05-17 09:42Z", "yesterday", 42])
    def test_malformed_rejected(self, text):
        with pytest.raises(MalformedDocument):
            parse_instant(text)


class TestTopics:

    def test_parse_and_render(self):
        topic = Topic.parse("capability.flight-agent-001.flightBooking")
        assert topic.segments == ("capability", "flight-agent-001", "flightBooking")
        assert topic.render() == "capability.flight-agent-001.flightBooking"

    @pytest.mark.parametrize("text", ["", "a..b", ".a", "a.", "a b", "a.*", "a.#"])
    def test_invalid_topic(self, text):
        with pytest.raises(InvalidTopic):
            Topic.parse(text)

    @pytest.mark.parametrize("pattern, topic, expected", [
        ("flight-disruption", "flight-disruption", True),
        ("a.*", "a.b", True),
        ("a.*", "a.b.c", False),
        ("a.*", "a", False),
        ("a.#", "a", True),
        ("a.#", "a.b.c", True),
        ("a.#", "b.a", False),
        ("#", "x.y.z", True),
        ("*.b.*", "a.b.c", True),
        ("*.b.*", "a.c.c", False),
        ("capability.*.flightBooking", "capability.flight-agent-001.flightBooking", True),
    ])
    def test_pattern_matching(self, pattern, topic, expected):
        assert TopicPattern.parse(pattern).matches(Topic.parse(topic)) is expected

    @pytest.mark.parametrize("text", ["a.#.b", "#.a", "", "a..b", "a.b c"])
    def test_invalid_pattern(self, text):
        with pytest.raises(InvalidPattern):
            TopicPattern.parse(text)


class TestAgentId:

    def test_valid(self):
        assert validate_agent_id("flight-agent-001") == "flight-agent-001"

    @pytest.mark.parametrize("value", ["Flight-Agent", "flight_agent", "", "agent 1", None])
    def test_invalid(self, value):
        with pytest.raises(InvalidAgentId):
            validate_agent_id(value)


class TestEnvelope:

    def test_doc_round_trip_keeps_signing_bytes(self):
        env = _envelope(correlation_id="c-1").with_signature(b"\x01\x02\x03")
        restored = MessageEnvelope.from_doc(env.to_doc())
        assert restored.signing_bytes() == env.signing_bytes()
        assert restored.signature == b"\x01\x02\x03"

    def test_signature_is_base64url_without_padding(self):
        env = _envelope().with_signature(b"\xfb\xff")
        assert env.to_doc()["signature"] == "-_8"

    def test_payload_is_copied(self):
        payload = {"flight": "NH007"}
        env = _envelope(payload=payload)
        payload["flight"] = "JL001"
        assert env.payload["flight"] == "NH007"

    def test_non_finite_payload_rejected(self):
        with pytest.raises(NonFiniteNumber):
            _envelope(payload={"cost": math.inf})

    def test_invalid_sender_rejected(self):
        with pytest.raises(InvalidAgentId):
            _envelope(sender="Flight Agent")

    def test_missing_field_rejected(self):
        doc = _envelope().to_doc()
        del doc["sender"]
        with pytest.raises(MalformedEnvelope):
            MessageEnvelope.from_doc(doc)

    def test_unknown_message_type_rejected(self):
        doc = _envelope().to_doc()
        doc["messageType"] = "Gossip"
        with pytest.raises(MalformedEnvelope):
            MessageEnvelope.from_doc(doc)

    def test_digest_ignores_signature(self):
        env = _envelope()
        assert envelope_digest(env) == envelope_digest(env.with_signature(b"sig"))
        assert envelope_digest(env) != envelope_digest(_envelope(message_id="msg-2"))


def test_normalize_iri():
    assert normalize_iri("http://schema.org/Flight") == "schema.org/Flight"
    assert normalize_iri("https://schema.org/Flight/") == "schema.org/Flight"
    assert normalize_iri("travel:AirTravel") == "travel:AirTravel"
