"""
消息总线测试：订阅、离线排队、游标轮询、流式投递与请求/响应
"""
import itertools
from datetime import timedelta

import pytest

from src.broker.umb_broker import BrokerConfig, DeliveryStatus, UMBBroker, capability_topic, reply_topic
from src.core.errors import (
    DuplicateMessage, InvalidCursor, InvalidSignature, MalformedEnvelope, NoSubscriber,
    RequestTimeout, UnknownAgent, UnknownSender, UnknownSubscription,
)
from src.core.model import MessageEnvelope, MessageType, Topic, envelope_digest
from src.trust.identity import AgentKey, derive_private_key

_ids = itertools.count(1)


@pytest.fixture
def keys(trust):
    return {agent: trust.generate_identity(agent)[1]
            for agent in ("flight-agent-001", "hotel-agent-002", "coordinator-agent-main")}


def _signed(key, clock, topic="flight-disruption", message_type=MessageType.EVENT,
            payload=None, correlation_id=None, message_id=None, timestamp=None):
    env = MessageEnvelope(
        message_id=message_id or f"msg-{next(_ids)}",
        message_type=message_type,
        topic=Topic.of(topic),
        sender=key.agent_id,
        timestamp=timestamp or clock.now(),
        payload=payload if payload is not None else {},
        correlation_id=correlation_id,
    )
    return key.sign_envelope(env)


class TestSubscribe:

    def test_same_pair_returns_same_subscription(self, broker, keys):
        first = broker.subscribe("hotel-agent-002", "flight-disruption")
        second = broker.subscribe("hotel-agent-002", "flight-disruption")
        assert first == second
        assert first.subscription_id == "sub-000001"
        assert len(broker.subscriptions()) == 1

    def test_unregistered_subscriber(self, broker):
        with pytest.raises(UnknownAgent):
            broker.subscribe("ghost-agent", "flight-disruption")

    def test_matching_subscribers(self, broker, keys):
        broker.subscribe("hotel-agent-002", "*")
        broker.subscribe("hotel-agent-002", "#")
        broker.subscribe("coordinator-agent-main", "flight-disruption")
        assert broker.matching_subscribers("flight-disruption") == ["coordinator-agent-main", "hotel-agent-002"]
        assert broker.matching_subscribers("weather") == ["hotel-agent-002"]

    def test_unsubscribe_unknown(self, broker):
        with pytest.raises(UnknownSubscription):
            broker.unsubscribe("sub-999999")

    def test_unsubscribe_drops_queued_messages(self, broker, keys, clock):
        sub = broker.subscribe("hotel-agent-002", "flight-disruption")
        broker.publish(_signed(keys["flight-agent-001"], clock))
        assert broker.queue_depth("hotel-agent-002") == 1
        broker.unsubscribe(sub.subscription_id)
        assert broker.queue_depth("hotel-agent-002") == 0
        assert broker.publish(_signed(keys["flight-agent-001"], clock)) == []

    def test_overlapping_subscriptions_deliver_once(self, broker, keys, clock):
        broker.subscribe("hotel-agent-002", "flight-disruption")
        wildcard = broker.subscribe("hotel-agent-002", "#")
        receipts = broker.publish(_signed(keys["flight-agent-001"], clock))
        assert len(receipts) == 1
        broker.unsubscribe(wildcard.subscription_id)
        assert broker.queue_depth("hotel-agent-002") == 1


class TestPublish:

    def test_unknown_sender(self, broker, clock):
        stranger = AgentKey("stranger-agent", derive_private_key(1, "stranger-agent"))
        with pytest.raises(UnknownSender):
            broker.publish(_signed(stranger, clock))

    def test_bad_signature(self, broker, keys, clock):
        env = _signed(keys["flight-agent-001"], clock)
        forged = MessageEnvelope.from_doc({**env.to_doc(), "payload": {"delay": 999}})
        with pytest.raises(InvalidSignature):
            broker.publish(forged)

    def test_duplicate_message(self, broker, keys, clock):
        env = _signed(keys["flight-agent-001"], clock, message_id="msg-dup")
        broker.publish(env)
        with pytest.raises(DuplicateMessage):
            broker.publish(env)

    def test_published_envelopes_are_observed_for_anchoring(self, broker, trust, keys, clock):
        env = _signed(keys["flight-agent-001"], clock)
        broker.publish(env)
        assert trust.envelope_known(envelope_digest(env))


class TestTimestamps:

    def test_equal_timestamps_accepted(self, broker, keys, clock):
        for _ in range(3):
            broker.publish(_signed(keys["flight-agent-001"], clock))

    def test_timestamp_must_not_go_backwards(self, broker, keys, clock):
        start = clock.now()
        clock.advance(30)
        broker.publish(_signed(keys["flight-agent-001"], clock))
        with pytest.raises(MalformedEnvelope):
            broker.publish(_signed(keys["flight-agent-001"], clock, timestamp=start))
        # 其他发送方不受影响
        broker.publish(_signed(keys["hotel-agent-002"], clock, timestamp=start))

    @pytest.mark.parametrize("offset", [61, -61])
    def test_timestamp_outside_skew(self, broker, keys, clock, offset):
        stamp = clock.now() + timedelta(seconds=offset)
        with pytest.raises(MalformedEnvelope):
            broker.publish(_signed(keys["flight-agent-001"], clock, timestamp=stamp))

    def test_rotated_out_key_cannot_backdate(self, broker, trust, keys, clock):
        broker.subscribe("hotel-agent-002", "flight-disruption")
        old_key = keys["flight-agent-001"]
        clock.advance(60)
        _, new_key = trust.generate_identity("flight-agent-001", rotate=True)
        backdated = _signed(old_key, clock, timestamp=clock.now() - timedelta(seconds=30))
        with pytest.raises(InvalidSignature):
            broker.publish(backdated)
        assert broker.queue_depth("hotel-agent-002") == 0
        assert len(broker.publish(_signed(new_key, clock))) == 1

    def test_replay_after_retention_is_rejected(self, broker, keys, clock):
        env = _signed(keys["flight-agent-001"], clock, message_id="msg-replayed")
        broker.publish(env)
        clock.advance(400)
        broker.publish(_signed(keys["hotel-agent-002"], clock))
        assert broker.bookkeeping_size()["seen"] == 1
        with pytest.raises(MalformedEnvelope):
            broker.publish(env)


class TestBookkeeping:

    def test_sizes_stay_bounded_over_long_runs(self, broker, keys, clock):
        broker.subscribe("hotel-agent-002", "flight-disruption")
        for _ in range(500):
            broker.publish(_signed(keys["flight-agent-001"], clock))
            clock.advance(3600)
        sizes = broker.bookkeeping_size()
        assert sizes["seen"] <= 1
        assert sizes["receipts"] <= 2
        assert broker.queue_depth("hotel-agent-002") <= 1

    def test_expired_correlations_are_pruned(self, broker, keys, clock):
        broker.subscribe("flight-agent-001", "capability.flight-agent-001.*")
        clock.real_wait = 0.01
        request = _signed(keys["coordinator-agent-main"], clock,
                          topic=capability_topic("flight-agent-001", "flightBooking"),
                          message_type=MessageType.REQUEST, correlation_id="corr-stale")
        with pytest.raises(RequestTimeout):
            broker.route_request(request)
        assert broker.bookkeeping_size()["expiredCorrelations"] == 1
        clock.advance(301)
        broker.publish(_signed(keys["hotel-agent-002"], clock))
        assert broker.bookkeeping_size()["expiredCorrelations"] == 0

    def test_queued_receipts_survive_until_expired(self, trust, clock, keys):
        broker = UMBBroker(trust, clock, BrokerConfig(retention_window=30.0))
        broker.subscribe("hotel-agent-002", "flight-disruption")
        env = _signed(keys["flight-agent-001"], clock)
        broker.publish(env)
        clock.advance(31)
        broker.publish(_signed(keys["hotel-agent-002"], clock))
        assert broker.receipt("flight-agent-001", env.message_id, "hotel-agent-002").status \
            is DeliveryStatus.EXPIRED


class TestOfflineQueue:

    def test_poll_returns_in_publish_order(self, broker, keys, clock):
        broker.subscribe("hotel-agent-002", "flight-disruption")
        sent = [_signed(keys["flight-agent-001"], clock, payload={"n": n}) for n in range(3)]
        for env in sent:
            receipts = broker.publish(env)
            assert [r.status for r in receipts] == [DeliveryStatus.QUEUED]

        result = broker.fallback_poll("hotel-agent-002", 0)
        assert [e.message_id for e in result.envelopes] == [e.message_id for e in sent]
        assert result.cursor == 3
        assert broker.fallback_poll("hotel-agent-002", 0).envelopes == result.envelopes

    def test_cursor_acknowledges_earlier_messages(self, broker, keys, clock):
        broker.subscribe("hotel-agent-002", "flight-disruption")
        for n in range(3):
            broker.publish(_signed(keys["flight-agent-001"], clock, payload={"n": n}))
        first = broker.fallback_poll("hotel-agent-002", 0)
        second = broker.fallback_poll("hotel-agent-002", first.cursor)
        assert second.envelopes == []
        assert second.cursor == first.cursor
        assert broker.queue_depth("hotel-agent-002") == 0
        statuses = {r.status for r in broker.receipts()}
        assert statuses == {DeliveryStatus.DELIVERED}

    def test_acknowledge_releases(self, broker, keys, clock):
        broker.subscribe("hotel-agent-002", "flight-disruption")
        for n in range(3):
            broker.publish(_signed(keys["flight-agent-001"], clock, payload={"n": n}))
        assert broker.acknowledge("hotel-agent-002", 2) == 2
        assert broker.queue_depth("hotel-agent-002") == 1

    @pytest.mark.parametrize("cursor", [-1, 5, "1", True])
    def test_invalid_cursor(self, broker, keys, clock, cursor):
        broker.subscribe("hotel-agent-002", "flight-disruption")
        broker.publish(_signed(keys["flight-agent-001"], clock))
        with pytest.raises(InvalidCursor):
            broker.fallback_poll("hotel-agent-002", cursor)

    def test_retention_window_expires_messages(self, trust, clock, keys):
        broker = UMBBroker(trust, clock, BrokerConfig(retention_window=30.0))
        broker.subscribe("hotel-agent-002", "flight-disruption")
        env = _signed(keys["flight-agent-001"], clock)
        broker.publish(env)
        clock.advance(31)
        assert broker.fallback_poll("hotel-agent-002", 0).envelopes == []
        receipt = broker.receipt("flight-agent-001", env.message_id, "hotel-agent-002")
        assert receipt.status is DeliveryStatus.EXPIRED

    def test_queue_overflow_evicts_oldest(self, trust, clock, keys):
        broker = UMBBroker(trust, clock, BrokerConfig(max_queue_per_subscriber=2))
        broker.subscribe("hotel-agent-002", "flight-disruption")
        sent = [_signed(keys["flight-agent-001"], clock, payload={"n": n}) for n in range(3)]
        for env in sent:
            broker.publish(env)
        result = broker.fallback_poll("hotel-agent-002", 1)
        assert [e.message_id for e in result.envelopes] == [e.message_id for e in sent[1:]]
        assert broker.receipt("flight-agent-001", sent[0].message_id, "hotel-agent-002").status \
            is DeliveryStatus.EXPIRED


class TestStreaming:

    def test_connected_subscriber_receives_immediately(self, broker, keys, clock):
        received = []
        broker.subscribe("hotel-agent-002", "flight-disruption")
        broker.connect("hotel-agent-002", received.append)
        env = _signed(keys["flight-agent-001"], clock)
        receipts = broker.publish(env)
        assert received == [env]
        assert receipts[0].status is DeliveryStatus.DELIVERED
        assert receipts[0].attempt == 1

    def test_connect_drains_backlog_in_order(self, broker, keys, clock):
        broker.subscribe("hotel-agent-002", "flight-disruption")
        sent = [_signed(keys["flight-agent-001"], clock, payload={"n": n}) for n in range(4)]
        for env in sent:
            broker.publish(env)
        received = []
        broker.connect("hotel-agent-002", received.append)
        assert received == sent
        assert broker.queue_depth("hotel-agent-002") == 0
        assert {r.attempt for r in broker.receipts()} == {2}

    def test_failing_sink_falls_back_to_queue(self, broker, keys, clock):
        broker.subscribe("hotel-agent-002", "flight-disruption")

        def broken(env):
            raise ConnectionError("socket closed")

        broker.connect("hotel-agent-002", broken)
        env = _signed(keys["flight-agent-001"], clock)
        receipts = broker.publish(env)
        assert receipts[0].status is DeliveryStatus.QUEUED
        assert not broker.is_connected("hotel-agent-002")
        assert broker.fallback_poll("hotel-agent-002", 0).envelopes == [env]

    def test_disconnect(self, broker, keys, clock):
        received = []
        broker.subscribe("hotel-agent-002", "flight-disruption")
        broker.connect("hotel-agent-002", received.append)
        broker.disconnect("hotel-agent-002")
        broker.publish(_signed(keys["flight-agent-001"], clock))
        assert received == []
        assert broker.queue_depth("hotel-agent-002") == 1

    def test_sink_may_publish(self, broker, keys, clock):
        forwarded = []
        broker.subscribe("hotel-agent-002", "flight-disruption")
        broker.subscribe("coordinator-agent-main", "hotel-update")

        def hotel(env):
            broker.publish(_signed(keys["hotel-agent-002"], clock, topic="hotel-update", payload=env.payload))

        broker.connect("hotel-agent-002", hotel)
        broker.connect("coordinator-agent-main", forwarded.append)
        broker.publish(_signed(keys["flight-agent-001"], clock, payload={"delay": 45}))
        assert [e.payload for e in forwarded] == [{"delay": 45}]


class TestRouteRequest:

    def _responder(self, broker, key, clock, delay=0.0, reply_to="coordinator-agent-main"):
        def respond(env):
            clock.advance(delay)
            broker.publish(_signed(key, clock, topic=reply_topic(reply_to), message_type=MessageType.RESPONSE,
                                   payload={"booked": env.payload["flight"]},
                                   correlation_id=env.correlation_id))
        return respond

    def _request(self, keys, clock, correlation_id="corr-1"):
        return _signed(keys["coordinator-agent-main"], clock,
                       topic=capability_topic("flight-agent-001", "flightBooking"),
                       message_type=MessageType.REQUEST, payload={"flight": "NH007"},
                       correlation_id=correlation_id)

    def test_four_step_exchange(self, broker, keys, clock):
        broker.subscribe("flight-agent-001", "capability.flight-agent-001.*")
        broker.connect("flight-agent-001", self._responder(broker, keys["flight-agent-001"], clock))
        response = broker.route_request(self._request(keys, clock))
        assert response.message_type is MessageType.RESPONSE
        assert response.correlation_id == "corr-1"
        assert response.payload == {"booked": "NH007"}
        events = [e["event"] for e in broker.trace()]
        assert "response" in events

    def test_late_response_times_out_and_is_dropped(self, broker, keys, clock):
        broker.subscribe("flight-agent-001", "capability.flight-agent-001.*")
        broker.connect("flight-agent-001", self._responder(broker, keys["flight-agent-001"], clock, delay=6.0))
        with pytest.raises(RequestTimeout):
            broker.route_request(self._request(keys, clock))
        dropped = [e for e in broker.trace() if e["event"] == "late-response-dropped"]
        assert len(dropped) == 1
        assert dropped[0]["correlationId"] == "corr-1"

    def test_response_after_timeout_is_dropped(self, trust, clock, keys):
        broker = UMBBroker(trust, clock, BrokerConfig(request_deadline=5.0))
        broker.subscribe("flight-agent-001", "capability.flight-agent-001.*")
        broker.subscribe("coordinator-agent-main", "reply.coordinator-agent-main")
        # 无人应答：等待预算耗尽后超时
        clock.real_wait = 0.01
        with pytest.raises(RequestTimeout):
            broker.route_request(self._request(keys, clock, "corr-2"))
        late = _signed(keys["flight-agent-001"], clock, topic=reply_topic("coordinator-agent-main"),
                       message_type=MessageType.RESPONSE, correlation_id="corr-2")
        assert broker.publish(late) == []
        assert broker.queue_depth("coordinator-agent-main") == 0

    def test_no_subscriber(self, broker, keys, clock):
        with pytest.raises(NoSubscriber):
            broker.route_request(self._request(keys, clock))

    def test_rejects_non_request(self, broker, keys, clock):
        env = _signed(keys["coordinator-agent-main"], clock, correlation_id="corr-3")
        with pytest.raises(MalformedEnvelope):
            broker.route_request(env)

    def test_requires_correlation_id(self, broker, keys, clock):
        env = self._request(keys, clock, correlation_id=None)
        with pytest.raises(MalformedEnvelope):
            broker.route_request(env)

    def test_target_must_match_topic(self, broker, keys, clock):
        broker.subscribe("flight-agent-001", "#")
        with pytest.raises(MalformedEnvelope):
            broker.route_request(self._request(keys, clock), target="capability.hotel-agent-002.hotelBooking")
