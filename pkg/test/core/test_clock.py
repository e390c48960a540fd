from datetime import timedelta

import pytest

from src.core.clock import SimulatedClock, SystemClock, elapsed_seconds
from src.core.errors import ModxError, RequestTimeout, StaleVersion
from src.core.model import format_instant, parse_instant


def test_simulated_clock_starts_at_given_instant():
    clock = SimulatedClock("2025-05-17T09:42:17Z")
    assert format_instant(clock.now()) == "2025-05-17T09:42:17.000Z"


def test_advance_moves_forward():
    clock = SimulatedClock("2025-05-17T09:42:17Z")
    clock.advance(1.25)
    assert format_instant(clock.now()) == "2025-05-17T09:42:18.250Z"


def test_advance_rejects_negative():
    with pytest.raises(ValueError):
        SimulatedClock().advance(-1)


def test_advance_to_never_goes_back():
    clock = SimulatedClock("2025-05-17T09:42:17Z")
    start = clock.now()
    clock.advance_to(start - timedelta(seconds=30))
    assert clock.now() == start
    clock.advance_to(start + timedelta(seconds=30))
    assert elapsed_seconds(start, clock.now()) == 30


def test_wait_budget_is_capped():
    assert SimulatedClock(real_wait=0.2).wait_budget(5.0) == 0.2
    assert SystemClock().wait_budget(5.0) == 5.0


def test_system_clock_is_utc_milliseconds():
    now = SystemClock().now()
    assert now.utcoffset() == timedelta(0)
    assert now.microsecond % 1000 == 0
    assert parse_instant(format_instant(now)) == now


def test_error_doc_shape():
    error = StaleVersion("旧版本", agentId="flight-agent-001", existing="1.2.0")
    assert error.to_doc() == {
        "error": "StaleVersion",
        "message": "旧版本",
        "details": {"agentId": "flight-agent-001", "existing": "1.2.0"},
    }
    assert isinstance(error, ModxError)


def test_timeout_uses_protocol_name():
    assert RequestTimeout().to_doc()["error"] == "Timeout"
    assert str(RequestTimeout("late")) == "Timeout: late"
