"""
测试共享夹具
"""
import os

import pytest

from src.broker.umb_broker import BrokerConfig, UMBBroker
from src.core.clock import SimulatedClock
from src.translation.embedder import HashingEmbedder
from src.trust.ledger import LedgerConfig, TrustLedger
from src.utils import load_json

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))
FIXTURES_DIR = os.path.join(ROOT_DIR, 'fixtures')


def fixture_path(*parts: str) -> str:
    return os.path.join(FIXTURES_DIR, *parts)


@pytest.fixture
def fixtures_dir():
    return FIXTURES_DIR


@pytest.fixture
def load_fixture():
    def _load(*parts: str):
        return load_json(fixture_path(*parts))
    return _load


@pytest.fixture
def clock():
    return SimulatedClock("2025-05-17T09:42:17Z")


@pytest.fixture
def trust(clock):
    """按种子派生密钥的账本，签名可复现"""
    return TrustLedger(clock, LedgerConfig(block_size=16, seal_interval=10.0, anchor_interval=10.0), key_seed=7)


@pytest.fixture
def broker(trust, clock):
    return UMBBroker(trust, clock, BrokerConfig(request_deadline=5.0))


@pytest.fixture
def embedder():
    groups = load_json(fixture_path('synonyms.json'))
    return HashingEmbedder.from_config({'dimension': 64, 'seed': 7}, groups)
