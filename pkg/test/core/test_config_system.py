import json

import pytest

from conftest import fixture_path
from src.broker.umb_broker import BrokerConfig
from src.config_system import ModxConfig, ServiceFactory
from src.core.clock import SimulatedClock, SystemClock
from src.discovery.capability_registry import CapabilityRegistry
from src.discovery.scoring import SynthesisWeights


def _local_config(tmp_path, **overrides):
    config = ModxConfig({
        'embedder': {'synonymsFile': fixture_path('synonyms.json')},
        'discovery': {'ontologyFile': fixture_path('ontology.json'),
                      'constraintCatalog': fixture_path('concepts', 'constraints.json')},
        'paths': {'agents': fixture_path('agents'), 'alignments': fixture_path('alignment')},
    })
    if overrides:
        config.update_params(overrides)
    return config


class TestModxConfig:

    def test_defaults(self):
        config = ModxConfig()
        assert config.get_all_sections() == ['broker', 'embedder', 'discovery', 'ledger', 'orchestrator', 'paths']
        assert config.broker_config() == BrokerConfig()
        assert config.discovery_config().weights == SynthesisWeights(0.4, 0.4, 0.2)
        assert config.orchestrator_config().substitute_depth == 2

    def test_overrides_merge_per_key(self):
        config = ModxConfig({'broker': {'requestDeadline': 2.0}})
        broker = config.get_section('broker')
        assert broker['requestDeadline'] == 2.0
        assert broker['retentionWindow'] == 300

    def test_sections_are_copies(self):
        config = ModxConfig()
        config.get_section('ledger')['blockSize'] = 1
        assert config.get_section('ledger')['blockSize'] == 16

    def test_unknown_section(self):
        with pytest.raises(ValueError):
            ModxConfig({'metrics': {}})
        with pytest.raises(ValueError):
            ModxConfig().get_section('metrics')

    def test_save_and_load(self, tmp_path):
        path = tmp_path / 'nested' / 'modx.json'
        ModxConfig({'ledger': {'blockSize': 4}}).save_config(str(path))
        assert json.loads(path.read_text(encoding='utf-8'))['ledger']['blockSize'] == 4
        assert ModxConfig.load_config(str(path)).ledger_config().block_size == 4

    def test_missing_file_uses_defaults(self, tmp_path):
        config = ModxConfig.load_config(str(tmp_path / 'absent.json'))
        assert config.params == ModxConfig().params

    def test_non_object_file(self, tmp_path):
        path = tmp_path / 'list.json'
        path.write_text('[1, 2]', encoding='utf-8')
        with pytest.raises(ValueError):
            ModxConfig.load_config(str(path))

    def test_shipped_config_matches_defaults(self):
        assert ModxConfig.load_config(fixture_path('..', 'config', 'modx_config.json')).params == \
            ModxConfig().params


class TestServiceFactory:

    def test_clock_types(self):
        factory = ServiceFactory()
        assert isinstance(factory.create_clock('system'), SystemClock)
        clock = factory.create_clock('simulated', '2025-05-17T09:42:17Z')
        assert isinstance(clock, SimulatedClock)
        with pytest.raises(ValueError):
            factory.create_clock('lunar')

    def test_builds_connected_services(self, tmp_path):
        factory = ServiceFactory(_local_config(tmp_path, ledger={'blockSize': 4}))
        trust = factory.create_trust(factory.create_clock('simulated'), seed=7)
        assert trust.config.block_size == 4
        broker = factory.create_broker(trust)
        assert broker.trust is trust
        registry = factory.create_registry(trust)
        assert isinstance(registry, CapabilityRegistry)
        assert registry.dimension == 64

    def test_alignment_files(self, tmp_path):
        assert ServiceFactory(_local_config(tmp_path)).alignment_files() == \
            [fixture_path('alignment', 'aidl-reference-4d.json')]
        empty = _local_config(tmp_path, paths={'alignments': str(tmp_path / 'none')})
        assert ServiceFactory(empty).alignment_files() == []

    def test_missing_synonyms_file_is_tolerated(self, tmp_path):
        config = _local_config(tmp_path, embedder={'synonymsFile': str(tmp_path / 'absent.json')})
        assert ServiceFactory(config).create_embedder().dimension == 64
