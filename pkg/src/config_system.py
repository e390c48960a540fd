import copy
import json
import os
import logging
from typing import Dict, Any, Optional, List

from src.utils import convert_numpy_types, load_json

logger = logging.getLogger(__name__)


def _deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ModxConfig:
    """运行参数配置类，按 broker/embedder/discovery/ledger/orchestrator/paths 分节管理"""

    def __init__(self, overrides: Optional[Dict[str, Dict[str, Any]]] = None):
        """初始化配置

        Args:
            overrides: 按节覆盖的参数字典，例如 {"broker": {"requestDeadline": 2.0}}
        """
        self.default_params = {
            # 消息总线
            'broker': {
                'retentionWindow': 300,          # 离线消息保留秒数
                'maxQueuePerSubscriber': 1000,   # 每个订阅者的最大排队条数
                'fallbackPollInterval': 2.0,     # HTTP 轮询建议间隔（秒）
                'requestDeadline': 5.0,          # 请求/响应期限（秒）
                'maxClockSkew': 60.0,            # 信封时间戳允许偏离总线时钟的秒数
                'bindHost': '127.0.0.1',         # 传输服务监听地址
                'bindPort': 8765,                # 传输服务监听端口
            },

            # 共享嵌入器
            'embedder': {
                'dimension': 64,                 # 嵌入维度
                'seed': 7,                       # 特征哈希种子
                'synonymsFile': 'fixtures/synonyms.json',  # 同义词组文件，为空则不做同义词归并
            },

            # 能力发现
            'discovery': {
                'weights': [0.4, 0.4, 0.2],      # 本体 / 向量 / 约束 三路权重
                'scoreFloor': 0.5,               # 低于此分的匹配不返回
                'ontologyDecay': 0.9,            # 每多一层子类的衰减系数
                'reputationMultiplier': False,   # 是否以信誉分作为乘数
                'ontologyFile': 'fixtures/ontology.json',
                'constraintCatalog': 'fixtures/concepts/constraints.json',
            },

            # 信任账本
            'ledger': {
                'blockSize': 16,                 # 每块最多记录数
                'sealInterval': 10,              # 封块间隔（秒）
                'anchorInterval': 10,            # 常规消息锚定间隔（秒）
            },

            # 工作流编排
            'orchestrator': {
                'maxWorkers': 4,                 # 每层并发的最大线程数
                'substituteDepth': 2,            # 替换候选的最大深度
                'retryBackoff': 1.0,             # 重试前的退避秒数
                'freshRetriesOnSubstitute': True,  # 换候选后重试次数是否清零
            },

            # 数据目录
            'paths': {
                'agents': 'fixtures/agents',     # AIDL 智能体定义目录
                'concepts': 'fixtures/concepts',  # 概念映射表目录
                'alignments': 'fixtures/alignment',  # 外部嵌入模型的锚点文件目录
            },
        }
        self.params = copy.deepcopy(self.default_params)
        if overrides:
            self.update_params(overrides)

    def get_section(self, section: str) -> Dict[str, Any]:
        """获取某一节的参数（副本）

        Args:
            section: 节名

        Returns:
            参数字典
        """
        if section not in self.params:
            raise ValueError(f"不支持的配置节: {section}")
        return copy.deepcopy(self.params[section])

    def update_params(self, overrides: Dict[str, Dict[str, Any]]) -> None:
        unknown = sorted(set(overrides) - set(self.default_params))
        if unknown:
            raise ValueError(f"不支持的配置节: {', '.join(unknown)}")
        self.params = _deep_merge(self.params, overrides)

    def get_all_sections(self) -> List[str]:
        return list(self.params.keys())

    def save_config(self, config_path: str) -> None:
        """将配置保存到JSON文件

        Args:
            config_path: 配置文件路径
        """
        directory = os.path.dirname(config_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(config_path, 'w', encoding='utf-8') as f:
            json.dump(convert_numpy_types(self.params), f, indent=4, ensure_ascii=False)
        logger.info(f"配置已保存到: {config_path}")

    @classmethod
    def load_config(cls, file_path: str = 'config/modx_config.json') -> 'ModxConfig':
        """从JSON文件加载配置，文件不存在时使用默认配置

        Args:
            file_path: 配置文件路径

        Returns:
            ModxConfig实例
        """
        if not os.path.exists(file_path):
            logger.warning(f"配置文件不存在: {file_path}，将使用默认配置")
            return cls()
        data = load_json(file_path)
        if not isinstance(data, dict):
            raise ValueError(f"配置文件必须是 JSON 对象: {file_path}")
        instance = cls(data)
        logger.info(f"已从 {file_path} 加载配置")
        return instance

    # ---- 类型化视图 ----
    def broker_config(self):
        from src.broker.umb_broker import BrokerConfig
        return BrokerConfig.from_dict(self.params['broker'])

    def discovery_config(self):
        from src.discovery.capability_registry import DiscoveryConfig
        return DiscoveryConfig.from_dict(self.params['discovery'])

    def ledger_config(self):
        from src.trust.ledger import LedgerConfig
        return LedgerConfig.from_dict(self.params['ledger'])

    def orchestrator_config(self):
        from src.orchestrator.executor import OrchestratorConfig
        return OrchestratorConfig.from_dict(self.params['orchestrator'])


class ServiceFactory:
    """服务工厂，根据配置创建时钟、账本、总线、嵌入器与注册表"""

    def __init__(self, config: Optional[ModxConfig] = None):
        self.config = config or ModxConfig()

    def create_clock(self, clock_type: str = 'system', start: Optional[str] = None):
        if clock_type == 'system':
            from src.core.clock import SystemClock
            return SystemClock()
        elif clock_type == 'simulated':
            from src.core.clock import SimulatedClock
            return SimulatedClock(start) if start else SimulatedClock()
        else:
            raise ValueError(f"不支持的时钟类型: {clock_type}")

    def create_trust(self, clock, seed: Any = None):
        from src.trust.ledger import TrustLedger
        return TrustLedger(clock, self.config.ledger_config(), key_seed=seed)

    def create_broker(self, trust):
        from src.broker.umb_broker import UMBBroker
        return UMBBroker(trust, trust.clock, self.config.broker_config())

    def create_embedder(self):
        from src.translation.embedder import HashingEmbedder
        params = self.config.get_section('embedder')
        synonyms_file = params.get('synonymsFile')
        groups = None
        if synonyms_file:
            if os.path.exists(synonyms_file):
                groups = load_json(synonyms_file)
            else:
                logger.warning(f"同义词文件不存在: {synonyms_file}，嵌入器不做同义词归并")
        return HashingEmbedder.from_config(params, groups)

    def create_registry(self, trust, embedder=None):
        from src.discovery.capability_registry import CapabilityRegistry
        from src.discovery.ontology import OntologyGraph
        from src.translation.alignment import load_alignment
        from src.translation.constraints import ConstraintCatalog
        params = self.config.get_section('discovery')
        embedder = embedder or self.create_embedder()
        ontology_file = params.get('ontologyFile')
        ontology = OntologyGraph.load(ontology_file) if ontology_file and os.path.exists(ontology_file) \
            else OntologyGraph()
        catalog_file = params.get('constraintCatalog')
        catalog = ConstraintCatalog.load(catalog_file) if catalog_file and os.path.exists(catalog_file) \
            else ConstraintCatalog()
        registry = CapabilityRegistry(embedder.dimension, embedder, ontology, catalog, trust,
                                      self.config.discovery_config())
        for path in self.alignment_files():
            registry.add_alignment(load_alignment(path, embedder))
        return registry

    def alignment_files(self) -> List[str]:
        directory = self.config.get_section('paths').get('alignments')
        if not directory or not os.path.isdir(directory):
            return []
        return [os.path.join(directory, name) for name in sorted(os.listdir(directory)) if name.endswith('.json')]
