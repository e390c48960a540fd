"""
版本向量
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping


class Causality(str, Enum):
    BEFORE = "before"
    AFTER = "after"
    EQUAL = "equal"
    CONCURRENT = "concurrent"


@dataclass(frozen=True)
class VersionVector:
    """不可变的 AgentId → 计数器映射，缺省计数视为 0"""

    counters: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        cleaned: Dict[str, int] = {}
        for agent, count in dict(self.counters).items():
            if not isinstance(count, int) or isinstance(count, bool) or count < 0:
                raise ValueError(f"版本计数必须是非负整数: {agent}={count!r}")
            if count:
                cleaned[agent] = count
        object.__setattr__(self, "counters", cleaned)

    def get(self, agent: str) -> int:
        return self.counters.get(agent, 0)

    def increment(self, agent: str) -> "VersionVector":
        return VersionVector({**self.counters, agent: self.get(agent) + 1})

    def merge(self, other: "VersionVector") -> "VersionVector":
        agents = set(self.counters) | set(other.counters)
        return VersionVector({a: max(self.get(a), other.get(a)) for a in agents})

    def compare(self, other: "VersionVector") -> Causality:
        agents = set(self.counters) | set(other.counters)
        newer = any(self.get(a) > other.get(a) for a in agents)
        older = any(self.get(a) < other.get(a) for a in agents)
        if newer and older:
            return Causality.CONCURRENT
        if newer:
            return Causality.AFTER
        if older:
            return Causality.BEFORE
        return Causality.EQUAL

    def dominates(self, other: "VersionVector") -> bool:
        """严格支配：每个分量 ≥ 且至少一个 >"""
        return self.compare(other) is Causality.AFTER

    def to_doc(self) -> Dict[str, int]:
        return dict(sorted(self.counters.items()))

    @classmethod
    def from_doc(cls, doc: Mapping[str, int]) -> "VersionVector":
        return cls(dict(doc))

    def __str__(self) -> str:
        return str(self.to_doc())
