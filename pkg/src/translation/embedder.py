"""
确定性特征哈希嵌入

小写化、按非字母数字切分、同义词归一，每个词元用带种子的 MurmurHash3
映射到 [0, D) 的下标并取 ±1 符号，累加后做 L2 归一化。
"""
import logging
import re
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import mmh3
import numpy as np

from src.core.errors import EmptyText

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^\W_]+")
# 符号哈希使用的种子偏移
_SIGN_SALT = 0x5BD1E995


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


def load_synonym_groups(groups: Iterable[Sequence[str]]) -> Dict[str, str]:
    """同义词组 → 词元到组内首个词的映射"""
    table: Dict[str, str] = {}
    for group in groups:
        words = [w.lower() for w in group]
        if not words:
            continue
        for word in words:
            table.setdefault(word, words[0])
    return table


class HashingEmbedder:
    """
    词袋特征哈希嵌入器

    同一文本、同一种子在任何进程中都得到相同向量；词序无关。
    """

    def __init__(self, dimension: int = 64, seed: int = 7, synonyms: Optional[Mapping[str, str]] = None):
        if dimension < 1:
            raise ValueError(f"嵌入维度必须为正整数: {dimension}")
        if not 0 <= seed < 2 ** 32:
            raise ValueError(f"种子必须在 [0, 2^32) 内: {seed}")
        self.dimension = dimension
        self.seed = seed
        self.synonyms: Dict[str, str] = dict(synonyms or {})

    @classmethod
    def from_config(cls, params: Mapping, synonym_groups: Optional[Iterable[Sequence[str]]] = None) -> "HashingEmbedder":
        synonyms = load_synonym_groups(synonym_groups) if synonym_groups else None
        return cls(int(params.get("dimension", 64)), int(params.get("seed", 7)), synonyms)

    def canonical_tokens(self, text: str) -> List[str]:
        return [self.synonyms.get(token, token) for token in tokenize(text)]

    def _slot(self, token: str):
        index = mmh3.hash(token, self.seed, signed=False) % self.dimension
        sign = 1.0 if mmh3.hash(token, self.seed ^ _SIGN_SALT, signed=False) & 1 else -1.0
        return index, sign

    def embed(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise EmptyText("待嵌入的文本为空")
        tokens = self.canonical_tokens(text)
        vector = np.zeros(self.dimension, dtype=np.float64)
        if not tokens:
            # 只有标点符号，按去空白后的整句哈希
            index, sign = self._slot(" ".join(text.split()))
            vector[index] = sign
            logger.debug(f"文本中没有词元，改用整句哈希: {text!r}")
            return vector
        for token in tokens:
            index, sign = self._slot(token)
            vector[index] += sign
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            # 词元在同一槽位上正负抵消，退回整句哈希
            index, sign = self._slot(" ".join(sorted(tokens)))
            vector[index] = sign
            norm = 1.0
            logger.debug(f"词元哈希相互抵消，改用整句哈希: {text!r}")
        return vector / norm

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.vstack([self.embed(t) for t in texts]) if texts else np.zeros((0, self.dimension))
