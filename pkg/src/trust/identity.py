"""
智能体密码学身份

Ed25519 密钥对、自签名密钥证明、按时间段生效的密钥轮换历史，
以及 EdDSA 紧凑 JWS 安全令牌。
"""
import hashlib
import logging
import threading
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

from cryptography.exceptions import InvalidSignature as CryptoInvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey, Ed25519PublicKey,
)

from src.core.clock import Clock
from src.core.errors import DuplicateAgent, InvalidSignature, MalformedDocument, UnknownAgent
from src.core.model import (
    MessageEnvelope, b64url_decode, b64url_encode, canonicalize,
    format_instant, parse_doc, validate_agent_id,
)

logger = logging.getLogger(__name__)

JWS_HEADER = {"alg": "EdDSA", "typ": "JWT"}


def raw_public_bytes(public_key: Ed25519PublicKey) -> bytes:
    return public_key.public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )


def key_proof_payload(agent_id: str, public_key: bytes) -> bytes:
    """密钥证明覆盖的字节：(agentId, publicKey) 的规范化形式"""
    return canonicalize({"agentId": agent_id, "publicKey": b64url_encode(public_key)})


def verify_with(public_key: bytes, data: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
        return True
    except (CryptoInvalidSignature, ValueError):
        return False


class AgentKey:
    """持有私钥的签名方"""

    def __init__(self, agent_id: str, private_key: Ed25519PrivateKey):
        self.agent_id = validate_agent_id(agent_id)
        self._private_key = private_key
        self.public_key = raw_public_bytes(private_key.public_key())

    def sign(self, data: bytes) -> bytes:
        return self._private_key.sign(data)

    def sign_doc(self, doc: Any) -> bytes:
        return self.sign(canonicalize(doc))

    def sign_envelope(self, env: MessageEnvelope) -> MessageEnvelope:
        if env.sender != self.agent_id:
            raise InvalidSignature(f"{self.agent_id} 不能为 {env.sender} 的信封签名")
        return env.with_signature(self.sign(env.signing_bytes()))

    def key_proof(self) -> bytes:
        return self.sign(key_proof_payload(self.agent_id, self.public_key))


def derive_private_key(seed: Any, agent_id: str, generation: int = 0) -> Ed25519PrivateKey:
    """由种子确定性派生私钥，场景回放时所有签名因此可复现"""
    material = hashlib.sha256(f"{seed}:{agent_id}:{generation}".encode("utf-8")).digest()
    return Ed25519PrivateKey.from_private_bytes(material)


@dataclass(frozen=True)
class AgentIdentity:
    agent_id: str
    public_key: bytes
    registered_at: datetime
    key_proof: bytes
    generation: int = 0

    def proof_verifies(self) -> bool:
        return verify_with(self.public_key, key_proof_payload(self.agent_id, self.public_key), self.key_proof)

    def to_doc(self) -> Dict[str, Any]:
        return {
            "agentId": self.agent_id,
            "publicKey": b64url_encode(self.public_key),
            "registeredAt": format_instant(self.registered_at),
            "keyProof": b64url_encode(self.key_proof),
            "generation": self.generation,
        }


@dataclass
class _KeyPeriod:
    identity: AgentIdentity
    valid_from: Optional[datetime]
    valid_until: Optional[datetime] = None

    def covers(self, at: datetime) -> bool:
        if self.valid_from is not None and at < self.valid_from:
            return False
        return self.valid_until is None or at < self.valid_until


class IdentityRegistry:
    """
    公钥登记表

    每个智能体任一时刻只有一把有效密钥；轮换后旧密钥只对轮换前的时间戳有效。
    """

    def __init__(self, clock: Clock, seed: Any = None):
        self.clock = clock
        self.seed = seed
        self._history: Dict[str, List[_KeyPeriod]] = {}
        self._lock = threading.RLock()

    def generate(self, agent_id: str, rotate: bool = False) -> Tuple[AgentIdentity, AgentKey]:
        """生成新的密钥对，rotate=True 时替换已有密钥"""
        validate_agent_id(agent_id)
        with self._lock:
            history = self._history.get(agent_id)
            if history and not rotate:
                raise DuplicateAgent(f"智能体已存在: {agent_id}", agentId=agent_id)
            generation = len(history) if history else 0
            if self.seed is None:
                private_key = Ed25519PrivateKey.generate()
            else:
                private_key = derive_private_key(self.seed, agent_id, generation)
            key = AgentKey(agent_id, private_key)
            now = self.clock.now()
            identity = AgentIdentity(agent_id, key.public_key, now, key.key_proof(), generation)
            self._install(identity, now)
            logger.info(f"生成身份 {agent_id} (第 {generation} 代密钥)")
            return identity, key

    def register_public_key(self, agent_id: str, public_key: bytes, key_proof: bytes,
                            rotate: bool = False) -> AgentIdentity:
        """登记外部智能体自带的公钥，必须附带有效的自签名证明"""
        validate_agent_id(agent_id)
        if not verify_with(public_key, key_proof_payload(agent_id, public_key), key_proof):
            raise InvalidSignature(f"{agent_id} 的密钥证明无效", agentId=agent_id)
        with self._lock:
            history = self._history.get(agent_id)
            if history and not rotate:
                raise DuplicateAgent(f"智能体已存在: {agent_id}", agentId=agent_id)
            now = self.clock.now()
            identity = AgentIdentity(agent_id, public_key, now, key_proof, len(history) if history else 0)
            self._install(identity, now)
            return identity

    def _install(self, identity: AgentIdentity, now: datetime) -> None:
        history = self._history.setdefault(identity.agent_id, [])
        if history:
            history[-1].valid_until = now
            history.append(_KeyPeriod(identity, valid_from=now))
        else:
            # 首把密钥没有下界
            history.append(_KeyPeriod(identity, valid_from=None))

    def is_registered(self, agent_id: str) -> bool:
        with self._lock:
            return agent_id in self._history

    def agents(self) -> List[str]:
        with self._lock:
            return sorted(self._history)

    def active_identity(self, agent_id: str) -> AgentIdentity:
        with self._lock:
            history = self._history.get(agent_id)
            if not history:
                raise UnknownAgent(f"未登记的智能体: {agent_id}", agentId=agent_id)
            return history[-1].identity

    def history(self, agent_id: str) -> List[AgentIdentity]:
        with self._lock:
            return [p.identity for p in self._history.get(agent_id, [])]

    def public_key_for(self, agent_id: str, at: Optional[datetime] = None) -> Optional[bytes]:
        """返回在 at 时刻有效的公钥，不存在时返回 None"""
        with self._lock:
            history = self._history.get(agent_id)
            if not history:
                return None
            if at is None:
                return history[-1].identity.public_key
            for period in reversed(history):
                if period.covers(at):
                    return period.identity.public_key
            return None

    def verify(self, agent_id: str, data: bytes, signature: bytes, at: Optional[datetime] = None) -> bool:
        public_key = self.public_key_for(agent_id, at)
        if public_key is None or not signature:
            return False
        return verify_with(public_key, data, signature)

    def verify_envelope(self, env: MessageEnvelope) -> bool:
        return self.verify(env.sender, env.signing_bytes(), env.signature, at=env.timestamp)


def jws_compact(claims: Any, key: AgentKey) -> str:
    """EdDSA 紧凑 JWS：header.payload.signature，均为 base64url"""
    header = b64url_encode(canonicalize(JWS_HEADER))
    payload = b64url_encode(canonicalize(claims))
    signing_input = f"{header}.{payload}".encode("ascii")
    return f"{header}.{payload}.{b64url_encode(key.sign(signing_input))}"


def verify_jws(token: str, public_key: bytes) -> Any:
    """校验紧凑 JWS 并返回声明，失败时抛出 InvalidSignature"""
    parts = token.split(".") if isinstance(token, str) else []
    if len(parts) != 3:
        raise InvalidSignature("JWS 格式错误")
    header, payload, signature = parts
    try:
        if parse_doc(b64url_decode(header)) != JWS_HEADER:
            raise InvalidSignature("JWS 头部不是 EdDSA")
        if not verify_with(public_key, f"{header}.{payload}".encode("ascii"), b64url_decode(signature)):
            raise InvalidSignature("JWS 签名无效")
        return parse_doc(b64url_decode(payload))
    except (ValueError, MalformedDocument) as e:
        raise InvalidSignature(f"JWS 解码失败: {e}")
