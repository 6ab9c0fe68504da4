"""Component measurement, embedded signatures and the signer trust store."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import cbor

SIG_SECTION = "trustmee-sig"
SIG_DOMAIN = b"trustmee-component-v1"
WASM_HEADER = b"\x00asm\x01\x00\x00\x00"


class MalformedContainer(ValueError):
    pass


@dataclass(frozen=True)
class ExecutionPolicy:
    fuel_budget: int = 500_000_000
    network_allowed: bool = False
    max_memory_bytes: int = 64 * 1024 * 1024
    wall_clock_limit_ms: int = 2_000

    def __post_init__(self) -> None:
        if self.fuel_budget <= 0:
            raise ValueError("fuel_budget must be positive")
        if self.max_memory_bytes <= 0 or self.wall_clock_limit_ms <= 0:
            raise ValueError("memory and wall-clock limits must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> ExecutionPolicy:
        unknown = set(doc) - {"fuel_budget", "network_allowed", "max_memory_bytes", "wall_clock_limit_ms"}
        if unknown:
            raise ValueError(f"unknown execution policy fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "fuel_budget": self.fuel_budget,
            "network_allowed": self.network_allowed,
            "max_memory_bytes": self.max_memory_bytes,
            "wall_clock_limit_ms": self.wall_clock_limit_ms,
        }


DEFAULT_POLICY = ExecutionPolicy()


@dataclass(frozen=True)
class ComponentIdentity:
    hash: bytes
    signer: bytes | None = None

    @property
    def hash_hex(self) -> str:
        return self.hash.hex()

    @property
    def signer_hex(self) -> str | None:
        return self.signer.hex() if self.signer is not None else None


@dataclass(frozen=True)
class SignatureEnvelope:
    signer_public_key: bytes
    expiry: int
    signature: bytes

    def to_cbor(self) -> bytes:
        return cbor.dumps({"key": self.signer_public_key, "exp": self.expiry, "sig": self.signature})

    @classmethod
    def from_cbor(cls, raw: bytes) -> SignatureEnvelope:
        obj = cbor.loads(raw)
        if not isinstance(obj, dict) or set(obj) != {"key", "exp", "sig"}:
            raise ValueError("signature envelope must have keys key, exp, sig")
        key, exp, sig = obj["key"], obj["exp"], obj["sig"]
        if not (isinstance(key, bytes) and len(key) == 32):
            raise ValueError("signer key must be 32 bytes")
        if not (isinstance(sig, bytes) and len(sig) == 64):
            raise ValueError("signature must be 64 bytes")
        if isinstance(exp, bool) or not isinstance(exp, int) or exp < 0:
            raise ValueError("expiry must be a non-negative integer")
        return cls(key, exp, sig)


def signed_message(expiry: int, measurement: bytes) -> bytes:
    return SIG_DOMAIN + expiry.to_bytes(8, "big") + measurement


@dataclass(frozen=True)
class TrustStore:
    entries: dict[bytes, ExecutionPolicy] = field(default_factory=dict)
    default_policy: ExecutionPolicy = DEFAULT_POLICY

    def __post_init__(self) -> None:
        if self.default_policy.network_allowed:
            raise ValueError("the default execution policy must not allow network access")

    def policy_for(self, signer: bytes | None) -> ExecutionPolicy:
        if signer is None:
            return self.default_policy
        return self.entries.get(signer, self.default_policy)

    @classmethod
    def from_dict(cls, doc: dict) -> TrustStore:
        """Parse ``{"default": {...}, "signers": {"<hex key>": {...}}}``.

        Signer entries inherit unspecified fields from the default policy.
        """
        default = replace(DEFAULT_POLICY, **doc.get("default", {}))
        entries = {}
        for key_hex, fields in doc.get("signers", {}).items():
            key = bytes.fromhex(key_hex)
            if len(key) != 32:
                raise ValueError(f"signer key {key_hex!r} is not 32 bytes")
            entries[key] = ExecutionPolicy.from_dict({**default.to_dict(), **fields})
        return cls(entries, default)

    @classmethod
    def load(cls, path: str | Path) -> TrustStore:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "default": self.default_policy.to_dict(),
            "signers": {k.hex(): p.to_dict() for k, p in self.entries.items()},
        }


class TrustStoreHolder:
    """Atomically swappable reference to the current trust store."""

    def __init__(self, store: TrustStore | None = None) -> None:
        self._store = store or TrustStore()
        self._lock = threading.Lock()

    def get(self) -> TrustStore:
        return self._store

    def replace(self, store: TrustStore) -> None:
        with self._lock:
            self._store = store


def _read_leb(data: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    for _ in range(5):
        if pos >= len(data):
            raise MalformedContainer("truncated LEB128")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
    raise MalformedContainer("LEB128 too long")


def _leb(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _sections(data: bytes):
    """Yield (start, end, section id, custom name or None, payload start)."""
    if not data.startswith(WASM_HEADER):
        raise MalformedContainer("missing wasm header")
    pos = len(WASM_HEADER)
    while pos < len(data):
        start = pos
        section_id = data[pos]
        size, body = _read_leb(data, pos + 1)
        end = body + size
        if end > len(data):
            raise MalformedContainer("section extends past end of module")
        name = None
        payload = body
        if section_id == 0:
            name_len, name_start = _read_leb(data, body)
            payload = name_start + name_len
            if payload > end:
                raise MalformedContainer("custom section name overruns section")
            try:
                name = data[name_start:payload].decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedContainer("custom section name is not UTF-8") from exc
        yield start, end, section_id, name, payload
        pos = end


def strip_signature(component: bytes) -> bytes:
    """Remove every ``trustmee-sig`` custom section; other bytes are untouched."""
    out = bytearray(WASM_HEADER)
    for start, end, _sid, name, _payload in _sections(component):
        if name != SIG_SECTION:
            out += component[start:end]
    return bytes(out)


def signature_envelopes(component: bytes) -> list[bytes]:
    return [component[payload:end] for _s, end, _sid, name, payload in _sections(component) if name == SIG_SECTION]


def measure(component: bytes) -> bytes:
    return hashlib.sha256(strip_signature(component)).digest()


def sign_component(component: bytes, signing_key: Ed25519PrivateKey, expiry: int) -> bytes:
    """Return ``component`` with any existing envelope replaced by a fresh one."""
    stripped = strip_signature(component)
    digest = hashlib.sha256(stripped).digest()
    signature = signing_key.sign(signed_message(expiry, digest))
    public = signing_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    envelope = SignatureEnvelope(public, expiry, signature).to_cbor()
    name = SIG_SECTION.encode()
    body = _leb(len(name)) + name + envelope
    return stripped + b"\x00" + _leb(len(body)) + body


def _envelope_valid(env: SignatureEnvelope, digest: bytes, now: float) -> bool:
    if now > env.expiry:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(env.signer_public_key).verify(
            env.signature, signed_message(env.expiry, digest)
        )
    except (InvalidSignature, ValueError):
        return False
    return True


def measure_and_identify(
    component: bytes, store: TrustStore, now: float | None = None
) -> tuple[ComponentIdentity, ExecutionPolicy]:
    """Measure a component and decide which execution policy it runs under.

    The signer is recorded only when an unexpired envelope verifies and its
    key is in the trust store; every other case falls back to the default
    policy with no signer.
    """
    if not component:
        raise ValueError("component bytes must be non-empty")
    now = time.time() if now is None else now
    try:
        stripped = strip_signature(component)
        raw_envelopes = signature_envelopes(component)
    except MalformedContainer:
        # unparseable containers still get a stable measurement; compile rejects them
        return ComponentIdentity(hashlib.sha256(component).digest()), store.default_policy
    digest = hashlib.sha256(stripped).digest()
    for raw in raw_envelopes:
        try:
            env = SignatureEnvelope.from_cbor(raw)
        except (ValueError, cbor.CborError):
            continue
        if env.signer_public_key in store.entries and _envelope_valid(env, digest, now):
            return ComponentIdentity(digest, env.signer_public_key), store.entries[env.signer_public_key]
    return ComponentIdentity(digest), store.default_policy
