"""Signed attestation results (EAR-style) and the relying-party check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import cbor
from .appraisal import Rule, RuleOutcome, Tier, TrustVector

EAR_DOMAIN = b"trustmee-ear-v1"
EAR_MEDIA_TYPE = "application/vnd.trustmee.ear+cbor"


class ResultError(Exception):
    code = "ResultError"


class UntrustedVerifier(ResultError):
    code = "UntrustedVerifier"


class BadSignature(ResultError):
    code = "BadSignature"


class MalformedResult(ResultError):
    code = "Malformed"


@dataclass(frozen=True)
class AttestationResult:
    issued_at: int
    verifier_id: str
    policy_id: str
    nonce_echo: bytes
    claims: dict
    trust_vector: TrustVector
    rule_outcomes: list[RuleOutcome] = field(default_factory=list)

    @property
    def status(self) -> Tier:
        return self.trust_vector.status

    def to_dict(self) -> dict:
        return {
            "iat": self.issued_at,
            "verifier": self.verifier_id,
            "policy_id": self.policy_id,
            "nonce": self.nonce_echo,
            "claims": self.claims,
            "trust_vector": self.trust_vector.to_dict(),
            "rule_outcomes": [o.to_dict() for o in self.rule_outcomes],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> AttestationResult:
        try:
            outcomes = [
                RuleOutcome(Rule(o["claim_path"], o["op"], o["reference_key"], o["category"]), o["passed"], o["reason"])
                for o in doc["rule_outcomes"]
            ]
            result = cls(
                doc["iat"], doc["verifier"], doc["policy_id"], doc["nonce"], doc["claims"],
                TrustVector.from_dict(doc["trust_vector"]), outcomes,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResult(f"malformed attestation result: {exc}") from exc
        if not isinstance(result.nonce_echo, bytes) or not isinstance(result.claims, dict):
            raise MalformedResult("malformed attestation result: wrong field types")
        return result


@dataclass(frozen=True)
class SignedResult:
    payload: bytes
    signature: bytes
    verifier_public_key: bytes

    def to_cbor(self) -> bytes:
        return cbor.dumps({"payload": self.payload, "sig": self.signature, "kid": self.verifier_public_key})

    @classmethod
    def from_cbor(cls, raw: bytes) -> SignedResult:
        try:
            doc = cbor.loads(raw)
        except cbor.CborError as exc:
            raise MalformedResult(str(exc)) from exc
        if not isinstance(doc, dict) or set(doc) != {"payload", "sig", "kid"}:
            raise MalformedResult("signed result must have keys payload, sig, kid")
        if not all(isinstance(doc[k], bytes) for k in doc):
            raise MalformedResult("signed result fields must be byte strings")
        return cls(doc["payload"], doc["sig"], doc["kid"])


def public_key_bytes(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def emit(result: AttestationResult, signing_key: Ed25519PrivateKey) -> SignedResult:
    payload = cbor.dumps(result.to_dict())
    return SignedResult(payload, signing_key.sign(EAR_DOMAIN + payload), public_key_bytes(signing_key))


def verify_result(sr: SignedResult | bytes, trusted_verifier_keys: Iterable[bytes]) -> AttestationResult:
    """Decode a result iff it carries a valid signature from a trusted verifier."""
    if isinstance(sr, (bytes, bytearray)):
        sr = SignedResult.from_cbor(bytes(sr))
    if sr.verifier_public_key not in set(trusted_verifier_keys):
        raise UntrustedVerifier("result was not issued by a trusted verifier key")
    try:
        Ed25519PublicKey.from_public_bytes(sr.verifier_public_key).verify(sr.signature, EAR_DOMAIN + sr.payload)
    except (InvalidSignature, ValueError) as exc:
        raise BadSignature("result signature does not verify") from exc
    try:
        doc = cbor.loads(sr.payload)
    except cbor.CborError as exc:
        raise MalformedResult(str(exc)) from exc
    if not isinstance(doc, dict):
        raise MalformedResult("result payload must be a map")
    return AttestationResult.from_dict(doc)
