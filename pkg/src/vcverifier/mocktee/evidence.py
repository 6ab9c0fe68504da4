"""MockTEE evidence generation and native reference verification."""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Literal

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.utils import decode_dss_signature, encode_dss_signature
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .. import cbor

Platform = Literal["A", "B"]
PLATFORMS: tuple[Platform, ...] = ("A", "B")

A_MAGIC = b"MTA1"
A_CERT_TAG = b"MTA-CERT"
A_EVIDENCE_LEN = 4 + 2 + 32 + 64 + 4 + 64
A_SIGNED_LEN = A_EVIDENCE_LEN - 64

B_HEADER = b"MTB1"
B_CERT_TAG = b"MTB-CERT"
B_TAG_HEADER, B_TAG_MEASUREMENT, B_TAG_REPORT_DATA, B_TAG_SVN, B_TAG_DEBUG, B_TAG_SIGNATURE = (
    0xB1, 0x10, 0x11, 0x12, 0x13, 0xF0,
)
B_LAYOUT = (
    (B_TAG_HEADER, 4),
    (B_TAG_MEASUREMENT, 48),
    (B_TAG_REPORT_DATA, 64),
    (B_TAG_SVN, 2),
    (B_TAG_DEBUG, 1),
    (B_TAG_SIGNATURE, 64),
)

MEASUREMENT_LEN = {"A": 32, "B": 48}
REPORT_DATA_LEN = 64


class ReferenceVerifyError(Exception):
    def __init__(self, code: str, detail: str = "") -> None:
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class KeyMaterial:
    """Platform signing key plus the certificate chain that endorses it."""

    platform: Platform
    chain_keys: tuple  # private keys, root first, platform key last
    not_before: int
    not_after: int

    @property
    def platform_key(self):
        return self.chain_keys[-1]

    @property
    def root_public(self) -> bytes:
        return _public_bytes(self.chain_keys[0])

    def endorsement(self) -> bytes:
        return self._chain

    @cached_property
    def _chain(self) -> bytes:
        # ECDSA signatures are randomized; build the chain once per key set
        certs = []
        for i, key in enumerate(self.chain_keys):
            issuer = self.chain_keys[max(i - 1, 0)]
            certs.append(_make_cert(self.platform, _public_bytes(key), issuer, self.not_before, self.not_after))
        return cbor.dumps(certs)


def _public_bytes(key) -> bytes:
    if isinstance(key, Ed25519PrivateKey):
        return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return key.public_key().public_bytes(Encoding.X962, PublicFormat.UncompressedPoint)


def _cert_tbs(platform: Platform, key: bytes, nbf: int, naf: int) -> bytes:
    tag = A_CERT_TAG if platform == "A" else B_CERT_TAG
    return tag + key + struct.pack(">QQ", nbf, naf)


def _sign(platform: Platform, key, msg: bytes) -> bytes:
    if platform == "A":
        return key.sign(msg)
    r, s = decode_dss_signature(key.sign(msg, ec.ECDSA(hashes.SHA256())))
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def _verify(platform: Platform, public: bytes, msg: bytes, sig: bytes) -> bool:
    try:
        if platform == "A":
            Ed25519PublicKey.from_public_bytes(public).verify(sig, msg)
        else:
            key = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), public)
            if len(sig) != 64:
                return False
            der = encode_dss_signature(int.from_bytes(sig[:32], "big"), int.from_bytes(sig[32:], "big"))
            key.verify(der, msg, ec.ECDSA(hashes.SHA256()))
    except (InvalidSignature, ValueError):
        return False
    return True


def _make_cert(platform: Platform, public: bytes, issuer, nbf: int, naf: int) -> dict:
    return {"key": public, "nbf": nbf, "naf": naf, "sig": _sign(platform, issuer, _cert_tbs(platform, public, nbf, naf))}


def generate_keys(
    platform: Platform, *, now: float | None = None, lifetime: int = 365 * 86400, expired: bool = False
) -> KeyMaterial:
    """Fresh key hierarchy. ``expired`` backdates the chain so it has lapsed."""
    now = int(time.time() if now is None else now)
    if expired:
        nbf, naf = now - 2 * lifetime, now - lifetime
    else:
        nbf, naf = now - 3600, now + lifetime
    if platform == "A":
        keys = (Ed25519PrivateKey.generate(), Ed25519PrivateKey.generate())
    elif platform == "B":
        keys = tuple(ec.generate_private_key(ec.SECP256R1()) for _ in range(3))
    else:
        raise ValueError(f"unknown platform {platform!r}")
    return KeyMaterial(platform, keys, nbf, naf)


def _tlv(tag: int, value: bytes) -> bytes:
    return bytes([tag]) + struct.pack(">H", len(value)) + value


def generate_evidence(
    platform: Platform,
    keys: KeyMaterial,
    measurement: bytes,
    report_data: bytes,
    *,
    tcb: int = 1,
    version: int = 1,
    debug: bool = False,
) -> tuple[bytes, bytes]:
    """Produce ``(evidence, endorsement)`` for a synthetic attester.

    ``report_data`` is zero-padded to 64 bytes. ``tcb`` is the TCB level
    for A and the SVN for B.
    """
    if keys.platform != platform:
        raise ValueError("key material belongs to another platform")
    if len(measurement) != MEASUREMENT_LEN[platform]:
        raise ValueError(f"measurement must be {MEASUREMENT_LEN[platform]} bytes")
    if len(report_data) > REPORT_DATA_LEN:
        raise ValueError("report_data exceeds 64 bytes")
    report_data = report_data.ljust(REPORT_DATA_LEN, b"\x00")
    if platform == "A":
        body = A_MAGIC + struct.pack(">H", version) + measurement + report_data + struct.pack(">I", tcb)
        evidence = body + _sign("A", keys.platform_key, body)
    else:
        body = (
            _tlv(B_TAG_HEADER, B_HEADER)
            + _tlv(B_TAG_MEASUREMENT, measurement)
            + _tlv(B_TAG_REPORT_DATA, report_data)
            + _tlv(B_TAG_SVN, struct.pack(">H", tcb))
            + _tlv(B_TAG_DEBUG, b"\x01" if debug else b"\x00")
        )
        evidence = body + _tlv(B_TAG_SIGNATURE, _sign("B", keys.platform_key, body))
    return evidence, keys.endorsement()


def collateral_locator(url: str) -> bytes:
    """Endorsement item telling the component to fetch its chain from ``url``."""
    return cbor.dumps({"url": url})


def _parse_a(ev: bytes) -> dict:
    if len(ev) != A_EVIDENCE_LEN or ev[:4] != A_MAGIC:
        raise ReferenceVerifyError("InvalidEvidence", "not a MockTEE-A report")
    version, = struct.unpack(">H", ev[4:6])
    tcb, = struct.unpack(">I", ev[102:106])
    return {
        "version": version,
        "measurement": ev[6:38],
        "report_data": ev[38:102],
        "tcb_level": tcb,
        "signed": ev[:A_SIGNED_LEN],
        "signature": ev[106:170],
    }


def _parse_b(ev: bytes) -> dict:
    fields = []
    pos = 0
    signed_end = 0
    for tag, want in B_LAYOUT:
        if len(ev) < pos + 3 or ev[pos] != tag:
            raise ReferenceVerifyError("InvalidEvidence", "not a MockTEE-B report")
        length, = struct.unpack(">H", ev[pos + 1:pos + 3])
        if length != want or len(ev) < pos + 3 + length:
            raise ReferenceVerifyError("InvalidEvidence", "not a MockTEE-B report")
        if tag == B_TAG_SIGNATURE:
            signed_end = pos
        fields.append(ev[pos + 3:pos + 3 + length])
        pos += 3 + length
    if pos != len(ev) or fields[0] != B_HEADER or fields[4][0] > 1:
        raise ReferenceVerifyError("InvalidEvidence", "not a MockTEE-B report")
    return {
        "measurement": fields[1],
        "report_data": fields[2],
        "svn": struct.unpack(">H", fields[3])[0],
        "debug": fields[4][0] == 1,
        "signed": ev[:signed_end],
        "signature": fields[5],
    }


def _parse_cert(platform: Platform, obj) -> dict | None:
    if not isinstance(obj, dict):
        return None
    key, sig, nbf, naf = obj.get("key"), obj.get("sig"), obj.get("nbf"), obj.get("naf")
    if not isinstance(key, bytes) or not isinstance(sig, bytes) or len(sig) != 64:
        return None
    if platform == "A" and len(key) != 32:
        return None
    if platform == "B" and (len(key) != 65 or key[0] != 0x04):
        return None
    for v in (nbf, naf):
        if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 2**64:
            return None
    return {"key": key, "sig": sig, "nbf": nbf, "naf": naf}


def _default_fetch(url: str) -> bytes:
    import httpx

    resp = httpx.get(url, timeout=5.0)
    resp.raise_for_status()
    return resp.content


def _resolve_collateral(item: bytes, fetch: Callable[[str], bytes] | None) -> bytes:
    try:
        obj = cbor.loads(item)
    except cbor.CborError:
        return item
    if not isinstance(obj, dict) or not isinstance(obj.get("url"), str):
        return item
    try:
        return (fetch or _default_fetch)(obj["url"])
    except Exception as exc:
        raise ReferenceVerifyError("EndorsementRejected", f"collateral fetch failed: {exc}") from exc


def native_reference_verify(
    platform: Platform,
    evidence: bytes,
    endorsements: list[bytes] | bytes,
    expected_report_data: bytes,
    *,
    now: float | None = None,
    fetch: Callable[[str], bytes] | None = None,
) -> dict:
    """Verify evidence natively; mirrors the sandboxed component check for check.

    Returns the attester claim map or raises :class:`ReferenceVerifyError`
    with code InvalidEvidence, EndorsementRejected or FreshnessMismatch.
    """
    if isinstance(endorsements, (bytes, bytearray)):
        endorsements = [bytes(endorsements)]
    now = int(time.time() if now is None else now)
    report = _parse_a(evidence) if platform == "A" else _parse_b(evidence)

    if not endorsements:
        raise ReferenceVerifyError("EndorsementRejected", "missing certificate chain")
    chain_raw = _resolve_collateral(endorsements[0], fetch)
    try:
        chain = cbor.loads(chain_raw)
    except cbor.CborError as exc:
        raise ReferenceVerifyError("EndorsementRejected", "malformed certificate chain") from exc
    if not isinstance(chain, list):
        raise ReferenceVerifyError("EndorsementRejected", "malformed certificate chain")
    links = 2 if platform == "A" else 3
    if len(chain) != links:
        raise ReferenceVerifyError("EndorsementRejected", f"chain must have {links} links")
    certs = [_parse_cert(platform, c) for c in chain]
    if any(c is None for c in certs):
        raise ReferenceVerifyError("EndorsementRejected", "malformed certificate")
    for i, cert in enumerate(certs):
        issuer = certs[max(i - 1, 0)]
        tbs = _cert_tbs(platform, cert["key"], cert["nbf"], cert["naf"])
        if not _verify(platform, issuer["key"], tbs, cert["sig"]):
            raise ReferenceVerifyError("EndorsementRejected", "certificate signature invalid")
    for cert in certs:
        if not cert["nbf"] <= now <= cert["naf"]:
            raise ReferenceVerifyError("EndorsementRejected", "certificate outside validity window")
    if not _verify(platform, certs[-1]["key"], report["signed"], report["signature"]):
        raise ReferenceVerifyError("InvalidEvidence", "report signature invalid")
    if len(expected_report_data) > REPORT_DATA_LEN or expected_report_data.ljust(
        REPORT_DATA_LEN, b"\x00"
    ) != report["report_data"]:
        raise ReferenceVerifyError("FreshnessMismatch", "report_data does not match")

    if platform == "A":
        return {
            "platform": "mocktee-a",
            "version": report["version"],
            "measurement": report["measurement"],
            "report_data": report["report_data"],
            "tcb_level": report["tcb_level"],
            "root_key": certs[0]["key"],
        }
    return {
        "platform": "mocktee-b",
        "measurement": report["measurement"],
        "report_data": report["report_data"],
        "svn": report["svn"],
        "debug": report["debug"],
        "root_key": certs[0]["key"],
    }
