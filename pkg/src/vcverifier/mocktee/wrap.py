"""Attester-side helper: wrap raw evidence into a verifier request."""

from __future__ import annotations

from ..cmw import Format, WrappedEvidence, build_collection, encode_request


def wrap_for_trustmee(
    evidence: bytes,
    endorsements: list[bytes],
    component_ref: str,
    policy_id: str,
    nonce: bytes,
    staple_component: bytes | None = None,
    *,
    fmt: Format = "cbor",
) -> bytes:
    wrapped = WrappedEvidence(evidence, component_ref, policy_id, nonce)
    return encode_request(build_collection(wrapped, list(endorsements), staple_component), fmt)
