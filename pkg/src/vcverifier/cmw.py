"""Attestation request envelope: a CMW collection carrying the wrapped
evidence, stapled endorsements and an optional stapled component."""

from __future__ import annotations

import base64
import binascii
import json
import re
from dataclasses import dataclass, field
from typing import Literal

from . import cbor

Format = Literal["cbor", "json"]

EVIDENCE_LABEL = "evidence"
COMPONENT_LABEL = "component"
ENDORSEMENT_PREFIX = "endorsement."

EVIDENCE_MEDIA_TYPE = "application/vnd.trustmee.evidence+cbor"
ENDORSEMENT_MEDIA_TYPE = "application/vnd.trustmee.endorsement"
COMPONENT_MEDIA_TYPE = "application/wasm"
CMW_CBOR_MEDIA_TYPE = "application/vnd.trustmee.cmw+cbor"
CMW_JSON_MEDIA_TYPE = "application/vnd.trustmee.cmw+json"

DEFAULT_SIZE_LIMIT = 64 * 1024 * 1024
MAX_REPORT_DATA = 64

_ENDORSEMENT_RE = re.compile(r"endorsement\.([1-9][0-9]*)")


class CmwError(Exception):
    """Base class for request envelope errors."""

    code = "Malformed"


class InvalidCollection(CmwError):
    code = "InvalidCollection"


class Malformed(CmwError):
    code = "Malformed"


class MissingEvidence(CmwError):
    code = "MissingEvidence"


class DuplicateLabel(CmwError):
    code = "DuplicateLabel"


class OversizedInput(CmwError):
    code = "OversizedInput"


class MalformedEvidenceItem(CmwError):
    code = "MalformedEvidenceItem"


@dataclass(frozen=True)
class CmwItem:
    media_type: str
    payload: bytes


@dataclass(frozen=True)
class CmwCollection:
    items: dict[str, CmwItem] = field(default_factory=dict)

    def labels(self) -> list[str]:
        return sorted(self.items, key=_label_order)


@dataclass(frozen=True)
class WrappedEvidence:
    """The evidence item: raw TEE evidence plus routing metadata."""

    tee_evidence: bytes
    component_id: str
    policy_id: str
    expected_report_data: bytes = b""

    def to_cbor(self) -> bytes:
        return cbor.dumps(
            {
                "ev": self.tee_evidence,
                "cid": self.component_id,
                "pid": self.policy_id,
                "erd": self.expected_report_data,
            }
        )

    @classmethod
    def from_cbor(cls, raw: bytes) -> WrappedEvidence:
        try:
            obj = cbor.loads(raw)
        except cbor.CborError as exc:
            raise MalformedEvidenceItem(str(exc)) from exc
        if not isinstance(obj, dict) or set(obj) != {"ev", "cid", "pid", "erd"}:
            raise MalformedEvidenceItem("evidence item must be a map with keys ev, cid, pid, erd")
        ev, cid, pid, erd = obj["ev"], obj["cid"], obj["pid"], obj["erd"]
        if not isinstance(ev, bytes) or not isinstance(erd, bytes):
            raise MalformedEvidenceItem("ev and erd must be byte strings")
        if not isinstance(cid, str) or not cid or not isinstance(pid, str) or not pid:
            raise MalformedEvidenceItem("cid and pid must be non-empty text")
        if len(erd) > MAX_REPORT_DATA:
            raise MalformedEvidenceItem("expected_report_data exceeds 64 bytes")
        return cls(ev, cid, pid, erd)


@dataclass(frozen=True)
class ExtractedRequest:
    evidence: WrappedEvidence
    endorsements: list[bytes]
    component: bytes | None


def _label_order(label: str) -> tuple[int, int, str]:
    if label == EVIDENCE_LABEL:
        return (0, 0, label)
    m = _ENDORSEMENT_RE.fullmatch(label)
    if m:
        return (1, int(m.group(1)), label)
    return (2, 0, label)


def _check_labels(labels: list[str], err: type[CmwError]) -> None:
    if EVIDENCE_LABEL not in labels:
        raise MissingEvidence("collection has no evidence item")
    indices = []
    for label in labels:
        if label in (EVIDENCE_LABEL, COMPONENT_LABEL):
            continue
        m = _ENDORSEMENT_RE.fullmatch(label)
        if not m:
            raise err(f"unknown label {label!r}")
        indices.append(int(m.group(1)))
    if sorted(indices) != list(range(1, len(indices) + 1)):
        raise err("endorsement labels must be dense from 1")


def _check_item(label: str, item: CmwItem, err: type[CmwError]) -> None:
    mt = item.media_type
    if not isinstance(mt, str) or not mt or not mt.isascii():
        raise err(f"{label}: media type must be non-empty ASCII")
    if not isinstance(item.payload, bytes) or not item.payload:
        raise err(f"{label}: payload must be non-empty bytes")


def validate(collection: CmwCollection, err: type[CmwError] = InvalidCollection) -> None:
    _check_labels(list(collection.items), err)
    for label, item in collection.items.items():
        _check_item(label, item, err)


def encode_request(collection: CmwCollection, fmt: Format = "cbor") -> bytes:
    try:
        validate(collection)
    except MissingEvidence as exc:
        raise InvalidCollection(str(exc)) from exc
    labels = collection.labels()
    if fmt == "cbor":
        return cbor.dumps(
            {label: [collection.items[label].media_type, collection.items[label].payload] for label in labels}
        )
    if fmt == "json":
        doc = {
            label: [
                collection.items[label].media_type,
                base64.b64encode(collection.items[label].payload).decode("ascii"),
            ]
            for label in labels
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")
    raise ValueError(f"unknown format {fmt!r}")


def _reject_duplicates(pairs: list[tuple[str, object]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateLabel(f"duplicate label {key!r}")
        out[key] = value
    return out


def decode_request(raw: bytes, fmt: Format = "cbor", *, size_limit: int = DEFAULT_SIZE_LIMIT) -> CmwCollection:
    """Parse an untrusted request body. Raises a :class:`CmwError` subclass."""
    if len(raw) > size_limit:
        raise OversizedInput(f"request of {len(raw)} bytes exceeds limit {size_limit}")
    if fmt == "cbor":
        try:
            doc = cbor.loads(raw)
        except cbor.CborDuplicateKey as exc:
            raise DuplicateLabel(str(exc)) from exc
        except cbor.CborError as exc:
            raise Malformed(str(exc)) from exc
    elif fmt == "json":
        try:
            doc = json.loads(raw, object_pairs_hook=_reject_duplicates)
        except DuplicateLabel:
            raise
        except (ValueError, RecursionError) as exc:
            raise Malformed(f"invalid JSON: {exc}") from exc
    else:
        raise ValueError(f"unknown format {fmt!r}")

    if not isinstance(doc, dict):
        raise Malformed("collection must be a map")
    items: dict[str, CmwItem] = {}
    for label, record in doc.items():
        if not isinstance(label, str):
            raise Malformed("labels must be text")
        if not isinstance(record, list) or len(record) != 2:
            raise Malformed(f"{label}: record must be [media_type, payload]")
        media_type, payload = record
        if fmt == "json":
            if not isinstance(payload, str):
                raise Malformed(f"{label}: payload must be base64 text")
            try:
                payload = base64.b64decode(payload, validate=True)
            except (binascii.Error, ValueError) as exc:
                raise Malformed(f"{label}: bad base64") from exc
        if not isinstance(media_type, str) or not isinstance(payload, bytes):
            raise Malformed(f"{label}: record has wrong types")
        items[label] = CmwItem(media_type, payload)
    collection = CmwCollection({label: items[label] for label in sorted(items, key=_label_order)})
    validate(collection, Malformed)
    return collection


def extract_evidence(collection: CmwCollection) -> ExtractedRequest:
    evidence = WrappedEvidence.from_cbor(collection.items[EVIDENCE_LABEL].payload)
    endorsements = [
        collection.items[label].payload for label in collection.labels() if label.startswith(ENDORSEMENT_PREFIX)
    ]
    component_item = collection.items.get(COMPONENT_LABEL)
    return ExtractedRequest(evidence, endorsements, component_item.payload if component_item else None)


def build_collection(
    evidence: WrappedEvidence, endorsements: list[bytes] = (), component: bytes | None = None
) -> CmwCollection:
    items = {EVIDENCE_LABEL: CmwItem(EVIDENCE_MEDIA_TYPE, evidence.to_cbor())}
    for i, endorsement in enumerate(endorsements, start=1):
        items[f"{ENDORSEMENT_PREFIX}{i}"] = CmwItem(ENDORSEMENT_MEDIA_TYPE, endorsement)
    if component is not None:
        items[COMPONENT_LABEL] = CmwItem(COMPONENT_MEDIA_TYPE, component)
    return CmwCollection(items)
