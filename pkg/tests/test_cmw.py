import base64
import json
import random

import cbor2
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcverifier import cbor, cmw
from vcverifier.cmw import CmwCollection, CmwItem, WrappedEvidence, build_collection
from vcverifier.mocktee.scenario import write_fixture_dir

media_types = st.text(alphabet=st.characters(min_codepoint=0x21, max_codepoint=0x7E), min_size=1, max_size=40)
payloads = st.binary(min_size=1, max_size=256)


@st.composite
def collections(draw):
    evidence = WrappedEvidence(
        draw(st.binary(max_size=200)),
        draw(st.text(min_size=1, max_size=40)),
        draw(st.text(min_size=1, max_size=20)),
        draw(st.binary(max_size=64)),
    )
    items = {"evidence": CmwItem(draw(media_types), evidence.to_cbor())}
    for i in range(1, draw(st.integers(0, 4)) + 1):
        items[f"endorsement.{i}"] = CmwItem(draw(media_types), draw(payloads))
    if draw(st.booleans()):
        items["component"] = CmwItem(draw(media_types), draw(payloads))
    return CmwCollection(items)


@settings(max_examples=300)
@given(collections(), st.sampled_from(["cbor", "json"]))
def test_round_trip(collection, fmt):
    assert cmw.decode_request(cmw.encode_request(collection, fmt), fmt) == collection


@settings(max_examples=100)
@given(collections())
def test_cbor_encoding_is_deterministic_and_canonical(collection):
    raw = cmw.encode_request(collection, "cbor")
    assert raw == cmw.encode_request(collection, "cbor")
    assert raw == cbor2.dumps(cbor2.loads(raw), canonical=True)


def test_empty_map_evidence_payload_round_trips():
    c = CmwCollection({"evidence": CmwItem(cmw.EVIDENCE_MEDIA_TYPE, cbor.dumps({}))})
    assert cmw.decode_request(cmw.encode_request(c)) == c


def test_json_base64_shape():
    c = build_collection(WrappedEvidence(b"\x00\x01", "sha256:" + "0" * 64, "p"), [b"chain"])
    doc = json.loads(cmw.encode_request(c, "json"))
    assert base64.b64decode(doc["endorsement.1"][1]) == b"chain"
    assert doc["endorsement.1"][0] == cmw.ENDORSEMENT_MEDIA_TYPE


@settings(max_examples=200)
@given(collections(), st.binary(min_size=1024, max_size=4096))
def test_json_expansion_for_large_payloads(collection, blob):
    items = dict(collection.items)
    items["component"] = CmwItem("application/wasm", blob)
    big = CmwCollection(items)
    assert len(cmw.encode_request(big, "json")) >= 1.25 * len(cmw.encode_request(big, "cbor"))


def test_logical_request_of_3257_bytes_expands_by_a_quarter():
    def request(chain_len):
        evidence = WrappedEvidence(random.randbytes(1200), "sha256:" + "a" * 64, "mocktee-a", b"n" * 64)
        return build_collection(evidence, [random.randbytes(chain_len)])

    # size the endorsement so the whole request is exactly 3,257 bytes
    pad = 3257 - len(cmw.encode_request(request(1800)))
    c = request(1800 + pad)
    raw = cmw.encode_request(c, "cbor")
    assert len(raw) == 3257
    assert len(cmw.encode_request(c, "json")) >= 1.25 * len(raw)


def test_fixture_request_length_matches_independent_encoder(tmp_path):
    write_fixture_dir(tmp_path)
    raw = (tmp_path / "req-mocktee-a.cbor").read_bytes()
    collection = cmw.decode_request(raw)
    ours = cmw.encode_request(collection)
    doc = {label: [item.media_type, item.payload] for label, item in collection.items.items()}
    theirs = cbor2.dumps(doc, canonical=True)
    assert len(ours) == len(theirs) == len(raw)
    assert ours == theirs


@pytest.mark.parametrize(
    "collection, error",
    [
        (CmwCollection({}), cmw.InvalidCollection),
        (CmwCollection({"endorsement.1": CmwItem("x", b"a")}), cmw.InvalidCollection),
        (CmwCollection({"evidence": CmwItem("x", b"a"), "endorsement.2": CmwItem("x", b"a")}), cmw.InvalidCollection),
        (CmwCollection({"evidence": CmwItem("", b"a")}), cmw.InvalidCollection),
        (CmwCollection({"evidence": CmwItem("x", b"")}), cmw.InvalidCollection),
        (CmwCollection({"evidence": CmwItem("x", b"a"), "other": CmwItem("x", b"a")}), cmw.InvalidCollection),
    ],
)
def test_encode_rejects_invalid(collection, error):
    with pytest.raises(error):
        cmw.encode_request(collection)


def _valid_request() -> bytes:
    c = build_collection(WrappedEvidence(b"ev" * 20, "sha256:" + "b" * 64, "pol", b"nonce"), [b"e1", b"e2"], b"comp")
    return cmw.encode_request(c)


def test_truncated_prefixes_are_malformed():
    raw = _valid_request()
    for n in range(len(raw)):
        with pytest.raises(cmw.Malformed):
            cmw.decode_request(raw[:n])


def test_decode_errors():
    with pytest.raises(cmw.MissingEvidence):
        cmw.decode_request(cbor.dumps({"endorsement.1": ["x", b"a"]}))
    with pytest.raises(cmw.DuplicateLabel):
        record = cbor.dumps("evidence") + cbor.dumps(["x", b"a"])
        cmw.decode_request(b"\xa2" + record + record)
    with pytest.raises(cmw.DuplicateLabel):
        cmw.decode_request(b'{"evidence":["x","YQ=="],"evidence":["x","YQ=="]}', "json")
    with pytest.raises(cmw.OversizedInput):
        cmw.decode_request(_valid_request(), size_limit=10)
    with pytest.raises(cmw.Malformed):
        cmw.decode_request(b'{"evidence":["x","not base64!"]}', "json")
    with pytest.raises(cmw.Malformed):
        cmw.decode_request(b"[1,2]", "json")


def test_extract_evidence_ordering_and_component():
    c = build_collection(WrappedEvidence(b"ev", "sha256:" + "c" * 64, "p"), [b"first", b"second"])
    got = cmw.extract_evidence(cmw.decode_request(cmw.encode_request(c)))
    assert got.endorsements == [b"first", b"second"]
    assert got.component is None
    lone = cmw.extract_evidence(build_collection(WrappedEvidence(b"ev", "x", "p")))
    assert lone.endorsements == [] and lone.component is None


def test_extract_evidence_orders_numerically():
    items = {"evidence": CmwItem("x", WrappedEvidence(b"e", "c", "p").to_cbor())}
    for i in range(1, 12):
        items[f"endorsement.{i}"] = CmwItem("x", bytes([i]))
    got = cmw.extract_evidence(CmwCollection(items))
    assert got.endorsements == [bytes([i]) for i in range(1, 12)]


def test_fixture_chain_is_extracted_verbatim(tmp_path):
    scenario = write_fixture_dir(tmp_path)
    got = cmw.extract_evidence(cmw.decode_request((tmp_path / "req-mocktee-a.cbor").read_bytes()))
    assert got.endorsements == [(tmp_path / "keys" / "mocktee-a-chain.cbor").read_bytes()]
    assert got.endorsements[0] == scenario["A"].keys.endorsement()
    assert got.component == scenario["A"].component


@pytest.mark.parametrize(
    "doc",
    [
        {"ev": b"", "cid": "", "pid": "p", "erd": b""},
        {"ev": b"", "cid": "c", "pid": "", "erd": b""},
        {"ev": b"", "cid": "c", "pid": "p", "erd": b"x" * 65},
        {"ev": "text", "cid": "c", "pid": "p", "erd": b""},
        {"ev": b"", "cid": "c", "pid": "p"},
        {"ev": b"", "cid": "c", "pid": "p", "erd": b"", "extra": 1},
    ],
)
def test_malformed_evidence_item(doc):
    c = CmwCollection({"evidence": CmwItem("x", cbor.dumps(doc))})
    with pytest.raises(cmw.MalformedEvidenceItem):
        cmw.extract_evidence(c)


def _second_decoder(raw: bytes):
    """Independent reading of the CBOR wire shape via cbor2."""
    doc = cbor2.loads(raw)
    return {label: CmwItem(rec[0], rec[1]) for label, rec in doc.items()}


def test_fuzz_random_and_mutated_inputs():
    rng = random.Random(1234)
    seed = _valid_request()
    for i in range(10_000):
        if i % 2:
            raw = rng.randbytes(rng.randrange(0, 200))
        else:
            buf = bytearray(seed)
            for _ in range(rng.randrange(1, 4)):
                buf[rng.randrange(len(buf))] = rng.randrange(256)
            raw = bytes(buf[: rng.randrange(1, len(buf) + 1)])
        try:
            c = cmw.decode_request(raw)
        except cmw.CmwError:
            continue
        assert c.items == _second_decoder(raw)
        try:
            cmw.extract_evidence(c)
        except cmw.MalformedEvidenceItem:
            pass
