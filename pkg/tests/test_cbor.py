import cbor2
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcverifier import cbor

scalars = (
    st.none()
    | st.booleans()
    | st.integers(min_value=-(2**64), max_value=2**64 - 1)
    | st.binary(max_size=64)
    | st.text(max_size=32)
)
values = st.recursive(
    scalars,
    lambda inner: st.lists(inner, max_size=5) | st.dictionaries(st.text(max_size=8), inner, max_size=5),
    max_leaves=30,
)


@settings(max_examples=500)
@given(values)
def test_round_trip(value):
    assert cbor.loads(cbor.dumps(value)) == value


@settings(max_examples=500)
@given(values)
def test_matches_cbor2_canonical_encoding(value):
    # text keys only: length-first and bytewise ordering coincide for them
    assert cbor.dumps(value) == cbor2.dumps(value, canonical=True)


@settings(max_examples=300)
@given(values)
def test_decodes_what_cbor2_writes(value):
    assert cbor.loads(cbor2.dumps(value)) == value


def test_map_keys_sorted_bytewise():
    encoded = cbor.dumps({"b": 1, "a": 2, "aa": 3})
    assert encoded == bytes.fromhex("a3") + cbor.dumps("a") + b"\x02" + cbor.dumps("b") + b"\x01" + cbor.dumps("aa") + b"\x03"


@pytest.mark.parametrize(
    "raw",
    [
        b"",
        b"\x5f\x41a\xff",  # indefinite byte string
        b"\x9f\x01\xff",  # indefinite array
        b"\xfb\x3f\xf0\x00\x00\x00\x00\x00\x00",  # float64
        b"\xc1\x01",  # tag
        b"\x01\x02",  # trailing byte
        b"\x5a\xff\xff\xff\xff",  # length beyond input
        b"\x9b\xff\xff\xff\xff\xff\xff\xff\xff",  # absurd array length
        b"\x62\xc3\x28",  # invalid utf-8
        b"\xa2\x61a\x01\x61a\x02",  # duplicate key
        b"\xa1\x80\x01",  # array as key
        b"\x1c",  # reserved additional info
    ],
)
def test_rejects_malformed(raw):
    with pytest.raises(cbor.CborError):
        cbor.loads(raw)


def test_duplicate_key_error_type():
    with pytest.raises(cbor.CborDuplicateKey):
        cbor.loads(b"\xa2\x61a\x01\x61a\x02")


def test_depth_limit():
    nested = b"\x81" * 10 + b"\x00"
    assert cbor.depth(cbor.loads(nested)) == 10
    with pytest.raises(cbor.CborError):
        cbor.loads(nested, max_depth=5)


def test_refuses_unencodable():
    with pytest.raises(cbor.CborError):
        cbor.dumps(1.5)
    with pytest.raises(cbor.CborError):
        cbor.dumps(2**64)


@settings(max_examples=2000)
@given(st.binary(max_size=64))
def test_random_bytes_agree_with_cbor2_when_accepted(raw):
    try:
        ours = cbor.loads(raw)
    except cbor.CborError:
        return
    assert cbor2.loads(raw) == ours
