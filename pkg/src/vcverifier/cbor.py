"""Deterministic CBOR encoding and a strict decoder for untrusted input.

Only the subset the verifier exchanges is supported: unsigned/negative
integers, byte strings, text strings, arrays, maps, booleans and null.
Encoding is canonical: shortest-form heads, definite lengths, map keys
sorted by their encoded bytes. Floating point, tags and indefinite-length
items are rejected in both directions.
"""

from __future__ import annotations

from typing import Any

MAX_DEPTH = 64

_MT_UINT, _MT_NINT, _MT_BYTES, _MT_TEXT, _MT_ARRAY, _MT_MAP, _MT_TAG, _MT_SIMPLE = range(8)


class CborError(ValueError):
    pass


class CborDuplicateKey(CborError):
    pass


def _head(major: int, value: int) -> bytes:
    if value < 24:
        return bytes([(major << 5) | value])
    if value < 0x100:
        return bytes([(major << 5) | 24, value])
    if value < 0x10000:
        return bytes([(major << 5) | 25]) + value.to_bytes(2, "big")
    if value < 0x100000000:
        return bytes([(major << 5) | 26]) + value.to_bytes(4, "big")
    if value < 0x10000000000000000:
        return bytes([(major << 5) | 27]) + value.to_bytes(8, "big")
    raise CborError("integer out of 64-bit range")


def _encode(obj: Any, out: bytearray, depth: int) -> None:
    if depth > MAX_DEPTH:
        raise CborError("nesting too deep")
    # bool before int: bool is an int subclass
    if obj is None:
        out.append(0xF6)
    elif obj is True:
        out.append(0xF5)
    elif obj is False:
        out.append(0xF4)
    elif isinstance(obj, int):
        if obj >= 0:
            out += _head(_MT_UINT, obj)
        else:
            out += _head(_MT_NINT, -1 - obj)
    elif isinstance(obj, (bytes, bytearray, memoryview)):
        raw = bytes(obj)
        out += _head(_MT_BYTES, len(raw))
        out += raw
    elif isinstance(obj, str):
        raw = obj.encode("utf-8")
        out += _head(_MT_TEXT, len(raw))
        out += raw
    elif isinstance(obj, (list, tuple)):
        out += _head(_MT_ARRAY, len(obj))
        for item in obj:
            _encode(item, out, depth + 1)
    elif isinstance(obj, dict):
        entries = []
        for key, value in obj.items():
            kbuf = bytearray()
            _encode(key, kbuf, depth + 1)
            entries.append((bytes(kbuf), value))
        entries.sort(key=lambda e: e[0])
        out += _head(_MT_MAP, len(entries))
        for kraw, value in entries:
            out += kraw
            _encode(value, out, depth + 1)
    else:
        raise CborError(f"cannot encode {type(obj).__name__}")


def dumps(obj: Any) -> bytes:
    """Encode ``obj`` canonically."""
    out = bytearray()
    _encode(obj, out, 0)
    return bytes(out)


class _Reader:
    __slots__ = ("data", "pos", "max_depth")

    def __init__(self, data: bytes, max_depth: int) -> None:
        self.data = data
        self.pos = 0
        self.max_depth = max_depth

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise CborError("truncated input")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def head(self) -> tuple[int, int]:
        initial = self.take(1)[0]
        major, info = initial >> 5, initial & 0x1F
        if info < 24:
            return major, info
        if info == 24:
            return major, self.take(1)[0]
        if info == 25:
            return major, int.from_bytes(self.take(2), "big")
        if info == 26:
            return major, int.from_bytes(self.take(4), "big")
        if info == 27:
            return major, int.from_bytes(self.take(8), "big")
        if info == 31:
            raise CborError("indefinite-length items are not accepted")
        raise CborError(f"reserved additional info {info}")

    def item(self, depth: int) -> Any:
        if depth > self.max_depth:
            raise CborError("nesting too deep")
        major, arg = self.head()
        if major == _MT_UINT:
            return arg
        if major == _MT_NINT:
            return -1 - arg
        if major == _MT_BYTES:
            return self.take(arg)
        if major == _MT_TEXT:
            try:
                return self.take(arg).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CborError("invalid UTF-8 in text string") from exc
        if major == _MT_ARRAY:
            # every item needs at least one byte
            if arg > len(self.data) - self.pos:
                raise CborError("truncated input")
            return [self.item(depth + 1) for _ in range(arg)]
        if major == _MT_MAP:
            if 2 * arg > len(self.data) - self.pos:
                raise CborError("truncated input")
            result: dict = {}
            for _ in range(arg):
                key = self.item(depth + 1)
                if isinstance(key, (list, dict)):
                    raise CborError("map keys must be scalars")
                if key in result:
                    raise CborDuplicateKey(f"duplicate map key {key!r}")
                result[key] = self.item(depth + 1)
            return result
        if major == _MT_TAG:
            raise CborError("tags are not accepted")
        if arg == 20:
            return False
        if arg == 21:
            return True
        if arg == 22:
            return None
        raise CborError("floats and simple values are not accepted")


def loads(data: bytes, *, max_depth: int = MAX_DEPTH) -> Any:
    """Decode exactly one CBOR item; trailing bytes are an error."""
    reader = _Reader(bytes(data), max_depth)
    value = reader.item(0)
    if reader.pos != len(reader.data):
        raise CborError("trailing bytes after CBOR item")
    return value


def depth(obj: Any) -> int:
    """Container nesting depth; scalars have depth 0."""
    if isinstance(obj, dict):
        return 1 + max((depth(v) for v in obj.values()), default=0)
    if isinstance(obj, list):
        return 1 + max((depth(v) for v in obj), default=0)
    return 0
