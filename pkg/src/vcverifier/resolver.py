"""Component resolution: local cache, then stapled bytes, then registry."""

from __future__ import annotations

import hashlib
import logging
import re
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import httpx

from .identity import MalformedContainer, strip_signature

log = logging.getLogger(__name__)

Source = Literal["cache", "stapled", "registry"]

DEFAULT_CACHE_CAP = 1024**3
DEFAULT_FETCH_LIMIT = 64 * 1024 * 1024

_HASH_RE = re.compile(r"sha256:([0-9a-f]{64})")
_REG_RE = re.compile(r"reg://([A-Za-z0-9.-]+(?::[0-9]{1,5})?)/([a-z0-9._/-]+):([a-z0-9._/-]+)")


class ResolveError(Exception):
    code = "ResolveError"


class InvalidRef(ResolveError):
    code = "InvalidRef"


class NotFound(ResolveError):
    code = "NotFound"


class DigestMismatch(ResolveError):
    code = "DigestMismatch"


class FetchFailed(ResolveError):
    code = "FetchFailed"


class ResponseTooLarge(ResolveError):
    code = "ResponseTooLarge"


@dataclass(frozen=True)
class ComponentRef:
    kind: Literal["hash", "registry"]
    digest: bytes | None = None
    host: str | None = None
    name: str | None = None
    tag: str | None = None

    @classmethod
    def parse(cls, text: str) -> ComponentRef:
        m = _HASH_RE.fullmatch(text)
        if m:
            return cls("hash", digest=bytes.fromhex(m.group(1)))
        m = _REG_RE.fullmatch(text)
        if m:
            return cls("registry", host=m.group(1), name=m.group(2), tag=m.group(3))
        raise InvalidRef(f"unrecognised component reference {text!r}")

    def __str__(self) -> str:
        if self.kind == "hash":
            return f"sha256:{self.digest.hex()}"
        return f"reg://{self.host}/{self.name}:{self.tag}"

    def url(self, default_registry: str | None = None) -> str:
        """Registry URL for this ref; hash refs need a default registry."""
        if self.kind == "registry":
            return f"http://{self.host}/v1/components/{self.name}/{self.tag}"
        if default_registry is None:
            raise NotFound(f"{self} is not cached or stapled and no default registry is configured")
        return f"http://{default_registry}/v1/components/sha256/{self.digest.hex()}"


def measurement_of(component: bytes) -> bytes:
    """SHA-256 of the signature-stripped component (raw bytes if unparseable)."""
    try:
        return hashlib.sha256(strip_signature(component)).digest()
    except MalformedContainer:
        return hashlib.sha256(component).digest()


class ComponentCache:
    """Byte-capped LRU of component binaries keyed by measurement.

    Entries persist as ``<dir>/<hex-hash>.bin`` when a directory is given.
    """

    def __init__(self, directory: str | Path | None = None, cap_bytes: int = DEFAULT_CACHE_CAP) -> None:
        self.directory = Path(directory) if directory is not None else None
        self.cap_bytes = cap_bytes
        self._entries: OrderedDict[bytes, bytes] = OrderedDict()
        self._refs: dict[str, bytes] = {}
        self._size = 0
        self._lock = threading.RLock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._load()

    def _load(self) -> None:
        for path in sorted(self.directory.glob("*.bin"), key=lambda p: p.stat().st_mtime):
            try:
                key = bytes.fromhex(path.stem)
            except ValueError:
                continue
            data = path.read_bytes()
            if len(key) == 32 and measurement_of(data) == key:
                self._insert(key, data, persist=False)
            else:
                log.warning("discarding corrupt cache entry %s", path.name)
                path.unlink(missing_ok=True)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def size_bytes(self) -> int:
        return self._size

    def get(self, key: bytes) -> bytes | None:
        with self._lock:
            data = self._entries.get(key)
            if data is not None:
                self._entries.move_to_end(key)
            return data

    def lookup(self, ref: ComponentRef) -> tuple[bytes, bytes] | None:
        with self._lock:
            key = ref.digest if ref.kind == "hash" else self._refs.get(str(ref))
            if key is None:
                return None
            data = self.get(key)
            return (key, data) if data is not None else None

    def put(self, data: bytes, ref: ComponentRef | None = None) -> bytes:
        key = measurement_of(data)
        with self._lock:
            if key not in self._entries:
                self._insert(key, data, persist=True)
            else:
                self._entries.move_to_end(key)
            if ref is not None and ref.kind == "registry":
                self._refs[str(ref)] = key
        return key

    def _insert(self, key: bytes, data: bytes, persist: bool) -> None:
        self._entries[key] = data
        self._size += len(data)
        if persist and self.directory is not None:
            tmp = self.directory / f".{key.hex()}.tmp"
            tmp.write_bytes(data)
            tmp.replace(self.directory / f"{key.hex()}.bin")
        while self._size > self.cap_bytes and len(self._entries) > 1:
            old_key, old = self._entries.popitem(last=False)
            self._size -= len(old)
            self._refs = {r: k for r, k in self._refs.items() if k != old_key}
            if self.directory is not None:
                (self.directory / f"{old_key.hex()}.bin").unlink(missing_ok=True)

    def clear(self, *, disk: bool = True) -> None:
        with self._lock:
            self._entries.clear()
            self._refs.clear()
            self._size = 0
            if disk and self.directory is not None:
                for path in self.directory.glob("*.bin"):
                    path.unlink(missing_ok=True)


class RegistryClient:
    """Minimal pull client: ``GET http://<host>/v1/components/<name>/<tag>``."""

    def __init__(self, *, max_bytes: int = DEFAULT_FETCH_LIMIT, timeout: float = 10.0,
                 default_registry: str | None = None) -> None:
        self.max_bytes = max_bytes
        self.timeout = timeout
        self.default_registry = default_registry
        self.fetches = 0

    def fetch(self, ref: ComponentRef) -> bytes:
        url = ref.url(self.default_registry)
        try:
            with httpx.stream("GET", url, timeout=self.timeout) as resp:
                if resp.status_code != 200:
                    raise FetchFailed(f"GET {url} returned HTTP {resp.status_code}")
                declared = resp.headers.get("content-length")
                if declared is not None and declared.isdigit() and int(declared) > self.max_bytes:
                    raise ResponseTooLarge(f"component of {declared} bytes exceeds {self.max_bytes}")
                body = bytearray()
                for chunk in resp.iter_bytes():
                    body += chunk
                    if len(body) > self.max_bytes:
                        raise ResponseTooLarge(f"component exceeds {self.max_bytes} bytes")
                self.fetches += 1
                return bytes(body)
        except httpx.HTTPError as exc:
            raise FetchFailed(f"GET {url} failed: {exc}") from exc


def registry_fetch(ref: ComponentRef, client: RegistryClient | None = None) -> bytes:
    if ref.kind != "registry":
        raise ValueError("registry_fetch needs a registry-form reference")
    return (client or RegistryClient()).fetch(ref)


class Resolver:
    """Resolves refs in strict order cache -> stapled -> registry."""

    def __init__(self, cache: ComponentCache, registry: RegistryClient | None = None) -> None:
        self.cache = cache
        self.registry = registry or RegistryClient()
        self.counters: Counter[str] = Counter()
        self._lock = threading.Lock()
        self._flights: dict[str, threading.Lock] = {}

    def _count(self, name: str) -> None:
        with self._lock:
            self.counters[name] += 1

    def _check_digest(self, ref: ComponentRef, data: bytes) -> None:
        if ref.kind == "hash" and measurement_of(data) != ref.digest:
            raise DigestMismatch(f"component bytes do not hash to {ref}")

    def resolve(self, ref: ComponentRef, stapled: bytes | None = None) -> tuple[bytes, Source]:
        hit = self.cache.lookup(ref)
        if hit is not None:
            if stapled is not None:
                self._count("resolve.stapled_ignored")
            self._count("resolve.source=cache")
            return hit[1], "cache"
        if stapled is not None:
            self._check_digest(ref, stapled)
            self.cache.put(stapled, ref)
            self._count("resolve.source=stapled")
            return stapled, "stapled"
        key = str(ref)
        with self._lock:
            flight = self._flights.setdefault(key, threading.Lock())
        with flight:
            hit = self.cache.lookup(ref)
            if hit is not None:
                self._count("resolve.source=cache")
                return hit[1], "cache"
            data = self.registry.fetch(ref)
            self._count("registry.fetches")
            self._check_digest(ref, data)
            self.cache.put(data, ref)
        self._count("resolve.source=registry")
        return data, "registry"
