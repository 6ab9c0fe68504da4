"""Metered, capability-gated execution of verification components.

A component is a core WebAssembly module exporting ``memory``,
``tm_alloc(len) -> ptr`` and ``tm_evaluate(ptr, len) -> i64``. The
evaluate input is a CBOR map ``{"ev", "end", "erd"}`` written into guest
memory; the return value packs ``out_ptr << 32 | out_len`` of a CBOR map
holding either ``{"claims": {...}}`` or ``{"error": {"code", "detail"}}``.

Host imports under the ``trustmee-host`` module return non-negative
lengths or one of the negative error codes in :data:`HOST_ERRORS`. Byte
results are parked in a per-instance buffer and copied out with
``take_result``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import shutil
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable
from urllib.parse import urlsplit

import httpx
import wasmtime
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import encode_dss_signature

from . import cbor
from .identity import ComponentIdentity, ExecutionPolicy, MalformedContainer, strip_signature

log = logging.getLogger(__name__)

HOST_MODULE = "trustmee-host"
NETWORK_DENIED = -1
FETCH_FAILED = -2
RESPONSE_TOO_LARGE = -3
NOT_FOUND = -4
PATH_ESCAPE = -5
QUOTA_EXCEEDED = -6
MALFORMED_KEY = -7
BAD_CALL = -8
HOST_ERRORS = {
    NETWORK_DENIED: "NetworkDenied",
    FETCH_FAILED: "FetchFailed",
    RESPONSE_TOO_LARGE: "ResponseTooLarge",
    NOT_FOUND: "NotFound",
    PATH_ESCAPE: "PathEscape",
    QUOTA_EXCEEDED: "QuotaExceeded",
    MALFORMED_KEY: "MalformedKey",
    BAD_CALL: "BadCall",
}

FAILURE_CODES = frozenset({"InvalidEvidence", "EndorsementRejected", "FreshnessMismatch", "Internal"})
MAX_CLAIMS_BYTES = 1024 * 1024
MAX_CLAIMS_DEPTH = 8
SCRATCH_QUOTA = 16 * 1024 * 1024
PAGE = 65536

_KEY_SEGMENT = re.compile(r"[A-Za-z0-9._-]+")


class SandboxError(Exception):
    code = "Internal"


class InvalidBytecode(SandboxError):
    code = "InvalidBytecode"


class MissingExport(SandboxError):
    code = "MissingExport"


class FuelExhausted(SandboxError):
    code = "FuelExhausted"


class DeadlineExceeded(SandboxError):
    code = "DeadlineExceeded"


class MemoryExceeded(SandboxError):
    code = "MemoryExceeded"


class Trap(SandboxError):
    code = "Trap"


class HostImportError(Exception):
    def __init__(self, code: int, detail: str = "") -> None:
        super().__init__(detail or HOST_ERRORS.get(code, str(code)))
        self.code = code

    @property
    def name(self) -> str:
        return HOST_ERRORS.get(self.code, "HostError")


@dataclass(frozen=True)
class CompiledComponent:
    identity: ComponentIdentity
    module: wasmtime.Module
    compiled_at: float
    compile_seconds: float


@dataclass(frozen=True)
class EvaluateInput:
    tee_evidence: bytes
    endorsements: list[bytes] = field(default_factory=list)
    expected_report_data: bytes = b""

    def to_cbor(self) -> bytes:
        return cbor.dumps({"ev": self.tee_evidence, "end": list(self.endorsements), "erd": self.expected_report_data})


@dataclass(frozen=True)
class Failure:
    code: str
    detail: str = ""


@dataclass
class EvaluateOutput:
    claims: dict | None = None
    failure: Failure | None = None
    fuel_used: int = 0
    instantiate_seconds: float = 0.0
    run_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.failure is None


def _all_text_keys(obj) -> bool:
    if isinstance(obj, dict):
        return all(isinstance(k, str) and _all_text_keys(v) for k, v in obj.items())
    if isinstance(obj, list):
        return all(_all_text_keys(v) for v in obj)
    return True


def parse_output(raw: bytes) -> tuple[dict | None, Failure | None]:
    """Validate a component's output; anything out of bounds becomes Internal."""
    if len(raw) > MAX_CLAIMS_BYTES:
        return None, Failure("Internal", f"component output of {len(raw)} bytes exceeds limit")
    try:
        doc = cbor.loads(raw, max_depth=MAX_CLAIMS_DEPTH + 2)
    except cbor.CborError as exc:
        return None, Failure("Internal", f"component output rejected: {exc}")
    if not isinstance(doc, dict) or len(doc) != 1:
        return None, Failure("Internal", "component output must hold exactly one of claims, error")
    if "claims" in doc:
        claims = doc["claims"]
        if not isinstance(claims, dict) or not _all_text_keys(claims):
            return None, Failure("Internal", "claims must be a map with text keys")
        if cbor.depth(claims) > MAX_CLAIMS_DEPTH:
            return None, Failure("Internal", "claims nested too deeply")
        return claims, None
    if "error" in doc:
        err = doc["error"]
        if (
            isinstance(err, dict)
            and err.get("code") in FAILURE_CODES
            and isinstance(err.get("detail", ""), str)
        ):
            return None, Failure(err["code"], err.get("detail", ""))
    return None, Failure("Internal", "malformed component output")


def _i32() -> wasmtime.ValType:
    return wasmtime.ValType.i32()


def _i64() -> wasmtime.ValType:
    return wasmtime.ValType.i64()


_IMPORT_TYPES = {
    "now_unix": ([], [_i64()]),
    "http_get": ([_i32(), _i32()], [_i32()]),
    "cache_read": ([_i32(), _i32()], [_i32()]),
    "cache_write": ([_i32()] * 4, [_i32()]),
    "take_result": ([_i32()], [_i32()]),
    "verify_p256": ([_i32()] * 6, [_i32()]),
}


def _functype_sig(ft: wasmtime.FuncType) -> tuple[list[str], list[str]]:
    return [str(t) for t in ft.params], [str(t) for t in ft.results]


def verify_p256(msg: bytes, sig: bytes, pubkey: bytes) -> bool:
    """ECDSA P-256/SHA-256 over ``msg`` with a raw ``r || s`` signature.

    Raises :class:`HostImportError` (MalformedKey) for unusable keys.
    """
    try:
        key = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), pubkey)
    except (ValueError, TypeError) as exc:
        raise HostImportError(MALFORMED_KEY, "malformed P-256 key") from exc
    if len(sig) != 64:
        return False
    r, s = int.from_bytes(sig[:32], "big"), int.from_bytes(sig[32:], "big")
    try:
        key.verify(encode_dss_signature(r, s), msg, ec.ECDSA(hashes.SHA256()))
    except (InvalidSignature, ValueError):
        return False
    return True


class ScratchSpace:
    """Per-component-hash persistent directory backing the cache import."""

    def __init__(self, root: Path, quota: int = SCRATCH_QUOTA) -> None:
        self.root = Path(root)
        self.quota = quota

    def dir_for(self, component_hash: bytes) -> Path:
        return self.root / component_hash.hex()

    def _path(self, component_hash: bytes, key: str) -> Path:
        segments = key.split("/")
        if (
            not key
            or len(key) > 255
            or any(seg in ("", ".", "..") or not _KEY_SEGMENT.fullmatch(seg) for seg in segments)
        ):
            raise HostImportError(PATH_ESCAPE, f"illegal cache key {key!r}")
        base = self.dir_for(component_hash).resolve()
        path = (base / key).resolve()
        if base not in path.parents:
            raise HostImportError(PATH_ESCAPE, f"cache key {key!r} escapes scratch directory")
        return path

    def read(self, component_hash: bytes, key: str) -> bytes:
        path = self._path(component_hash, key)
        try:
            return path.read_bytes()
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
            raise HostImportError(NOT_FOUND, f"no cache entry {key!r}") from exc

    def usage(self, component_hash: bytes) -> int:
        base = self.dir_for(component_hash)
        if not base.exists():
            return 0
        return sum(p.stat().st_size for p in base.rglob("*") if p.is_file())

    def write(self, component_hash: bytes, key: str, value: bytes) -> None:
        path = self._path(component_hash, key)
        existing = path.stat().st_size if path.is_file() else 0
        if self.usage(component_hash) - existing + len(value) > self.quota:
            raise HostImportError(QUOTA_EXCEEDED, "scratch quota exceeded")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
        except (FileExistsError, NotADirectoryError) as exc:
            raise HostImportError(PATH_ESCAPE, f"cache key {key!r} collides with an entry") from exc
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(value)
            os.replace(tmp, path)
        except IsADirectoryError as exc:
            os.unlink(tmp)
            raise HostImportError(PATH_ESCAPE, f"cache key {key!r} names a directory") from exc

    def clear(self) -> None:
        if self.root.exists():
            shutil.rmtree(self.root)


class _Instance:
    """Host-side state for one component instance."""

    def __init__(self, host: SandboxHost, comp: CompiledComponent, policy: ExecutionPolicy) -> None:
        self.host = host
        self.comp = comp
        self.policy = policy
        self.pending: bytes | None = None
        self.memory: wasmtime.Memory | None = None

    def _read(self, caller, ptr: int, length: int) -> bytes:
        mem = self.memory
        if mem is None or ptr < 0 or length < 0 or ptr + length > mem.data_len(caller):
            raise HostImportError(BAD_CALL, "guest pointer out of bounds")
        return bytes(mem.read(caller, ptr, ptr + length))

    def _park(self, data: bytes) -> int:
        self.pending = data
        return len(data)

    def now_unix(self, caller) -> int:
        return int(self.host.clock())

    def http_get(self, caller, ptr: int, length: int) -> int:
        try:
            url = self._read(caller, ptr, length).decode("utf-8", "replace")
            return self._park(self.host.http_get(url, self.policy))
        except HostImportError as exc:
            return exc.code

    def cache_read(self, caller, ptr: int, length: int) -> int:
        try:
            key = self._read(caller, ptr, length).decode("utf-8", "replace")
            return self._park(self.host.scratch.read(self.comp.identity.hash, key))
        except HostImportError as exc:
            return exc.code

    def cache_write(self, caller, kptr: int, klen: int, vptr: int, vlen: int) -> int:
        try:
            key = self._read(caller, kptr, klen).decode("utf-8", "replace")
            value = self._read(caller, vptr, vlen)
            self.host.scratch.write(self.comp.identity.hash, key, value)
            return 0
        except HostImportError as exc:
            return exc.code
        except OSError:
            return QUOTA_EXCEEDED

    def take_result(self, caller, dst: int) -> int:
        data, self.pending = self.pending, None
        mem = self.memory
        if data is None or mem is None or dst < 0 or dst + len(data) > mem.data_len(caller):
            return BAD_CALL
        mem.write(caller, data, dst)
        return len(data)

    def verify_p256(self, caller, mp: int, ml: int, sp: int, sl: int, kp: int, kl: int) -> int:
        try:
            ok = verify_p256(self._read(caller, mp, ml), self._read(caller, sp, sl), self._read(caller, kp, kl))
        except HostImportError as exc:
            return exc.code
        self.host.counters["host_crypto.calls"] += 1
        return 1 if ok else 0


class SandboxHost:
    """Compiles, caches and runs verification components under wasmtime."""

    def __init__(
        self,
        scratch_root: str | Path,
        *,
        clock: Callable[[], float] = time.time,
        http_timeout: float = 5.0,
        http_max_bytes: int = 8 * 1024 * 1024,
        scratch_quota: int = SCRATCH_QUOTA,
        epoch_tick_ms: int = 10,
    ) -> None:
        config = wasmtime.Config()
        config.consume_fuel = True
        config.epoch_interruption = True
        self.engine = wasmtime.Engine(config)
        self.clock = clock
        self.http_timeout = http_timeout
        self.http_max_bytes = http_max_bytes
        self.scratch = ScratchSpace(Path(scratch_root), scratch_quota)
        self.counters: Counter[str] = Counter()
        self._counter_lock = threading.Lock()
        self._compiled: dict[bytes, CompiledComponent] = {}
        self._flights: dict[bytes, threading.Lock] = {}
        self._flights_lock = threading.Lock()
        self._tick = epoch_tick_ms / 1000.0
        self._closed = threading.Event()
        self._ticker = threading.Thread(target=self._run_ticker, name="wasm-epoch", daemon=True)
        self._ticker.start()

    def _run_ticker(self) -> None:
        while not self._closed.wait(self._tick):
            self.engine.increment_epoch()

    def close(self) -> None:
        self._closed.set()

    def _count(self, name: str, n: int = 1) -> None:
        with self._counter_lock:
            self.counters[name] += n

    # -- compilation -------------------------------------------------------

    def cached(self, component_hash: bytes) -> CompiledComponent | None:
        return self._compiled.get(component_hash)

    def clear(self) -> None:
        """Drop every compiled component (cold-start simulation)."""
        with self._flights_lock:
            self._compiled.clear()

    def compile(self, component: bytes, identity: ComponentIdentity | None = None) -> CompiledComponent:
        try:
            stripped = strip_signature(component)
        except MalformedContainer as exc:
            raise InvalidBytecode(str(exc)) from exc
        if identity is None:
            identity = ComponentIdentity(hashlib.sha256(stripped).digest())
        key = identity.hash
        hit = self._compiled.get(key)
        if hit is not None:
            self._count("compile.cache_hits")
            return self._with_identity(hit, identity)
        with self._flights_lock:
            flight = self._flights.setdefault(key, threading.Lock())
        with flight:
            hit = self._compiled.get(key)
            if hit is not None:
                self._count("compile.cache_hits")
                return self._with_identity(hit, identity)
            start = time.perf_counter()
            try:
                module = wasmtime.Module(self.engine, stripped)
            except wasmtime.WasmtimeError as exc:
                raise InvalidBytecode(str(exc).splitlines()[0]) from exc
            self._check_abi(module)
            elapsed = time.perf_counter() - start
            compiled = CompiledComponent(identity, module, time.time(), elapsed)
            self._compiled[key] = compiled
            self._count("compilations")
            log.debug("compiled component %s in %.1f ms", key.hex()[:12], elapsed * 1e3)
            return compiled

    @staticmethod
    def _with_identity(comp: CompiledComponent, identity: ComponentIdentity) -> CompiledComponent:
        if comp.identity == identity:
            return comp
        return CompiledComponent(identity, comp.module, comp.compiled_at, comp.compile_seconds)

    @staticmethod
    def _check_abi(module: wasmtime.Module) -> None:
        exports = {e.name: e.type for e in module.exports}
        mem = exports.get("memory")
        if not isinstance(mem, wasmtime.MemoryType):
            raise MissingExport("component does not export its memory")
        expected = {"tm_alloc": (["i32"], ["i32"]), "tm_evaluate": (["i32", "i32"], ["i64"])}
        for name, sig in expected.items():
            ty = exports.get(name)
            if not isinstance(ty, wasmtime.FuncType):
                raise MissingExport(f"component does not export {name}")
            if _functype_sig(ty) != sig:
                raise MissingExport(f"{name} has the wrong signature")
        for imp in module.imports:
            spec = _IMPORT_TYPES.get(imp.name) if imp.module == HOST_MODULE else None
            if spec is None or not isinstance(imp.type, wasmtime.FuncType):
                raise InvalidBytecode(f"unsupported import {imp.module}.{imp.name}")
            if _functype_sig(imp.type) != ([str(t) for t in spec[0]], [str(t) for t in spec[1]]):
                raise InvalidBytecode(f"import {imp.name} has the wrong signature")

    # -- host capabilities -------------------------------------------------

    def http_get(self, url: str, policy: ExecutionPolicy) -> bytes:
        if not policy.network_allowed:
            self._count("network.denied")
            raise HostImportError(NETWORK_DENIED, "network access denied by execution policy")
        if urlsplit(url).scheme not in ("http", "https"):
            raise HostImportError(FETCH_FAILED, f"unsupported URL scheme in {url!r}")
        self._count("network.requests")
        return fetch_limited(url, self.http_max_bytes, self.http_timeout)

    # -- execution ---------------------------------------------------------

    def _linker(self, inst: _Instance) -> wasmtime.Linker:
        linker = wasmtime.Linker(self.engine)
        for name, (params, results) in _IMPORT_TYPES.items():
            linker.define_func(
                HOST_MODULE, name, wasmtime.FuncType(params, results), getattr(inst, name), access_caller=True
            )
        return linker

    def evaluate(self, comp: CompiledComponent, data: EvaluateInput, policy: ExecutionPolicy) -> EvaluateOutput:
        """Run ``tm_evaluate`` in a fresh instance under ``policy``.

        Raises FuelExhausted, DeadlineExceeded, MemoryExceeded or Trap when
        the component is aborted; component-reported failures come back in
        the output instead.
        """
        store = wasmtime.Store(self.engine)
        store.set_fuel(policy.fuel_budget)
        store.set_limits(memory_size=policy.max_memory_bytes, instances=1, tables=1, memories=1)
        store.set_epoch_deadline(max(1, math.ceil(policy.wall_clock_limit_ms / 1000.0 / self._tick)))
        inst = _Instance(self, comp, policy)
        payload = data.to_cbor()
        started = time.perf_counter()
        try:
            instance = self._linker(inst).instantiate(store, comp.module)
            exports = instance.exports(store)
            inst.memory = exports["memory"]
            instantiated = time.perf_counter()
            ptr = exports["tm_alloc"](store, len(payload))
            if ptr < 0 or ptr + len(payload) > inst.memory.data_len(store):
                raise Trap("tm_alloc returned an out-of-bounds pointer")
            inst.memory.write(store, payload, ptr)
            packed = exports["tm_evaluate"](store, ptr, len(payload)) & 0xFFFFFFFFFFFFFFFF
        except wasmtime.Trap as exc:
            self._raise_abort(exc, store, inst, policy)
        except wasmtime.WasmtimeError as exc:
            message = str(exc).splitlines()[0]
            if "memory" in message and ("limit" in message or "exceed" in message):
                self._count("abort.memory")
                raise MemoryExceeded(message) from exc
            raise Trap(message) from exc
        finished = time.perf_counter()
        fuel_used = policy.fuel_budget - store.get_fuel()
        out_ptr, out_len = packed >> 32, packed & 0xFFFFFFFF
        timing = dict(
            fuel_used=fuel_used, instantiate_seconds=instantiated - started, run_seconds=finished - instantiated
        )
        if out_len > MAX_CLAIMS_BYTES:
            return EvaluateOutput(failure=Failure("Internal", f"component output of {out_len} bytes exceeds limit"), **timing)
        if out_ptr + out_len > inst.memory.data_len(store):
            return EvaluateOutput(failure=Failure("Internal", "component output out of bounds"), **timing)
        raw = bytes(inst.memory.read(store, out_ptr, out_ptr + out_len))
        claims, failure = parse_output(raw)
        if failure is not None and failure.code == "Internal":
            self._count("evaluate.rejected_output")
        return EvaluateOutput(claims=claims, failure=failure, **timing)

    def _raise_abort(self, exc: wasmtime.Trap, store, inst: _Instance, policy: ExecutionPolicy):
        code = exc.trap_code
        message = str(exc).splitlines()[0]
        if code == wasmtime.TrapCode.OUT_OF_FUEL:
            self._count("abort.fuel")
            raise FuelExhausted(f"fuel budget of {policy.fuel_budget} exhausted") from exc
        if code == wasmtime.TrapCode.INTERRUPT:
            self._count("abort.deadline")
            raise DeadlineExceeded(f"wall-clock limit of {policy.wall_clock_limit_ms} ms exceeded") from exc
        # a trap with memory pinned at the cap is attributed to the cap
        if inst.memory is not None and inst.memory.data_len(store) + 16 * PAGE > policy.max_memory_bytes:
            self._count("abort.memory")
            raise MemoryExceeded(f"memory limit of {policy.max_memory_bytes} bytes reached") from exc
        self._count("abort.trap")
        raise Trap(message) from exc


def fetch_limited(url: str, max_bytes: int, timeout: float) -> bytes:
    """GET ``url`` and return the body, refusing bodies over ``max_bytes``."""
    try:
        with httpx.stream("GET", url, timeout=timeout, follow_redirects=False) as resp:
            if resp.status_code != 200:
                raise HostImportError(FETCH_FAILED, f"GET {url} returned HTTP {resp.status_code}")
            declared = resp.headers.get("content-length")
            if declared is not None and declared.isdigit() and int(declared) > max_bytes:
                raise HostImportError(RESPONSE_TOO_LARGE, f"response of {declared} bytes exceeds {max_bytes}")
            body = bytearray()
            for chunk in resp.iter_bytes():
                body += chunk
                if len(body) > max_bytes:
                    raise HostImportError(RESPONSE_TOO_LARGE, f"response exceeds {max_bytes} bytes")
            return bytes(body)
    except httpx.HTTPError as exc:
        raise HostImportError(FETCH_FAILED, f"GET {url} failed: {exc}") from exc


def calibrate_fuel(host: SandboxHost, calibration_component: bytes) -> float:
    """Fuel units per iteration of the calibration loop.

    The calibration component runs 1000 loop iterations per input byte;
    differencing two input sizes cancels the fixed per-call cost.
    """
    comp = host.compile(calibration_component)
    policy = ExecutionPolicy(fuel_budget=10**10, wall_clock_limit_ms=60_000)
    small = host.evaluate(comp, EvaluateInput(b"\x00" * 16), policy)
    large = host.evaluate(comp, EvaluateInput(b"\x00" * 1016), policy)
    small_len = len(EvaluateInput(b"\x00" * 16).to_cbor())
    large_len = len(EvaluateInput(b"\x00" * 1016).to_cbor())
    return (large.fuel_used - small.fuel_used) / (1000 * (large_len - small_len))
