"""Verifier pipeline and its HTTP surface.

Stages run in a fixed order per request: request parsing, component
resolution, identity measurement, compilation, sandboxed evaluation
(evidence parsing and endorsement checks happen inside the component),
policy appraisal, result signing.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse, Response

from . import cmw
from .appraisal import (
    AppraisalError,
    AppraisalPolicy,
    PolicyStore,
    Rule,
    RuleOutcome,
    Tier,
    TrustVector,
    appraise,
    build_claim_set,
)
from .ear import EAR_MEDIA_TYPE, AttestationResult, SignedResult, emit, public_key_bytes
from .identity import ExecutionPolicy, TrustStore, TrustStoreHolder, measure_and_identify
from .resolver import ComponentCache, ComponentRef, RegistryClient, ResolveError, Resolver
from .sandbox import EvaluateInput, SandboxError, SandboxHost

log = logging.getLogger(__name__)

STAGES = ("parse", "resolve", "identify", "compile", "instantiate", "evaluate", "appraise", "sign")
_LATENCY_BUCKETS_MS = (1, 2, 5, 10, 25, 50, 100, 250, 500, 1000, 2500, 5000)


class ServiceError(Exception):
    def __init__(self, status: int, code: str, detail: str) -> None:
        super().__init__(f"{status} {code}: {detail}")
        self.status = status
        self.code = code
        self.detail = detail

    def body(self) -> dict:
        return {"code": self.code, "detail": self.detail}


_RESOLVE_STATUS = {"NotFound": 404, "InvalidRef": 400, "DigestMismatch": 422}


def load_signing_key(path: str | Path) -> Ed25519PrivateKey:
    """Read a hex-encoded 32-byte Ed25519 seed."""
    seed = bytes.fromhex(Path(path).read_text().strip())
    return Ed25519PrivateKey.from_private_bytes(seed)


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:8080"
    signing_key: str | None = None
    trust_store: str | None = None
    policy_dir: str | None = None
    reference_values: str | None = None
    cache_dir: str | None = None
    cache_cap_bytes: int = 1024**3
    scratch_dir: str | None = None
    default_policy: dict = field(default_factory=dict)
    request_size_limit: int = cmw.DEFAULT_SIZE_LIMIT
    admin_token: str | None = None
    default_registry: str | None = None
    verifier_id: str = "vcverifier"

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides: Any) -> ServiceConfig:
        doc = json.loads(Path(path).read_text()) if path else {}
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        config = cls(**doc)
        env = {"listen": os.environ.get("VCVERIFIER_LISTEN"), "signing_key": os.environ.get("VCVERIFIER_SIGNING_KEY")}
        config = replace(config, **{k: v for k, v in env.items() if v})
        return replace(config, **{k: v for k, v in overrides.items() if v is not None})


class Metrics:
    """Counters and per-stage latency histograms."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.counters: Counter[str] = Counter()
        self._hist: dict[str, list[int]] = defaultdict(lambda: [0] * (len(_LATENCY_BUCKETS_MS) + 1))
        self._sums: Counter[str] = Counter()

    def inc(self, name: str, n: int = 1) -> None:
        with self._lock:
            self.counters[name] += n

    def observe(self, stage: str, seconds: float) -> None:
        ms = seconds * 1e3
        idx = next((i for i, b in enumerate(_LATENCY_BUCKETS_MS) if ms <= b), len(_LATENCY_BUCKETS_MS))
        with self._lock:
            self._hist[stage][idx] += 1
            self._sums[stage] += ms

    def histograms(self) -> dict:
        with self._lock:
            return {
                stage: {
                    "buckets_ms": list(_LATENCY_BUCKETS_MS) + ["+Inf"],
                    "counts": list(counts),
                    "count": sum(counts),
                    "sum_ms": self._sums[stage],
                }
                for stage, counts in self._hist.items()
            }


@dataclass
class AttestOutcome:
    signed: SignedResult
    result: AttestationResult
    source: str
    timings: dict[str, float]

    def server_timing(self) -> str:
        return ", ".join(f"{stage};dur={secs * 1e3:.3f}" for stage, secs in self.timings.items())


class Verifier:
    """The full appraisal pipeline, independent of any transport."""

    def __init__(
        self,
        signing_key: Ed25519PrivateKey,
        *,
        trust_store: TrustStore | None = None,
        policies: PolicyStore | None = None,
        cache: ComponentCache | None = None,
        registry: RegistryClient | None = None,
        sandbox: SandboxHost | None = None,
        scratch_dir: str | Path | None = None,
        request_size_limit: int = cmw.DEFAULT_SIZE_LIMIT,
        verifier_id: str = "vcverifier",
        clock=time.time,
    ) -> None:
        self.signing_key = signing_key
        self.public_key = public_key_bytes(signing_key)
        self.trust = TrustStoreHolder(trust_store)
        self.policies = policies or PolicyStore()
        self.resolver = Resolver(cache or ComponentCache(), registry)
        if sandbox is None:
            scratch_dir = scratch_dir or tempfile.mkdtemp(prefix="vcverifier-scratch-")
            sandbox = SandboxHost(scratch_dir, clock=clock)
        self.sandbox = sandbox
        self.request_size_limit = request_size_limit
        self.verifier_id = verifier_id
        self.clock = clock
        self.metrics = Metrics()
        self.trust_store_path: Path | None = None

    @classmethod
    def from_config(cls, config: ServiceConfig) -> Verifier:
        if not config.signing_key:
            raise ValueError("a signing key path is required")
        store = TrustStore.load(config.trust_store) if config.trust_store else TrustStore()
        if config.default_policy:
            store = TrustStore(store.entries, replace(store.default_policy, **config.default_policy))
        policies = PolicyStore()
        if config.reference_values:
            policies.install_reference_values(json.loads(Path(config.reference_values).read_text()))
        if config.policy_dir:
            policies.load_directory(config.policy_dir)
        cache = ComponentCache(config.cache_dir, config.cache_cap_bytes)
        registry = RegistryClient(default_registry=config.default_registry)
        verifier = cls(
            load_signing_key(config.signing_key),
            trust_store=store,
            policies=policies,
            cache=cache,
            registry=registry,
            scratch_dir=config.scratch_dir,
            request_size_limit=config.request_size_limit,
            verifier_id=config.verifier_id,
        )
        verifier.trust_store_path = Path(config.trust_store) if config.trust_store else None
        return verifier

    # -- admin ---------------------------------------------------------------

    def reload_trust_store(self, doc: dict | None = None) -> TrustStore:
        if doc is not None:
            store = TrustStore.from_dict(doc)
        elif self.trust_store_path is not None:
            store = TrustStore.load(self.trust_store_path)
        else:
            raise ValueError("no trust store document or path to reload from")
        self.trust.replace(store)
        return store

    def clear_caches(self, *, scratch: bool = True) -> None:
        """Forget every compiled and cached component (cold-start hook)."""
        self.sandbox.clear()
        self.resolver.cache.clear()
        if scratch:
            self.sandbox.scratch.clear()
        self.metrics.inc("admin.cache_clears")

    def metrics_snapshot(self) -> dict:
        counters = Counter(self.metrics.counters)
        counters.update(self.resolver.counters)
        counters.update(self.sandbox.counters)
        return {"counters": dict(sorted(counters.items())), "latency": self.metrics.histograms()}

    # -- pipeline ------------------------------------------------------------

    def attest(self, body: bytes, fmt: cmw.Format = "cbor") -> AttestOutcome:
        """Run one request through every stage; raises :class:`ServiceError`
        only when no appraisal could be produced."""
        self.metrics.inc("requests")
        # pin one consistent view of mutable state for the whole request
        trust_store = self.trust.get()
        policies, refs = self.policies.snapshot()
        timings: dict[str, float] = {}
        mark = time.perf_counter()

        def stage(name: str) -> None:
            nonlocal mark
            now = time.perf_counter()
            timings[name] = timings.get(name, 0.0) + (now - mark)
            self.metrics.observe(name, now - mark)
            mark = now

        try:
            collection = cmw.decode_request(body, fmt, size_limit=self.request_size_limit)
            request = cmw.extract_evidence(collection)
        except cmw.OversizedInput as exc:
            raise ServiceError(413, exc.code, str(exc)) from exc
        except cmw.CmwError as exc:
            raise ServiceError(400, exc.code, str(exc)) from exc
        evidence = request.evidence
        stage("parse")

        try:
            ref = ComponentRef.parse(evidence.component_id)
            component, source = self.resolver.resolve(ref, request.component)
        except ResolveError as exc:
            raise ServiceError(_RESOLVE_STATUS.get(exc.code, 502), exc.code, str(exc)) from exc
        stage("resolve")

        identity, exec_policy = measure_and_identify(component, trust_store, self.clock())
        stage("identify")

        try:
            compiled = self.sandbox.compile(component, identity)
            stage("compile")
            output = self.sandbox.evaluate(
                compiled,
                EvaluateInput(evidence.tee_evidence, request.endorsements, evidence.expected_report_data),
                exec_policy,
            )
        except SandboxError as exc:
            self.metrics.inc(f"rejected.{exc.code}")
            raise ServiceError(422, exc.code, str(exc)) from exc
        # split the sandbox call into instantiation and verification proper
        timings["instantiate"] = output.instantiate_seconds
        self.metrics.observe("instantiate", output.instantiate_seconds)
        mark = time.perf_counter() - output.run_seconds
        stage("evaluate")

        claims = build_claim_set(identity, output.claims)
        failure = None if output.ok else f"{output.failure.code}: {output.failure.detail}"
        policy = policies.get(evidence.policy_id)
        if policy is None:
            vector = TrustVector({"instance_identity": Tier.CONTRAINDICATED})
            outcomes = [RuleOutcome(Rule("", "policy", evidence.policy_id, "instance_identity"), False, "unknown policy")]
        else:
            vector, outcomes = appraise(claims, policy, refs, evidence_failure=failure)
        stage("appraise")

        result = AttestationResult(
            issued_at=int(self.clock()),
            verifier_id=self.verifier_id,
            policy_id=evidence.policy_id,
            nonce_echo=evidence.expected_report_data,
            claims=claims,
            trust_vector=vector,
            rule_outcomes=outcomes,
        )
        signed = emit(result, self.signing_key)
        stage("sign")
        self.metrics.inc(f"status.{vector.status.name.lower()}")
        return AttestOutcome(signed, result, source, timings)


def _request_format(content_type: str | None) -> cmw.Format:
    return "json" if content_type and "json" in content_type else "cbor"


def create_app(verifier: Verifier, *, admin_token: str | None = None) -> FastAPI:
    app = FastAPI(title="vcverifier")
    app.state.verifier = verifier

    def _error(exc: ServiceError) -> JSONResponse:
        return JSONResponse(exc.body(), status_code=exc.status)

    def _admin_ok(request: Request) -> bool:
        if admin_token is None:
            return False
        supplied = request.headers.get("x-admin-token") or request.headers.get("authorization", "").removeprefix(
            "Bearer "
        )
        return supplied == admin_token

    def _unauthorized() -> JSONResponse:
        return JSONResponse({"code": "Unauthorized", "detail": "admin token required"}, status_code=401)

    @app.post("/attest")
    async def attest(request: Request) -> Response:
        declared = request.headers.get("content-length")
        if declared and declared.isdigit() and int(declared) > verifier.request_size_limit:
            return _error(ServiceError(413, "OversizedInput", "request body exceeds limit"))
        body = await request.body()
        try:
            outcome = await run_in_threadpool(verifier.attest, body, _request_format(request.headers.get("content-type")))
        except ServiceError as exc:
            verifier.metrics.inc(f"http.{exc.status}")
            return _error(exc)
        except Exception as exc:  # noqa: BLE001 - never let a request take the process down
            log.exception("internal error while attesting")
            verifier.metrics.inc("http.500")
            return _error(ServiceError(500, "Internal", type(exc).__name__))
        verifier.metrics.inc("http.200")
        return Response(
            outcome.signed.to_cbor(),
            media_type=EAR_MEDIA_TYPE,
            headers={"Server-Timing": outcome.server_timing(), "X-Component-Source": outcome.source},
        )

    @app.get("/verifier-key")
    def verifier_key() -> dict:
        return {"public_key": verifier.public_key.hex(), "algorithm": "Ed25519"}

    @app.get("/metrics")
    def metrics() -> dict:
        return verifier.metrics_snapshot()

    @app.post("/admin/policies")
    async def install_policy(request: Request) -> Response:
        if not _admin_ok(request):
            return _unauthorized()
        try:
            verifier.policies.install_policy(AppraisalPolicy.from_dict(await request.json()))
        except (AppraisalError, ValueError) as exc:
            return JSONResponse({"code": "ValidationFailed", "detail": str(exc)}, status_code=422)
        return JSONResponse({"status": "installed"})

    @app.post("/admin/reference-values")
    async def install_refs(request: Request) -> Response:
        if not _admin_ok(request):
            return _unauthorized()
        try:
            doc = await request.json()
            if not isinstance(doc, dict):
                raise ValueError("reference values must be a JSON object")
            verifier.policies.install_reference_values(doc)
        except (AppraisalError, ValueError) as exc:
            return JSONResponse({"code": "ValidationFailed", "detail": str(exc)}, status_code=422)
        return JSONResponse({"status": "installed", "keys": sorted(doc)})

    @app.post("/admin/trust-store/reload")
    async def reload_trust_store(request: Request) -> Response:
        if not _admin_ok(request):
            return _unauthorized()
        raw = await request.body()
        try:
            store = verifier.reload_trust_store(json.loads(raw) if raw.strip() else None)
        except (ValueError, TypeError) as exc:
            return JSONResponse({"code": "ValidationFailed", "detail": str(exc)}, status_code=422)
        return JSONResponse({"status": "reloaded", "signers": len(store.entries)})

    @app.post("/admin/cache/clear")
    async def clear_cache(request: Request) -> Response:
        if not _admin_ok(request):
            return _unauthorized()
        verifier.clear_caches()
        return JSONResponse({"status": "cleared"})

    return app


class ServerThread:
    """Run the app under uvicorn in a background thread (tests, benchmarks)."""

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0) -> None:
        import socket

        import uvicorn

        if port == 0:
            # uvicorn must bind itself: sockets handed in via ``sockets=`` lose
            # TCP_NODELAY and every keep-alive response stalls on delayed ACK
            with socket.socket() as probe:
                probe.bind((host, 0))
                port = probe.getsockname()[1]
        self.host, self.port = host, port
        config = uvicorn.Config(app, host=host, port=port, log_level="warning", lifespan="off")
        self.server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self.server.run, daemon=True)

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def __enter__(self) -> ServerThread:
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc) -> None:
        self.server.should_exit = True
        self._thread.join(timeout=10)
