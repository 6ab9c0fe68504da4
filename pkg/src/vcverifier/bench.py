"""Latency and request-size benchmarks against a running verifier.

Latency runs report the client-observed total plus a three-way split
taken from the service's ``Server-Timing`` header:

* ``verification``: the component's own evaluate call
* ``load_instantiate``: resolution, compilation and instantiation
* ``other``: everything else (parsing, appraisal, signing, transport)
"""

from __future__ import annotations

import csv
import json
import statistics
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import httpx

from . import cbor
from .cmw import CMW_CBOR_MEDIA_TYPE, CMW_JSON_MEDIA_TYPE, encode_request
from .mocktee.evidence import collateral_locator
from .mocktee.scenario import Scenario, policy_id
from .mocktee.servers import FixtureServer, registry_server

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("mode", "platform", "run", "stage", "micros")
BREAKDOWN = ("verification", "load_instantiate", "other")
LOAD_STAGES = ("resolve", "compile", "instantiate")

# published compile times on other hardware, printed for orientation only
PUBLISHED_COMPILE_MS = {"SEV-SNP": (513.5, 11.3), "TDX": (272.1, 4.5)}


class BenchError(Exception):
    pass


class ServiceUnreachable(BenchError):
    pass


def parse_server_timing(header: str) -> dict[str, float]:
    """``name;dur=ms, ...`` -> seconds per stage."""
    out: dict[str, float] = {}
    for part in header.split(","):
        name, _, rest = part.strip().partition(";")
        if rest.startswith("dur="):
            out[name] = float(rest[4:]) / 1e3
    return out


@dataclass
class RunRecord:
    run: int
    total_s: float
    stages: dict[str, float]
    source: str
    status: int

    def breakdown(self) -> dict[str, float]:
        verification = self.stages.get("evaluate", 0.0)
        load = sum(self.stages.get(s, 0.0) for s in LOAD_STAGES)
        return {"verification": verification, "load_instantiate": load,
                "other": max(self.total_s - verification - load, 0.0)}


@dataclass
class LatencyReport:
    platform: str
    mode: str
    staple_collateral: bool
    component_source: str
    runs: list[RunRecord] = field(default_factory=list)
    compilations: int = 0

    @property
    def totals_ms(self) -> list[float]:
        return [r.total_s * 1e3 for r in self.runs]

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.totals_ms)

    @property
    def stddev_ms(self) -> float:
        return statistics.stdev(self.totals_ms) if len(self.runs) > 1 else 0.0

    def breakdown_ms(self) -> dict[str, float]:
        return {k: statistics.fmean(r.breakdown()[k] * 1e3 for r in self.runs) for k in BREAKDOWN}

    def to_dict(self) -> dict:
        return {
            "platform": self.platform,
            "mode": self.mode,
            "staple_collateral": self.staple_collateral,
            "component_source": self.component_source,
            "compilations": self.compilations,
            "mean_ms": self.mean_ms,
            "stddev_ms": self.stddev_ms,
            "breakdown_ms": self.breakdown_ms(),
            "runs": [asdict(r) for r in self.runs],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> LatencyReport:
        runs = [RunRecord(**r) for r in doc["runs"]]
        return cls(doc["platform"], doc["mode"], doc["staple_collateral"], doc["component_source"], runs,
                   doc.get("compilations", 0))


class BenchClient:
    def __init__(self, base_url: str, admin_token: str | None = None, timeout: float = 60.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.admin_headers = {"X-Admin-Token": admin_token} if admin_token else {}
        self.http = httpx.Client(timeout=timeout)

    def _call(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            return self.http.request(method, self.base_url + path, **kwargs)
        except httpx.TransportError as exc:
            raise ServiceUnreachable(f"cannot reach verifier at {self.base_url}: {exc}") from exc

    def attest(self, body: bytes, fmt: str = "cbor") -> httpx.Response:
        ctype = CMW_JSON_MEDIA_TYPE if fmt == "json" else CMW_CBOR_MEDIA_TYPE
        return self._call("POST", "/attest", content=body, headers={"Content-Type": ctype})

    def admin(self, path: str, doc=None) -> httpx.Response:
        resp = self._call("POST", path, json=doc, headers=self.admin_headers)
        if resp.status_code != 200:
            raise BenchError(f"admin call {path} failed: {resp.status_code} {resp.text}")
        return resp

    def clear(self) -> None:
        self.admin("/admin/cache/clear")

    def counters(self) -> dict:
        return self._call("GET", "/metrics").json()["counters"]

    def close(self) -> None:
        self.http.close()


class BenchFixtures:
    """Scenario plus local registry and collateral servers with injected delay."""

    def __init__(self, scenario: Scenario | None = None, *, delay_ms: float = 20.0) -> None:
        self.scenario = scenario or Scenario()
        delay = delay_ms / 1e3
        self.registry = registry_server(
            {f"mocktee/{p.lower()}:v1": s.signed_component for p, s in self.scenario.platforms.items()}, delay=delay
        )
        self.collateral = FixtureServer(
            {f"/collateral/{p.lower()}": s.keys.endorsement() for p, s in self.scenario.platforms.items()},
            delay=delay,
        )

    def start(self) -> BenchFixtures:
        self.registry.start()
        self.collateral.start()
        return self

    def stop(self) -> None:
        self.registry.stop()
        self.collateral.stop()

    def registry_ref(self, platform: str) -> str:
        return f"reg://{self.registry.authority}/mocktee/{platform.lower()}:v1"

    def collateral_url(self, platform: str) -> str:
        return f"{self.collateral.url}/collateral/{platform.lower()}"

    def request(self, platform: str, *, staple_collateral: bool, component_source: str) -> bytes:
        if component_source == "registry":
            ref, staple = self.registry_ref(platform), None
        else:
            ref, staple = None, "signed"
        body, _ = self.scenario.request(
            platform,
            staple=staple,
            component_ref=ref,
            collateral_url=None if staple_collateral else self.collateral_url(platform),
        )
        return body

    def provision(self, client: BenchClient) -> None:
        """Push reference values, policies and the trust store over the admin API."""
        client.admin("/admin/reference-values", self.scenario.reference_values())
        for policy in self.scenario.policies():
            client.admin("/admin/policies", policy.to_dict())
        client.admin("/admin/trust-store/reload", self.scenario.trust_store().to_dict())


class LocalService:
    """An in-process verifier on a loopback port, for self-contained runs."""

    def __init__(self, admin_token: str = "bench") -> None:
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        from .resolver import ComponentCache
        from .service import ServerThread, Verifier, create_app

        self._tmp = tempfile.TemporaryDirectory(prefix="vcverifier-bench-")
        root = Path(self._tmp.name)
        self.verifier = Verifier(
            Ed25519PrivateKey.generate(), cache=ComponentCache(root / "cache"), scratch_dir=root / "scratch"
        )
        self.admin_token = admin_token
        self.server = ServerThread(create_app(self.verifier, admin_token=admin_token))

    @property
    def url(self) -> str:
        return self.server.url

    def __enter__(self) -> LocalService:
        self.server.__enter__()
        return self

    def __exit__(self, *exc) -> None:
        self.server.__exit__(*exc)
        self.verifier.sandbox.close()
        self._tmp.cleanup()


def run_latency(
    client: BenchClient,
    fixtures: BenchFixtures,
    *,
    platform: str,
    mode: str,
    runs: int,
    staple_collateral: bool = True,
    component_source: str = "staple",
    concurrency: int = 1,
) -> LatencyReport:
    """One latency series.

    Requests go out in waves of ``concurrency``; cold mode clears the
    service caches before every wave, so only ``concurrency=1`` gives
    strictly cold requests.
    """
    if mode not in ("cold", "warm"):
        raise ValueError("mode must be cold or warm")
    if concurrency < 1:
        raise ValueError("concurrency must be at least 1")
    report = LatencyReport(platform, mode, staple_collateral, component_source)
    client.clear()
    if mode == "warm":
        warmup = client.attest(fixtures.request(platform, staple_collateral=staple_collateral,
                                                component_source=component_source))
        if warmup.status_code != 200:
            raise BenchError(f"warm-up request failed: {warmup.status_code} {warmup.text}")
    before = client.counters().get("compilations", 0)

    def one(i: int, body: bytes) -> RunRecord:
        start = time.perf_counter()
        resp = client.attest(body)
        elapsed = time.perf_counter() - start
        if resp.status_code != 200:
            raise BenchError(f"run {i} failed: {resp.status_code} {resp.text}")
        return RunRecord(i, elapsed, parse_server_timing(resp.headers.get("server-timing", "")),
                         resp.headers.get("x-component-source", ""), resp.status_code)

    pool = ThreadPoolExecutor(concurrency) if concurrency > 1 else None
    try:
        for first in range(0, runs, concurrency):
            if mode == "cold":
                client.clear()
            wave = range(first, min(runs, first + concurrency))
            bodies = [fixtures.request(platform, staple_collateral=staple_collateral,
                                       component_source=component_source) for _ in wave]
            report.runs.extend(pool.map(one, wave, bodies) if pool else map(one, wave, bodies))
    finally:
        if pool:
            pool.shutdown()
    # a warm series counts its warm-up compile too
    report.compilations = client.counters().get("compilations", 0) - before + (1 if mode == "warm" else 0)
    return report


@dataclass
class SizeRow:
    platform: str
    variant: str
    baseline_bytes: int
    cbor_bytes: int
    json_bytes: int

    @property
    def json_ratio(self) -> float:
        return self.json_bytes / self.cbor_bytes

    @property
    def delta_bytes(self) -> int:
        return self.cbor_bytes - self.baseline_bytes


def native_baseline(evidence: bytes, endorsements: list[bytes], nonce: bytes, policy: str) -> bytes:
    """Request a platform-specific verifier would take: no component reference, no envelope."""
    return cbor.dumps({"ev": evidence, "end": endorsements, "erd": nonce, "pid": policy})


def run_size(scenario: Scenario, *, staple_collateral: bool, staple_component: bool,
             collateral_url: str = "http://collateral.invalid/chain") -> list[SizeRow]:
    from .cmw import WrappedEvidence, build_collection

    rows = []
    for platform, setup in scenario.platforms.items():
        nonce = b"\x5a" * 64
        evidence, chain = scenario.evidence(platform, nonce)
        endorsements = [chain if staple_collateral else collateral_locator(collateral_url)]
        pid = policy_id(platform)
        baseline = native_baseline(evidence, endorsements, nonce, pid)
        collection = build_collection(
            WrappedEvidence(evidence, setup.hash_ref, pid, nonce),
            endorsements,
            setup.signed_component if staple_component else None,
        )
        variant = f"collateral={'staple' if staple_collateral else 'ref'},component={'staple' if staple_component else 'ref'}"
        rows.append(SizeRow(platform, variant, len(baseline), len(encode_request(collection, "cbor")),
                            len(encode_request(collection, "json"))))
    return rows


def format_size_table(rows: list[SizeRow]) -> str:
    lines = [f"{'platform':<9}{'variant':<38}{'baseline':>10}{'cbor':>10}{'json':>10}{'json/cbor':>11}{'delta':>9}"]
    for r in rows:
        lines.append(
            f"{r.platform:<9}{r.variant:<38}{r.baseline_bytes:>10}{r.cbor_bytes:>10}{r.json_bytes:>10}"
            f"{r.json_ratio:>11.3f}{r.delta_bytes:>+9}"
        )
    return "\n".join(lines)


def csv_rows(reports: list[LatencyReport]) -> list[dict]:
    rows = []
    for rep in reports:
        for run in rep.runs:
            for stage, secs in run.breakdown().items():
                rows.append({"mode": rep.mode, "platform": rep.platform, "run": run.run, "stage": stage,
                             "micros": round(secs * 1e6)})
    return rows


def write_csv(reports: list[LatencyReport], path: str | Path) -> int:
    rows = csv_rows(reports)
    with open(path, "w", newline="") as fh:
        fh.write(f"# vcverifier latency schema v{CSV_SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return [{**r, "run": int(r["run"]), "micros": int(r["micros"])} for r in csv.DictReader(lines)]


def plot_data(reports: list[LatencyReport]) -> dict:
    """Mean/stddev per (platform, mode) and the stacked stage series."""
    series = []
    for rep in reports:
        per_stage = {
            stage: {
                "mean_ms": statistics.fmean(r.breakdown()[stage] * 1e3 for r in rep.runs),
                "stddev_ms": statistics.stdev([r.breakdown()[stage] * 1e3 for r in rep.runs]) if len(rep.runs) > 1 else 0.0,
            }
            for stage in BREAKDOWN
        }
        series.append({"platform": rep.platform, "mode": rep.mode, "staple_collateral": rep.staple_collateral,
                       "component_source": rep.component_source, "total": {"mean_ms": rep.mean_ms,
                       "stddev_ms": rep.stddev_ms}, "stages": per_stage})
    return {"schema": CSV_SCHEMA_VERSION, "series": series}


def format_latency(rep: LatencyReport) -> str:
    b = rep.breakdown_ms()
    lines = [
        f"platform {rep.platform}  mode {rep.mode}  collateral {'stapled' if rep.staple_collateral else 'fetched'}"
        f"  component {rep.component_source}  runs {len(rep.runs)}",
        f"  total        {rep.mean_ms:9.2f} ms  +/- {rep.stddev_ms:.2f}",
        f"  verification {b['verification']:9.2f} ms",
        f"  load+inst.   {b['load_instantiate']:9.2f} ms",
        f"  other        {b['other']:9.2f} ms",
        f"  compilations {rep.compilations}",
    ]
    if rep.mode == "cold":
        ref = ", ".join(f"{k} {m} +/- {s} ms" for k, (m, s) in PUBLISHED_COMPILE_MS.items())
        lines.append(f"  (published compile times for orientation, not comparable: {ref})")
    return "\n".join(lines)


def save_reports(reports: list[LatencyReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=1))


def load_reports(path: str | Path) -> list[LatencyReport]:
    return [LatencyReport.from_dict(d) for d in json.loads(Path(path).read_text())]
