from __future__ import annotations

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from vcverifier.mocktee import native_reference_verify
from vcverifier.mocktee.scenario import Scenario
from vcverifier.resolver import ComponentCache, RegistryClient
from vcverifier.sandbox import EvaluateInput, SandboxHost
from vcverifier.service import ServerThread, Verifier, create_app

ADMIN_TOKEN = "test-admin-token"


@pytest.fixture(scope="session")
def scenario() -> Scenario:
    return Scenario()


@pytest.fixture(scope="session")
def sandbox(tmp_path_factory):
    host = SandboxHost(tmp_path_factory.mktemp("scratch"))
    yield host
    host.close()


def make_verifier(root, scenario: Scenario | None = None, **kwargs) -> Verifier:
    kwargs.setdefault("cache", ComponentCache(root / "cache"))
    kwargs.setdefault("registry", RegistryClient())
    verifier = Verifier(Ed25519PrivateKey.generate(), scratch_dir=root / "scratch", **kwargs)
    if scenario is not None:
        scenario.install(verifier)
    return verifier


@pytest.fixture
def verifier(tmp_path, scenario):
    v = make_verifier(tmp_path, scenario)
    yield v
    v.sandbox.close()


@pytest.fixture
def service(verifier):
    with ServerThread(create_app(verifier, admin_token=ADMIN_TOKEN)) as server:
        yield server


def native_status(platform, evidence, endorsements, nonce, **kw) -> tuple[bool, dict | str]:
    """Native oracle outcome: (accepted, claims or failure code)."""
    from vcverifier.mocktee import ReferenceVerifyError

    try:
        return True, native_reference_verify(platform, evidence, endorsements, nonce, **kw)
    except ReferenceVerifyError as exc:
        return False, exc.code


def run_component(sandbox, component: bytes, evidence: bytes, endorsements, nonce: bytes, policy):
    compiled = sandbox.compile(component)
    return sandbox.evaluate(compiled, EvaluateInput(evidence, list(endorsements), nonce), policy)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
