"""Fixture verification components, signed and unsigned."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cache
from importlib import resources

import wasmtime
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ..identity import sign_component

# name -> file shipped in the components directory
COMPONENT_FILES = {
    "mocktee_a": "mocktee_a.wasm",
    "mocktee_b": "mocktee_b.wasm",
    "mocktee_b_hostcrypto": "mocktee_b_hostcrypto.wasm",
    "impersonator": "impersonator.wasm",
    "claims_bomb": "claims_bomb.wasm",
    "network_caller": "network_caller.wasm",
    "probe": "probe.wasm",
    "infinite_loop": "infinite_loop.wat",
    "memory_hog": "memory_hog.wat",
    "missing_export": "missing_export.wat",
    "calibration": "calibration.wat",
}
ADVERSARIAL = ("infinite_loop", "memory_hog", "network_caller", "claims_bomb", "impersonator")


@cache
def component_bytes(name: str) -> bytes:
    """Unsigned binary for a named fixture component."""
    filename = COMPONENT_FILES[name]
    raw = resources.files(__package__).joinpath("components", filename).read_bytes()
    if filename.endswith(".wat"):
        return bytes(wasmtime.wat2wasm(raw.decode()))
    return raw


@dataclass
class FixtureSet:
    unsigned: dict[str, bytes] = field(default_factory=dict)
    signed: dict[str, bytes] = field(default_factory=dict)

    def __getitem__(self, name: str) -> bytes:
        return self.unsigned[name]


def build_fixture_components(
    signing_key: Ed25519PrivateKey | None = None, *, expiry: int | None = None
) -> FixtureSet:
    """Every fixture component, plus signed variants when a key is given."""
    fixtures = FixtureSet({name: component_bytes(name) for name in COMPONENT_FILES})
    if signing_key is not None:
        expiry = int(time.time()) + 86400 if expiry is None else expiry
        fixtures.signed = {
            name: sign_component(raw, signing_key, expiry) for name, raw in fixtures.unsigned.items()
        }
    return fixtures
