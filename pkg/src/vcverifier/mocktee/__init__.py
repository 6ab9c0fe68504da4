"""Synthetic TEE ecosystem for desk-scale testing.

Two deliberately different evidence formats share nothing but the idea of
a signed report:

* MockTEE-A: fixed-layout report, Ed25519, two-link certificate chain.
* MockTEE-B: tag-length-value report, ECDSA P-256, three-link chain.

All format knowledge outside the sandboxed components lives here.
"""

from .evidence import (
    PLATFORMS,
    KeyMaterial,
    ReferenceVerifyError,
    collateral_locator,
    generate_evidence,
    generate_keys,
    native_reference_verify,
)
from .fixtures import FixtureSet, build_fixture_components, component_bytes
from .wrap import wrap_for_trustmee

__all__ = [
    "PLATFORMS",
    "FixtureSet",
    "KeyMaterial",
    "ReferenceVerifyError",
    "build_fixture_components",
    "collateral_locator",
    "component_bytes",
    "generate_evidence",
    "generate_keys",
    "native_reference_verify",
    "wrap_for_trustmee",
]
