"""Ready-made attester/verifier setups for both MockTEE platforms."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, NoEncryption, PrivateFormat

from ..appraisal import AppraisalPolicy, migrate_policy
from ..cmw import Format
from ..ear import public_key_bytes
from ..identity import ExecutionPolicy, TrustStore, sign_component
from ..resolver import measurement_of
from .evidence import MEASUREMENT_LEN, KeyMaterial, Platform, collateral_locator, generate_evidence, generate_keys
from .fixtures import COMPONENT_FILES, component_bytes
from .wrap import wrap_for_trustmee

COMPONENT_FOR = {"A": "mocktee_a", "B": "mocktee_b"}
VENDOR_POLICY = ExecutionPolicy(
    fuel_budget=2_000_000_000, network_allowed=True, max_memory_bytes=128 * 1024 * 1024, wall_clock_limit_ms=5_000
)


def policy_id(platform: Platform, pin: str = "hash") -> str:
    base = f"mocktee-{platform.lower()}"
    return base if pin == "hash" else f"{base}-{pin}"


def legacy_rules(platform: Platform) -> list[dict]:
    """Flat-claim policy as a platform-specific verifier would have used it."""
    p = f"mocktee-{platform.lower()}"
    rules = [
        {"claim_path": "/platform", "op": "eq", "reference_key": f"{p}.platform", "category": "hardware"},
        {"claim_path": "/measurement", "op": "eq", "reference_key": f"{p}.measurement", "category": "executables"},
        {"claim_path": "/root_key", "op": "eq", "reference_key": f"{p}.root", "category": "hardware"},
        {"claim_path": "/report_data", "op": "present", "reference_key": None, "category": "instance_identity"},
    ]
    if platform == "A":
        rules.append({"claim_path": "/tcb_level", "op": "gte", "reference_key": f"{p}.min_tcb", "category": "hardware"})
    else:
        rules.append({"claim_path": "/svn", "op": "gte", "reference_key": f"{p}.min_svn", "category": "hardware"})
        rules.append({"claim_path": "/debug", "op": "eq", "reference_key": f"{p}.debug", "category": "configuration"})
    return rules


@dataclass
class PlatformSetup:
    platform: Platform
    keys: KeyMaterial
    measurement: bytes
    component: bytes
    signed_component: bytes

    @property
    def component_hash(self) -> str:
        return measurement_of(self.component).hex()

    @property
    def hash_ref(self) -> str:
        return f"sha256:{self.component_hash}"


class Scenario:
    """Keys, components, policies and request builders for A and B.

    ``vendor_key`` signs the fixture components and is trusted with
    :data:`VENDOR_POLICY`.
    """

    def __init__(self, *, now: float | None = None, vendor_key: Ed25519PrivateKey | None = None,
                 signature_expiry: int | None = None) -> None:
        now = time.time() if now is None else now
        self.vendor_key = vendor_key or Ed25519PrivateKey.generate()
        self.vendor_public = public_key_bytes(self.vendor_key)
        self.expiry = int(now) + 86400 if signature_expiry is None else signature_expiry
        self.platforms: dict[str, PlatformSetup] = {}
        for platform in ("A", "B"):
            unsigned = component_bytes(COMPONENT_FOR[platform])
            self.platforms[platform] = PlatformSetup(
                platform,
                generate_keys(platform, now=now),
                os.urandom(MEASUREMENT_LEN[platform]),
                unsigned,
                sign_component(unsigned, self.vendor_key, self.expiry),
            )

    def __getitem__(self, platform: str) -> PlatformSetup:
        return self.platforms[platform]

    def reference_values(self) -> dict:
        refs = {"vendor.signer": self.vendor_public.hex()}
        for platform, setup in self.platforms.items():
            p = f"mocktee-{platform.lower()}"
            refs.update({
                f"{p}.component": setup.component_hash,
                f"{p}.platform": p,
                f"{p}.measurement": setup.measurement.hex(),
                f"{p}.root": setup.keys.root_public.hex(),
            })
            if platform == "A":
                refs[f"{p}.min_tcb"] = 1
            else:
                refs[f"{p}.min_svn"] = 1
                refs[f"{p}.debug"] = False
        return refs

    def policies(self) -> list[AppraisalPolicy]:
        out = []
        for platform in self.platforms:
            p = f"mocktee-{platform.lower()}"
            out.append(migrate_policy(legacy_rules(platform), {"hash": f"{p}.component"}, policy_id(platform)))
            out.append(migrate_policy(legacy_rules(platform), {"signer": "vendor.signer"}, policy_id(platform, "signer")))
        return out

    def trust_store(self) -> TrustStore:
        return TrustStore({self.vendor_public: VENDOR_POLICY})

    def install(self, verifier) -> None:
        verifier.policies.install_reference_values(self.reference_values())
        for policy in self.policies():
            verifier.policies.install_policy(policy)
        verifier.trust.replace(self.trust_store())

    def evidence(self, platform: Platform, nonce: bytes, **kwargs) -> tuple[bytes, bytes]:
        setup = self.platforms[platform]
        kwargs.setdefault("tcb", 1)
        return generate_evidence(platform, setup.keys, setup.measurement, nonce, **kwargs)

    def request(
        self,
        platform: Platform,
        *,
        nonce: bytes | None = None,
        tamper: int | None = None,
        staple: str | None = "unsigned",
        component_ref: str | None = None,
        policy: str | None = None,
        collateral_url: str | None = None,
        fmt: Format = "cbor",
    ) -> tuple[bytes, bytes]:
        """Build ``(request body, nonce)``.

        ``tamper`` flips one bit at that evidence offset; ``staple`` selects
        the unsigned or signed component (None staples nothing);
        ``collateral_url`` replaces the stapled chain with a locator.
        """
        setup = self.platforms[platform]
        nonce = os.urandom(64) if nonce is None else nonce
        evidence, chain = self.evidence(platform, nonce)
        if tamper is not None:
            buf = bytearray(evidence)
            buf[tamper % len(buf)] ^= 0x01
            evidence = bytes(buf)
        endorsement = collateral_locator(collateral_url) if collateral_url else chain
        stapled = {"unsigned": setup.component, "signed": setup.signed_component, None: None}[staple]
        body = wrap_for_trustmee(
            evidence, [endorsement], component_ref or setup.hash_ref, policy or policy_id(platform), nonce,
            stapled, fmt=fmt,
        )
        return body, nonce


def write_fixture_dir(directory: str | Path, scenario: Scenario | None = None) -> Scenario:
    """Materialize a scenario on disk.

    Layout::

        keys/vendor.key            hex Ed25519 seed of the component signer
        keys/verifier.key          hex Ed25519 seed of the verifier
        keys/mocktee-<p>-chain.cbor   endorsement (certificate chain)
        components/<name>.wasm     unsigned fixture components
        components/<name>.signed.wasm
        policies/*.json            appraisal policies + reference-values.json
        trust-store.json
        req-mocktee-<p>.cbor       a valid request, component stapled
        config.json                service configuration using the above
    """
    scenario = scenario or Scenario()
    root = Path(directory)
    for sub in ("keys", "components", "policies", "cache", "scratch"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    def seed_hex(key: Ed25519PrivateKey) -> str:
        return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()).hex() + "\n"

    (root / "keys" / "vendor.key").write_text(seed_hex(scenario.vendor_key))
    (root / "keys" / "verifier.key").write_text(seed_hex(Ed25519PrivateKey.generate()))
    for name in COMPONENT_FILES:
        raw = component_bytes(name)
        (root / "components" / f"{name}.wasm").write_bytes(raw)
        (root / "components" / f"{name}.signed.wasm").write_bytes(
            sign_component(raw, scenario.vendor_key, scenario.expiry)
        )
    (root / "policies" / "reference-values.json").write_text(json.dumps(scenario.reference_values(), indent=2))
    for policy in scenario.policies():
        (root / "policies" / f"{policy.policy_id}.json").write_text(json.dumps(policy.to_dict(), indent=2))
    (root / "trust-store.json").write_text(json.dumps(scenario.trust_store().to_dict(), indent=2))
    for platform, setup in scenario.platforms.items():
        p = f"mocktee-{platform.lower()}"
        body, nonce = scenario.request(platform, nonce=b"fixture-nonce-" + p.encode())
        (root / f"req-{p}.cbor").write_bytes(body)
        (root / "keys" / f"{p}-chain.cbor").write_bytes(setup.keys.endorsement())
    config = {
        "listen": "127.0.0.1:8080",
        "signing_key": str(root / "keys" / "verifier.key"),
        "trust_store": str(root / "trust-store.json"),
        "policy_dir": str(root / "policies"),
        "cache_dir": str(root / "cache"),
        "scratch_dir": str(root / "scratch"),
        "admin_token": "change-me",
    }
    (root / "config.json").write_text(json.dumps(config, indent=2))
    return scenario
