"""Claim-set assembly and declarative appraisal against reference values."""

from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .identity import ComponentIdentity

CATEGORIES = ("instance_identity", "executables", "hardware", "configuration")
OPS = ("eq", "in_set", "gte", "present")
PIN_PATHS = ("/component/hash", "/component/signer")

_MISSING = object()


class AppraisalError(Exception):
    code = "AppraisalError"


class UnknownPolicy(AppraisalError):
    code = "UnknownPolicy"


class ValidationFailed(AppraisalError):
    code = "ValidationFailed"


class UnpinnablePolicy(AppraisalError):
    code = "UnpinnablePolicy"


class Tier(enum.IntEnum):
    NONE = 0
    AFFIRMING = 2
    WARNING = 32
    CONTRAINDICATED = 96


def build_claim_set(identity: ComponentIdentity, attester_claims: Mapping | None) -> dict:
    """Host-emitted component identity next to whatever the component said."""
    return {
        "component": {"hash": identity.hash_hex, "signer": identity.signer_hex},
        "attester": dict(attester_claims or {}),
    }


def _unescape(token: str) -> str:
    return token.replace("~1", "/").replace("~0", "~")


def resolve_pointer(claims: Any, pointer: str) -> Any:
    """Value at a slash-separated pointer, or the module's missing sentinel."""
    if pointer == "":
        return claims
    if not pointer.startswith("/"):
        return _MISSING
    node = claims
    for token in pointer[1:].split("/"):
        token = _unescape(token)
        if isinstance(node, Mapping) and token in node:
            node = node[token]
        elif isinstance(node, list) and token.isdigit() and int(token) < len(node):
            node = node[int(token)]
        else:
            return _MISSING
    return node


def normalize(value: Any) -> Any:
    """Byte strings compare as lowercase hex so they match JSON reference values."""
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, list):
        return [normalize(v) for v in value]
    if isinstance(value, Mapping):
        return {k: normalize(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class Rule:
    claim_path: str
    op: str
    reference_key: str | None
    category: str

    @classmethod
    def from_dict(cls, doc: Mapping) -> Rule:
        return cls(doc["claim_path"], doc["op"], doc.get("reference_key"), doc["category"])

    def to_dict(self) -> dict:
        return {
            "claim_path": self.claim_path,
            "op": self.op,
            "reference_key": self.reference_key,
            "category": self.category,
        }


@dataclass(frozen=True)
class AppraisalPolicy:
    policy_id: str
    rules: tuple[Rule, ...]

    @classmethod
    def from_dict(cls, doc: Mapping) -> AppraisalPolicy:
        try:
            return cls(doc["policy_id"], tuple(Rule.from_dict(r) for r in doc["rules"]))
        except (KeyError, TypeError) as exc:
            raise ValidationFailed(f"malformed policy document: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> AppraisalPolicy:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"policy_id": self.policy_id, "rules": [r.to_dict() for r in self.rules]}


@dataclass(frozen=True)
class RuleOutcome:
    rule: Rule
    passed: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {**self.rule.to_dict(), "passed": self.passed, "reason": self.reason}


@dataclass(frozen=True)
class TrustVector:
    tiers: dict[str, Tier] = field(default_factory=dict)

    @property
    def status(self) -> Tier:
        return max(self.tiers.values(), default=Tier.NONE)

    @property
    def affirming(self) -> bool:
        return self.status == Tier.AFFIRMING

    def to_dict(self) -> dict:
        return {"status": int(self.status), **{c: int(self.tiers.get(c, Tier.NONE)) for c in CATEGORIES}}

    @classmethod
    def from_dict(cls, doc: Mapping) -> TrustVector:
        # categories no rule touched serialize as NONE and are left out again
        return cls({c: Tier(doc[c]) for c in CATEGORIES if doc.get(c, Tier.NONE) != Tier.NONE})


def _evaluate_rule(rule: Rule, claims: Mapping, refs: Mapping[str, Any]) -> RuleOutcome:
    actual = resolve_pointer(claims, rule.claim_path)
    if actual is _MISSING:
        return RuleOutcome(rule, False, "claim absent")
    if rule.op == "present":
        return RuleOutcome(rule, True)
    if rule.claim_path in PIN_PATHS and actual is None:
        # an unsigned component can never satisfy a pin, whatever the reference says
        return RuleOutcome(rule, False, "component identity claim is null")
    if rule.reference_key not in refs:
        return RuleOutcome(rule, False, f"unknown reference key {rule.reference_key!r}")
    expected = refs[rule.reference_key]
    actual = normalize(actual)
    if rule.op == "eq":
        ok = actual == expected and type(actual) is type(expected)
    elif rule.op == "in_set":
        ok = isinstance(expected, list) and any(actual == e and type(actual) is type(e) for e in expected)
    elif rule.op == "gte":
        numeric = (int,)
        ok = (
            isinstance(actual, numeric) and not isinstance(actual, bool)
            and isinstance(expected, numeric) and not isinstance(expected, bool)
            and actual >= expected
        )
    else:
        return RuleOutcome(rule, False, f"unknown operator {rule.op!r}")
    return RuleOutcome(rule, ok, "" if ok else "mismatch")


def appraise(
    claims: Mapping,
    policy: AppraisalPolicy,
    refs: Mapping[str, Any],
    *,
    evidence_failure: str | None = None,
) -> tuple[TrustVector, list[RuleOutcome]]:
    """Evaluate every rule (no short-circuit) and fold outcomes per category.

    ``evidence_failure`` marks requests whose component rejected the
    evidence; the hardware category is then contraindicated regardless of
    the rules.
    """
    outcomes = [_evaluate_rule(rule, claims, refs) for rule in policy.rules]
    tiers: dict[str, Tier] = {}
    for outcome in outcomes:
        category = outcome.rule.category if outcome.rule.category in CATEGORIES else "configuration"
        current = tiers.get(category, Tier.AFFIRMING)
        tiers[category] = max(current, Tier.AFFIRMING if outcome.passed else Tier.CONTRAINDICATED)
    if evidence_failure is not None:
        outcomes.append(
            RuleOutcome(Rule("/attester", "verified", None, "hardware"), False, evidence_failure)
        )
        tiers["hardware"] = Tier.CONTRAINDICATED
    return TrustVector(tiers), outcomes


def validate_policy(policy: AppraisalPolicy, refs: Mapping[str, Any]) -> None:
    if not policy.policy_id:
        raise ValidationFailed("policy_id must be non-empty")
    if not any(rule.claim_path in PIN_PATHS for rule in policy.rules):
        raise ValidationFailed("policy must pin /component/hash or /component/signer")
    for rule in policy.rules:
        if rule.op not in OPS:
            raise ValidationFailed(f"unknown operator {rule.op!r}")
        if rule.category not in CATEGORIES:
            raise ValidationFailed(f"unknown category {rule.category!r}")
        if not rule.claim_path.startswith("/"):
            raise ValidationFailed(f"claim path {rule.claim_path!r} must start with '/'")
        if rule.op != "present" and rule.reference_key not in refs:
            raise ValidationFailed(f"reference key {rule.reference_key!r} is not installed")


class PolicyStore:
    """Policies and reference values, replaced atomically as a snapshot."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._policies: dict[str, AppraisalPolicy] = {}
        self._refs: dict[str, Any] = {}

    def snapshot(self) -> tuple[dict[str, AppraisalPolicy], dict[str, Any]]:
        # both dicts are replaced, never mutated, so the pair is consistent
        with self._lock:
            return self._policies, self._refs

    def policy(self, policy_id: str) -> AppraisalPolicy:
        policies, _ = self.snapshot()
        try:
            return policies[policy_id]
        except KeyError:
            raise UnknownPolicy(f"no policy {policy_id!r}") from None

    def install_policy(self, policy: AppraisalPolicy) -> None:
        with self._lock:
            validate_policy(policy, self._refs)
            self._policies = {**self._policies, policy.policy_id: policy}

    def install_reference_values(self, values: Mapping[str, Any]) -> None:
        for key in values:
            if not isinstance(key, str) or not key:
                raise ValidationFailed("reference keys must be non-empty text")
        with self._lock:
            self._refs = {**self._refs, **{k: normalize(v) for k, v in values.items()}}

    def load_directory(self, directory: str | Path) -> None:
        """Load ``reference-values.json`` then every other ``*.json`` as a policy."""
        directory = Path(directory)
        refs_file = directory / "reference-values.json"
        if refs_file.exists():
            self.install_reference_values(json.loads(refs_file.read_text()))
        for path in sorted(directory.glob("*.json")):
            if path != refs_file:
                self.install_policy(AppraisalPolicy.load(path))


def migrate_policy(
    legacy_rules: Iterable[Mapping | Rule],
    component_pin: Mapping[str, str],
    policy_id: str,
) -> AppraisalPolicy:
    """Rewrite a flat-claim policy for nested claim sets and pin the component.

    ``component_pin`` maps ``"hash"`` and/or ``"signer"`` to the reference
    key holding the expected value.
    """
    pins = [Rule(f"/component/{kind}", "eq", component_pin[kind], "instance_identity")
            for kind in ("hash", "signer") if component_pin.get(kind)]
    if not pins:
        raise UnpinnablePolicy("a component hash or signer pin is required")
    rewritten = []
    for rule in legacy_rules:
        rule = rule if isinstance(rule, Rule) else Rule.from_dict(rule)
        path = rule.claim_path if rule.claim_path.startswith("/") else "/" + rule.claim_path
        rewritten.append(Rule("/attester" + path, rule.op, rule.reference_key, rule.category))
    return AppraisalPolicy(policy_id, tuple(pins + rewritten))
