"""Platform formats live only in the mocktee kit and its components."""

import ast
from pathlib import Path

import pytest

import vcverifier
from vcverifier.mocktee import evidence

PKG = Path(vcverifier.__file__).parent
CORE = ("service", "appraisal", "sandbox", "resolver", "identity", "cmw", "ear", "cbor")
FORMAT_CONSTANTS = [evidence.A_MAGIC, evidence.A_CERT_TAG, evidence.B_HEADER, evidence.B_CERT_TAG]


def outside_kit():
    return sorted(p for p in PKG.rglob("*.py") if "mocktee" not in p.relative_to(PKG).parts)


def test_kit_constants_are_what_we_grep_for():
    assert [c.decode() for c in FORMAT_CONSTANTS] == ["MTA1", "MTA-CERT", "MTB1", "MTB-CERT"]


@pytest.mark.parametrize("path", outside_kit(), ids=lambda p: p.name)
def test_no_format_constants_outside_kit(path):
    text = path.read_text()
    for const in FORMAT_CONSTANTS:
        assert const.decode() not in text, f"{path.name} mentions {const!r}"


@pytest.mark.parametrize("module", CORE)
def test_core_modules_know_nothing_about_mocktee(module):
    source = (PKG / f"{module}.py").read_text()
    assert "mocktee" not in source.lower()
    for node in ast.walk(ast.parse(source)):
        if isinstance(node, ast.ImportFrom):
            assert "mocktee" not in (node.module or "")
        # no magic-byte comparisons smuggled in as literals
        if isinstance(node, ast.Constant) and isinstance(node.value, bytes):
            assert not any(c in node.value for c in FORMAT_CONSTANTS)


def test_platform_b_has_its_own_component_only():
    from vcverifier.mocktee.scenario import COMPONENT_FOR

    assert set(COMPONENT_FOR) == {"A", "B"}
    assert COMPONENT_FOR["A"] != COMPONENT_FOR["B"]
