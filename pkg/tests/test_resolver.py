import hashlib
import os
import threading

import pytest

from vcverifier.mocktee.fixtures import component_bytes
from vcverifier.mocktee.servers import FixtureServer, registry_server
from vcverifier.resolver import (
    ComponentCache,
    ComponentRef,
    DigestMismatch,
    FetchFailed,
    InvalidRef,
    NotFound,
    RegistryClient,
    Resolver,
    ResponseTooLarge,
    registry_fetch,
)

A = component_bytes("mocktee_a")
B = component_bytes("mocktee_b")
A_REF = ComponentRef.parse("sha256:" + hashlib.sha256(A).hexdigest())


@pytest.mark.parametrize("text", ["sha256:" + "ab" * 32, "reg://localhost:5000/mocktee/a:v1", "reg://r.example/x:1.0-rc_2"])
def test_parse_valid_refs(text):
    assert str(ComponentRef.parse(text)) == text


@pytest.mark.parametrize("text", ["sha256:" + "ab" * 31, "sha256:" + "AB" * 32, "sha1:" + "a" * 40, "reg://host/Name:v1",
                                  "reg://host/name", "http://host/name:v1", "", "reg:///name:v1"])
def test_parse_invalid_refs(text):
    with pytest.raises(InvalidRef):
        ComponentRef.parse(text)


def test_cached_ref_makes_no_network_calls(tmp_path):
    with registry_server({"mocktee/a:v1": A}) as reg:
        resolver = Resolver(ComponentCache(tmp_path), RegistryClient())
        ref = ComponentRef.parse(f"reg://{reg.authority}/mocktee/a:v1")
        assert resolver.resolve(ref)[1] == "registry"
        hits = reg.total_hits
        for _ in range(5):
            data, source = resolver.resolve(ref)
            assert source == "cache" and data == A
        assert reg.total_hits == hits == 1
        assert resolver.counters["resolve.source=cache"] == 5


def test_stapled_then_cache():
    resolver = Resolver(ComponentCache())
    assert resolver.resolve(A_REF, A) == (A, "stapled")
    assert resolver.resolve(A_REF, A) == (A, "cache")
    assert resolver.resolve(A_REF) == (A, "cache")
    assert resolver.counters == {"resolve.source=stapled": 1, "resolve.source=cache": 2, "resolve.stapled_ignored": 1}


def test_stapled_bytes_must_match_hash_ref():
    resolver = Resolver(ComponentCache())
    with pytest.raises(DigestMismatch):
        resolver.resolve(A_REF, B)
    assert len(resolver.cache) == 0


def test_hash_ref_from_tampered_registry():
    tampered = bytearray(A)
    tampered[-1] ^= 1
    with FixtureServer({f"/v1/components/sha256/{A_REF.digest.hex()}": bytes(tampered)}) as reg:
        resolver = Resolver(ComponentCache(), RegistryClient(default_registry=reg.authority))
        with pytest.raises(DigestMismatch):
            resolver.resolve(A_REF)
    assert len(resolver.cache) == 0


def test_hash_ref_from_default_registry():
    with FixtureServer({f"/v1/components/sha256/{A_REF.digest.hex()}": A}) as reg:
        resolver = Resolver(ComponentCache(), RegistryClient(default_registry=reg.authority))
        assert resolver.resolve(A_REF) == (A, "registry")
        assert resolver.resolve(A_REF) == (A, "cache")


def test_hash_ref_without_any_source_is_not_found():
    with pytest.raises(NotFound):
        Resolver(ComponentCache()).resolve(A_REF)


def test_registry_fetch_bytes_match_fixture():
    with registry_server({"mocktee/b:v2": B}) as reg:
        assert registry_fetch(ComponentRef.parse(f"reg://{reg.authority}/mocktee/b:v2")) == B
        assert reg.hits["/v1/components/mocktee/b/v2"] == 1


def test_unknown_tag_is_fetch_failed():
    with registry_server({"mocktee/b:v2": B}) as reg:
        with pytest.raises(FetchFailed, match="404"):
            registry_fetch(ComponentRef.parse(f"reg://{reg.authority}/mocktee/b:v3"))


def test_unreachable_registry_is_fetch_failed():
    with pytest.raises(FetchFailed):
        registry_fetch(ComponentRef.parse("reg://127.0.0.1:1/x:y"))


def test_oversized_registry_response():
    with registry_server({"big/blob:v1": b"\0" * (100 * 1024 * 1024)}) as reg:
        client = RegistryClient()
        with pytest.raises(ResponseTooLarge):
            registry_fetch(ComponentRef.parse(f"reg://{reg.authority}/big/blob:v1"), client)
        assert client.fetches == 0


def test_registry_fetch_is_single_flight():
    with registry_server({"mocktee/a:v1": A}, delay=0.2) as reg:
        resolver = Resolver(ComponentCache())
        ref = ComponentRef.parse(f"reg://{reg.authority}/mocktee/a:v1")
        sources = []
        threads = [threading.Thread(target=lambda: sources.append(resolver.resolve(ref)[1])) for _ in range(5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert reg.total_hits == 1
        assert sorted(sources) == ["cache"] * 4 + ["registry"]


def test_mutable_tag_is_served_from_cache_until_cleared(tmp_path):
    with registry_server({"mocktee/a:v1": A}) as reg:
        resolver = Resolver(ComponentCache(tmp_path))
        ref = ComponentRef.parse(f"reg://{reg.authority}/mocktee/a:v1")
        resolver.resolve(ref)
        reg.routes["/v1/components/mocktee/a/v1"] = B
        assert resolver.resolve(ref) == (A, "cache")
        resolver.cache.clear()
        assert resolver.resolve(ref) == (B, "registry")


def test_cache_persists_and_checks_integrity(tmp_path):
    cache = ComponentCache(tmp_path)
    key = cache.put(A)
    assert (tmp_path / f"{key.hex()}.bin").read_bytes() == A
    cache.put(B)
    # corrupt B on disk
    b_path = tmp_path / f"{hashlib.sha256(B).hexdigest()}.bin"
    b_path.write_bytes(B[:-1] + bytes([B[-1] ^ 1]))
    reloaded = ComponentCache(tmp_path)
    assert reloaded.get(key) == A
    assert reloaded.get(hashlib.sha256(B).digest()) is None
    assert not b_path.exists()


def test_cache_lru_by_bytes(tmp_path):
    blobs = [b"\x00asm\x01\x00\x00\x00" + os.urandom(1000) for _ in range(4)]
    cache = ComponentCache(tmp_path, cap_bytes=2500)
    keys = [cache.put(b) for b in blobs[:2]]
    cache.get(keys[0])  # refresh the first entry
    cache.put(blobs[2])
    assert cache.get(keys[0]) is not None and cache.get(keys[1]) is None
    assert cache.size_bytes <= 2500
    assert len(list(tmp_path.glob("*.bin"))) == 2


def test_cache_hit_always_matches_key():
    cache = ComponentCache()
    for blob in (A, B, component_bytes("probe")):
        key = cache.put(blob)
        assert hashlib.sha256(cache.get(key)).digest() == key


def test_resolve_coherence():
    with registry_server({"p/a:v1": A, "p/b:v1": B}) as reg:
        resolver = Resolver(ComponentCache())
        refs = [ComponentRef.parse(f"reg://{reg.authority}/p/{n}:v1") for n in "ab"] + [A_REF]
        for ref in refs:
            first = resolver.resolve(ref)
            assert resolver.resolve(ref) == (first[0], "cache")
