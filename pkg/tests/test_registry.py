import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multilora.errors import (
    CorruptionError,
    DomainError,
    FormatError,
    TruncationError,
    UnknownAdapterError,
    UnsupportedVersionError,
    ValidationError,
)
from multilora.linalg import LoraLayerDelta
from multilora.registry import (
    AdapterRegistry,
    LoraAdapter,
    Manifest,
    ManifestRecord,
    deserialize_adapter,
    diff_sync_plan,
    estimate_adapter_bytes,
    estimate_full_checkpoint_bytes,
    fnv1a64,
    payload_bytes,
    serialize_adapter,
)

from conftest import random_adapter

FIXTURES = Path(__file__).parent / "fixtures"


def one_by_one(alpha=1.0, adapter_id="tiny"):
    return LoraAdapter(adapter_id, {"w": LoraLayerDelta([[1.0]], [[1.0]], alpha, 1)})


def random_shapes(rng, n_layers=4, max_d=16):
    return {
        f"layer{i}": (int(rng.integers(1, max_d + 1)), int(rng.integers(1, max_d + 1)))
        for i in range(int(rng.integers(1, n_layers + 1)))
    }


class TestAdapter:
    def test_id_charset(self):
        delta = LoraLayerDelta([[1.0]], [[1.0]], 1.0)
        for bad in ["", "a b", "a/b", "x" * 129, "é"]:
            with pytest.raises(ValidationError):
                LoraAdapter(bad, {"w": delta})
        LoraAdapter("A-z_0.9", {"w": delta})
        LoraAdapter("x" * 128, {"w": delta})

    def test_needs_an_entry(self):
        with pytest.raises(ValidationError):
            LoraAdapter("a", {})


class TestSerialize:
    def test_header(self):
        data = serialize_adapter(one_by_one())
        assert data[:4] == b"LORA"
        assert struct.unpack("<II", data[4:12]) == (1, 1)
        assert len(data) == 12 + 2 + 1 + 16 + 4 + 4

    def test_round_trip(self):
        a = one_by_one()
        assert deserialize_adapter(serialize_adapter(a), "tiny") == a

    def test_alpha_diff_is_four_bytes(self):
        x = serialize_adapter(one_by_one(alpha=1.0))
        y = serialize_adapter(one_by_one(alpha=2.5))
        diff = [i for i in range(len(x)) if x[i] != y[i]]
        assert len(x) == len(y)
        # alpha sits after header(12) + name_len(2) + name(1) + d_out, d_in, rank (12)
        alpha_at = 12 + 2 + 1 + 12
        assert set(diff) <= set(range(alpha_at, alpha_at + 4)) and diff
        assert x[alpha_at : alpha_at + 4] == struct.pack("<f", 1.0)
        assert y[alpha_at : alpha_at + 4] == struct.pack("<f", 2.5)

    def test_sorted_bytewise(self):
        d = LoraLayerDelta([[1.0]], [[1.0]], 1.0)
        a = LoraAdapter("s", {"b": d, "B": d, "a": d, "L10": d, "L2": d})
        data = serialize_adapter(a)
        assert list(deserialize_adapter(data, "s").entries) == ["B", "L10", "L2", "a", "b"]

    def test_bad_magic(self):
        data = bytearray(serialize_adapter(one_by_one()))
        data[:4] = b"XORA"
        with pytest.raises(FormatError):
            deserialize_adapter(bytes(data), "x")

    def test_bad_version(self):
        data = bytearray(serialize_adapter(one_by_one()))
        data[4:8] = struct.pack("<I", 2)
        with pytest.raises(UnsupportedVersionError):
            deserialize_adapter(bytes(data), "x")

    def test_truncated_by_one_byte(self):
        data = serialize_adapter(one_by_one())
        with pytest.raises(TruncationError) as info:
            deserialize_adapter(data[:-1], "x")
        assert info.value.offset == len(data) - 4

    @pytest.mark.parametrize("cut", [0, 3, 7, 11, 13, 20])
    def test_truncated_anywhere(self, cut):
        data = serialize_adapter(one_by_one())
        with pytest.raises((TruncationError, FormatError)):
            deserialize_adapter(data[:cut], "x")

    def test_trailing_bytes_are_corruption(self):
        with pytest.raises(CorruptionError):
            deserialize_adapter(serialize_adapter(one_by_one()) + b"\0", "x")

    def test_inconsistent_dims_are_corruption(self):
        data = bytearray(serialize_adapter(one_by_one()))
        data[23:27] = struct.pack("<I", 0)  # rank = 0
        with pytest.raises(CorruptionError):
            deserialize_adapter(bytes(data), "x")

    def test_nan_payload_is_corruption(self):
        data = bytearray(serialize_adapter(one_by_one()))
        data[-4:] = struct.pack("<f", float("nan"))
        with pytest.raises(CorruptionError):
            deserialize_adapter(bytes(data), "x")

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_random(self, seed):
        rng = np.random.default_rng(seed)
        a = random_adapter(rng, random_shapes(rng), "rt")
        data = serialize_adapter(a)
        back = deserialize_adapter(data, "rt")
        assert back == a
        assert serialize_adapter(back) == data

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_payload_size(self, seed):
        rng = np.random.default_rng(seed)
        a = random_adapter(rng, random_shapes(rng), "sz")
        headers = 12 + sum(2 + len(k.encode()) + 16 for k in a.entries)
        expected = 4 * sum(d.rank * (d.d_in + d.d_out) for d in a.entries.values())
        assert len(serialize_adapter(a)) - headers == expected == payload_bytes(a)


class TestFixtures:
    @pytest.mark.parametrize("fid", ["one_by_one", "two_layers", "utf8_names"])
    def test_fixture_parses_and_reserializes(self, fid):
        expected = json.loads((FIXTURES / "expected.json").read_text())[fid]
        data = (FIXTURES / f"{fid}.lora").read_bytes()
        a = deserialize_adapter(data, fid)
        assert set(a.entries) == set(expected)
        for name, e in expected.items():
            d = a.entries[name]
            assert (d.d_out, d.d_in, d.rank, d.alpha) == (e["d_out"], e["d_in"], e["rank"], e["alpha"])
            np.testing.assert_array_equal(d.a, np.array(e["a"], np.float32))
            np.testing.assert_array_equal(d.b, np.array(e["b"], np.float32))
        assert serialize_adapter(a) == data


class TestSizes:
    def test_full_checkpoint(self):
        assert estimate_full_checkpoint_bytes(175e9, 2) == 350_000_000_000
        assert estimate_full_checkpoint_bytes(1, 1) == 1
        assert estimate_full_checkpoint_bytes(1e9, 4) == 4_000_000_000

    @pytest.mark.parametrize("args", [(0, 2), (-1, 2), (5, 0), (1.5, 2)])
    def test_full_checkpoint_domain(self, args):
        with pytest.raises(DomainError):
            estimate_full_checkpoint_bytes(*args)

    def test_adapter_bytes(self):
        assert 192 * 8 * 8192 * 2 == 25_165_824
        assert estimate_adapter_bytes([(4096, 4096)] * 192, 8, 2) == 25_165_824
        assert estimate_adapter_bytes([(1, 1)], 1, 1) == 2
        with pytest.raises(DomainError):
            estimate_adapter_bytes([(1, 1)], 0, 1)
        with pytest.raises(DomainError):
            estimate_adapter_bytes([(0, 1)], 1, 1)


class TestFnv:
    def test_reference_vectors(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8


def rec(adapter_id, digest, size=10):
    return ManifestRecord(adapter_id, digest, size)


class TestSyncPlan:
    def test_empty_local(self):
        assert diff_sync_plan(Manifest(), Manifest([rec("a1", 1)])) == ["a1"]

    def test_identical(self):
        assert diff_sync_plan(Manifest([rec("a1", 7)]), Manifest([rec("a1", 7)])) == []

    def test_changed_and_new(self):
        local = Manifest([rec("a1", 1), rec("a2", 2)])
        remote = Manifest([rec("a1", 3), rec("a3", 4)])
        # oracle: new ids by set difference, changed ids by digest compare
        new = set(remote.digests()) - set(local.digests())
        changed = {
            k for k in set(remote.digests()) & set(local.digests())
            if remote.digests()[k] != local.digests()[k]
        }
        assert sorted(new | changed) == ["a1", "a3"]
        assert diff_sync_plan(local, remote) == ["a1", "a3"]

    def test_manifest_text_round_trip(self):
        m = Manifest([rec("b", 0xDEADBEEF, 5), rec("a", 1, 2)])
        text = m.to_text()
        assert text == "a 0000000000000001 2\nb 00000000deadbeef 5\n"
        assert Manifest.from_text(text) == m

    def test_manifest_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            Manifest.from_text("a 01 1\na 02 1\n")
        with pytest.raises(FormatError):
            Manifest.from_text("a 01\n")

    def test_fixture_manifests(self):
        local = Manifest.load(FIXTURES / "local.manifest")
        remote = Manifest.load(FIXTURES / "remote.manifest")
        assert diff_sync_plan(local, remote) == ["a1", "a3"]


class TestRegistry:
    def test_put_get_remove(self, tmp_path):
        reg = AdapterRegistry(tmp_path)
        a = one_by_one(adapter_id="a1")
        data = reg.put(a)
        assert (tmp_path / "a1.lora").read_bytes() == data
        assert reg.get("a1") == a
        m = Manifest.load(tmp_path / "MANIFEST")
        assert m.records["a1"] == ManifestRecord("a1", fnv1a64(data), len(data))
        reg.remove("a1")
        assert reg.ids() == []
        assert Manifest.load(tmp_path / "MANIFEST") == Manifest()
        with pytest.raises(UnknownAdapterError):
            reg.remove("a1")

    def test_rescan_and_verify(self, tmp_path):
        reg = AdapterRegistry(tmp_path)
        reg.put(one_by_one(adapter_id="a1"))
        reg.put(one_by_one(2.0, adapter_id="a2"))
        again = AdapterRegistry(tmp_path)
        assert again.ids() == ["a1", "a2"]
        assert again.manifest() == reg.manifest()
        assert again.verify() == []
        # tamper with a file behind the registry's back
        (tmp_path / "a2.lora").write_bytes(serialize_adapter(one_by_one(3.0, "a2")))
        assert again.verify() == ["a2"]

    def test_put_rejects_bad_bytes(self, tmp_path):
        reg = AdapterRegistry(tmp_path)
        with pytest.raises(FormatError):
            reg.put_bytes("bad", b"XORA" + b"\0" * 8)
        assert reg.ids() == []

    def test_sync_between_registries(self, tmp_path):
        rng = np.random.default_rng(5)
        shapes = {"w": (4, 4)}
        local = AdapterRegistry(tmp_path / "local")
        remote = AdapterRegistry(tmp_path / "remote")
        for name in ["a", "b", "c"]:
            remote.put(random_adapter(rng, shapes, name))
        local.put_bytes("a", remote.get_bytes("a"))
        local.put(random_adapter(rng, shapes, "b"))
        plan = diff_sync_plan(local.manifest(), remote.manifest())
        assert plan == ["b", "c"]
        for adapter_id in plan:
            local.put_bytes(adapter_id, remote.get_bytes(adapter_id))
        assert diff_sync_plan(local.manifest(), remote.manifest()) == []
