import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tce import datasets as dsio
from tce.datasets import (
    ORIGIN_CODE, Scaler, Transition, TransitionDataset, VariantSpec, apply_scaler, build_training_set, concat,
    fit_scaler,
)
from tce.errors import ChecksumMismatch, ContractViolation, FormatError, VersionMismatch
from tce.selection import select

from conftest import random_dataset


def test_transition_rows_and_origin_counts(rng):
    ds = random_dataset(rng, 5, origin="source")
    assert ds.origin_counts() == {"source": 5, "target": 0, "generated": 0}
    row = ds[2]
    assert isinstance(row, Transition) and row.origin == "source"
    back = TransitionDataset.from_transitions(list(ds.rows()))
    assert back.checksum() == ds.checksum()


def test_dataset_is_immutable(rng):
    ds = random_dataset(rng, 3)
    with pytest.raises(ValueError):
        ds.s[0, 0] = 1.0


def test_nonfinite_and_shape_checks():
    with pytest.raises(ContractViolation):
        TransitionDataset(np.zeros((2, 2)), np.zeros((2, 1)), [0.0, np.nan], np.zeros((2, 2)), [0, 0], [1, 1])
    with pytest.raises(ContractViolation):
        TransitionDataset(np.zeros((2, 2)), np.zeros((2, 1)), [0.0, 0.0], np.zeros((2, 3)), [0, 0], [1, 1])


def test_scaler_hand_values():
    s = np.array([[1.0, 10.0], [2.0, 10.0], [3.0, 10.0]])
    ds = TransitionDataset(s, np.zeros((3, 1)), np.zeros(3), s, np.zeros(3, bool), np.ones(3, np.int8))
    sc = fit_scaler(ds)
    assert np.allclose(sc.mean, [2.0, 10.0])
    # population std of (1, 2, 3) is sqrt(2/3); the constant column is clamped to 1
    assert np.allclose(sc.std, [np.sqrt(2.0 / 3.0), 1.0])


def test_scaler_identity_on_standardized(rng):
    x = rng.normal(size=(100, 3))
    x = (x - x.mean(0)) / x.std(0)
    sc = dsio.fit_scaler_states(x)
    assert np.allclose(sc.apply(x), x, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_scaler_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, 3)) * rng.uniform(0.1, 10, 3) + rng.normal(size=3)
    sc = dsio.fit_scaler_states(x)
    assert np.allclose(sc.invert(sc.apply(x)), x, rtol=1e-12, atol=1e-12)
    with pytest.raises(ContractViolation):
        Scaler(np.zeros(2), np.array([1.0, 0.0]))


def test_apply_scaler_view(rng):
    ds = random_dataset(rng, 30)
    norm = apply_scaler(ds)
    assert np.allclose(norm.s.mean(0), 0, atol=1e-12) and norm.metadata["normalized"]
    assert np.array_equal(norm.a, ds.a)


def test_variant_invariants():
    with pytest.raises(ContractViolation):
        VariantSpec("SimpleAug", 0.2, 0.0)
    with pytest.raises(ContractViolation):
        VariantSpec("OG", 0.0, 0.0)
    with pytest.raises(ContractViolation):
        VariantSpec("OG", 0.2, 0.1)
    with pytest.raises(ContractViolation):
        VariantSpec("SM", 0.2, 0.0)
    with pytest.raises(ContractViolation):
        VariantSpec("Other")
    assert VariantSpec.infer(0, 0).variant == "SimpleAug"
    assert VariantSpec.infer(0.2, 0).variant == "OG"
    assert VariantSpec.infer(0.2, 0.1).variant == "SM"


def _gen(rng, n, lam_cov):
    return random_dataset(rng, n, origin="generated").with_metadata(lam_cov=lam_cov)


def test_og_union_counts(rng):
    tgt = random_dataset(rng, 50)
    out = build_training_set(VariantSpec("OG", 0.2), None, tgt, _gen(rng, 100, 0.2))
    assert len(out) == 150
    assert out.origin_counts() == {"source": 0, "target": 50, "generated": 100}


def test_sm_union_counts(rng):
    src = random_dataset(rng, 1000, origin="source")
    tgt = random_dataset(rng, 50)
    gen = _gen(rng, 80, 0.2)
    sel = select(src, tgt, 0.1)
    out = build_training_set(VariantSpec("SM", 0.2, 0.1), src, tgt, gen, sel)
    assert out.origin_counts() == {"source": 100, "target": 50, "generated": 80}
    assert np.array_equal(out.s[:100], src.s[sel.indices])


def test_simple_aug_equals_og_at_zero_coverage(rng):
    tgt = random_dataset(rng, 20)
    gen = _gen(rng, 30, 0.0)
    a = build_training_set(VariantSpec("SimpleAug"), None, tgt, gen)
    b = build_training_set(VariantSpec.infer(0.0, 0.0), None, tgt, gen)
    assert a.checksum() == b.checksum() and np.array_equal(a.origin, b.origin)


def test_variant_mismatch_rejected(rng):
    tgt = random_dataset(rng, 10)
    src = random_dataset(rng, 40, origin="source")
    with pytest.raises(ContractViolation):
        build_training_set(VariantSpec("OG", 0.2), None, tgt, _gen(rng, 5, 0.5))
    with pytest.raises(ContractViolation):
        build_training_set(VariantSpec("SM", 0.2, 0.1), src, tgt, _gen(rng, 5, 0.2), None)
    with pytest.raises(ContractViolation):
        build_training_set(VariantSpec("SM", 0.2, 0.1), src, tgt, _gen(rng, 5, 0.2), select(src, tgt, 0.3))
    with pytest.raises(ContractViolation):
        build_training_set(VariantSpec("OG", 0.2), src, tgt, _gen(rng, 5, 0.2), select(src, tgt, 0.3))


def test_concat_dims_checked(rng):
    with pytest.raises(ContractViolation):
        concat([random_dataset(rng, 3), random_dataset(rng, 3, ds=3)])
    with pytest.raises(ContractViolation):
        concat([])


def test_empty_round_trip():
    ds = TransitionDataset.empty(4, 2, {"k": 1})
    back = dsio.decode(dsio.encode(ds))
    assert len(back) == 0 and back.state_dim == 4 and back.action_dim == 2 and back.metadata == {"k": 1}


def test_one_row_round_trip_bit_exact(tmp_path):
    ds = TransitionDataset(np.array([[0.1, -2.5]]), np.array([[1e-300]]), [np.pi], np.array([[3.0, 4.0]]),
                           [True], ["generated"], metadata={"seed": 3})
    dsio.write(ds, tmp_path / "one.tced")
    back = dsio.read(tmp_path / "one.tced")
    for f in ("s", "a", "r", "s_next", "done", "origin"):
        assert getattr(back, f).tobytes() == getattr(ds, f).tobytes()
    assert dsio.encode(back) == (tmp_path / "one.tced").read_bytes()


def test_large_round_trip_checksum(tmp_path):
    rng = np.random.default_rng(0)
    n = 100_000
    origin = np.repeat(np.array([0, 2, 1], np.int8), [40_000, 50_000, 10_000])
    ds = TransitionDataset(rng.normal(size=(n, 4)), rng.normal(size=(n, 2)), rng.uniform(size=n),
                           rng.normal(size=(n, 4)), rng.uniform(size=n) < 0.02, origin)
    path = tmp_path / "big.tced"
    dsio.write(ds, path)
    raw = path.read_bytes()
    payload_end = len(raw) - 4
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[payload_end - 8 * n * 12:payload_end])
    back = dsio.read(path)
    assert back.checksum() == ds.checksum()
    assert np.array_equal(back.origin, ds.origin) and np.array_equal(back.scaler.mean, ds.scaler.mean)


def test_corruption_detected(rng):
    raw = bytearray(dsio.encode(random_dataset(rng, 10)))
    raw[-10] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        dsio.decode(bytes(raw))


def test_version_and_magic_errors(rng):
    raw = bytearray(dsio.encode(random_dataset(rng, 2)))
    bad_version = raw[:4] + struct.pack("<H", 99) + raw[6:]
    with pytest.raises(VersionMismatch):
        dsio.decode(bytes(bad_version))
    with pytest.raises(FormatError):
        dsio.decode(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        dsio.decode(bytes(raw[:8]))


def test_summary_fields(rng):
    info = dsio.summary(random_dataset(rng, 12))
    assert info["n_rows"] == 12 and info["origins"]["target"] == 12
    assert set(info["stats"]) == {"s", "a", "r", "s_next"}
    assert dsio.summary(TransitionDataset.empty(2, 1))["stats"]["s"] is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 40), st.integers(1, 5), st.integers(1, 3))
def test_round_trip_property(seed, n, ds_dim, da_dim):
    rng = np.random.default_rng(seed)
    origin = rng.integers(0, 3, size=n).astype(np.int8)
    ds = TransitionDataset(rng.normal(size=(n, ds_dim)), rng.normal(size=(n, da_dim)), rng.normal(size=n),
                           rng.normal(size=(n, ds_dim)), rng.uniform(size=n) < 0.5, origin,
                           metadata={"seed": seed})
    blob = dsio.encode(ds)
    back = dsio.decode(blob)
    assert dsio.encode(back) == blob
    assert np.array_equal(back.origin, ds.origin) and np.array_equal(back.done, ds.done)
