import numpy as np
import pytest

from catsg import kernels
from catsg import oscillator as osc
from catsg.bundle import read_bundle, write_bundle
from catsg.errors import DataError


def underdamped(t, m, g, k, x0=1.0, v0=0.0):
    wd = np.sqrt(k / m - g**2 / (4 * m**2))
    a = g / (2 * m)
    return np.exp(-a * t) * (x0 * np.cos(wd * t) + (v0 + a * x0) / wd * np.sin(wd * t))


def test_undamped_closed_form():
    p = osc.OscParams(gamma0=0.0, scenario="VM")
    tr = osc.simulate_trajectory(p, osc.InitialState(1.0, 0.0))
    assert np.max(np.abs(tr.position - np.cos(tr.t))) < 1e-6
    assert np.max(np.abs(tr.acceleration + np.cos(tr.t))) < 1e-6


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_underdamped_closed_form(backend):
    p = osc.OscParams(gamma0=0.1, scenario="VM")
    tr = osc.simulate_trajectory(p, osc.InitialState(1.0, 0.0), backend=backend)
    ref = underdamped(tr.t, 1.0, 0.1, 1.0)
    assert tr.t[-1] == pytest.approx(15.75)
    assert np.max(np.abs(tr.position - ref)) < 1e-5


def test_vp_acceleration_residual():
    p = osc.OscParams(alpha=0.1, beta=0.005, eta=0.05)
    tr = osc.simulate_trajectory(p, osc.InitialState(0.7, -0.3))
    t = tr.t
    resid = p.mass(t) * tr.acceleration + p.damping(t) * tr.velocity + p.stiffness(t) * tr.position
    assert np.max(np.abs(resid)) < 1e-8


def test_energy_non_increasing():
    p = osc.OscParams(gamma0=0.3, scenario="VM")
    tr = osc.simulate_trajectory(p, osc.InitialState(1.5, 0.5))
    e = 0.5 * tr.velocity**2 + 0.5 * tr.position**2
    assert np.all(np.diff(e) <= 1e-6)


def test_invalid_params_rejected():
    with pytest.raises(DataError):
        osc.OscParams(beta=0.1, scenario="VM")
    with pytest.raises(DataError):
        osc.OscParams(m0=0.0)
    with pytest.raises(DataError):
        osc.simulate_trajectory(osc.OscParams(alpha=-1.0, scenario="VM"), osc.InitialState(1, 0))
    with pytest.raises(DataError):
        osc.simulate_trajectory(osc.OscParams(), osc.InitialState(1, 0), horizon_steps=1)


def test_dominant_fraction_train_vm():
    rng = np.random.default_rng(0)
    ranges = osc.SplitRanges.table("VM")
    alphas = np.array([osc.sample_environment("train", "VM", ranges, rng).alpha for _ in range(100_000)])
    frac = np.mean((alphas >= 0.0) & (alphas <= 0.2))
    assert abs(frac - 0.8) < 0.01


def test_test_split_vp_support():
    rng = np.random.default_rng(1)
    table = osc.SplitRanges.table("VP")
    for _ in range(2000):
        p = osc.sample_environment("test", "VP", table, rng)
        for name in ("alpha", "beta", "eta"):
            v = getattr(p, name)
            assert any(lo <= v <= hi for lo, hi in table.intervals[name].values())


def test_pdom_one_stays_dominant():
    rng = np.random.default_rng(2)
    table = osc.SplitRanges.table("VP", p_dom=1.0)
    for split in ("train", "val", "test"):
        for _ in range(500):
            p = osc.sample_environment(split, "VP", table, rng)
            for name in ("alpha", "beta", "eta"):
                lo, hi = table.intervals[name][split]
                assert lo <= getattr(p, name) <= hi


def test_unknown_split_rejected():
    with pytest.raises(DataError):
        osc.sample_environment("holdout", "VM")


def test_overlapping_ranges_rejected():
    with pytest.raises(DataError):
        osc.SplitRanges({"alpha": {"train": (0, 0.5), "val": (0.4, 0.6), "test": (0.7, 1)}})


def test_dataset_sizes_and_context_identity():
    ds = osc.build_dataset("VM", {"train": 30, "val": 10, "test": 10}, seed=0)
    assert [len(ds[s]) for s in ("train", "val", "test")] == [30, 10, 10]
    rec = ds["train"].params[0]
    p = osc.OscParams(scenario="VM", **{f: rec[f] for f in osc.PARAM_FIELDS})
    tr = osc.simulate_trajectory(p, osc.InitialState(rec["x0"], rec["v0"]))
    np.testing.assert_array_equal(ds["train"].c[0, :, 0], tr.velocity.astype(np.float32))
    np.testing.assert_array_equal(ds["train"].c[0, :, 1], tr.position.astype(np.float32))
    np.testing.assert_array_equal(ds["train"].x[0, :, 0], tr.acceleration.astype(np.float32))


def test_default_split_sizes():
    ds = osc.build_dataset("VM", {"train": 3000, "val": 1000, "test": 1000}, seed=0)
    assert ds.meta["D"] == 1 and ds.meta["D_c"] == 2
    assert {s: len(ds[s]) for s in ds.splits} == {"train": 3000, "val": 1000, "test": 1000}


def test_deterministic_bytes(tmp_path):
    for name in ("a", "b"):
        ds = osc.build_cf_pairs(osc.build_dataset("VM", {"train": 10, "val": 10, "test": 10}, seed=5), seed=6)
        write_bundle(ds, tmp_path / name)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_distinct_ids_for_distinct_counts():
    a = osc.build_dataset("VM", {"train": 5, "val": 5, "test": 5}, seed=0)
    b = osc.build_dataset("VM", {"train": 6, "val": 5, "test": 5}, seed=0)
    assert a.meta["dataset_id"] != b.meta["dataset_id"]


def test_cf_pairs(small_vm):
    for s in small_vm.splits.values():
        for rec in s.params:
            assert 2.2 <= rec["x0_cf"] <= 4.0 and -2.5 <= rec["v0_cf"] <= -1.0
    s = small_vm["test"]
    rec = s.params[0]
    p = osc.OscParams(scenario="VM", **{f: rec[f] for f in osc.PARAM_FIELDS})
    t = np.arange(64) * 0.25
    pos, vel, acc = (s.ccf[0, :, 1].astype(np.float64), s.ccf[0, :, 0].astype(np.float64),
                     s.xcf[0, :, 0].astype(np.float64))
    # float32 storage limits the residual here; the float64 check lives in the VP test above
    resid = p.mass(t) * acc + p.damping(t) * vel + p.stiffness(t) * pos
    assert np.max(np.abs(resid)) < 1e-5


def test_cf_identity_intervention():
    ds = osc.build_dataset("VM", {"train": 5, "val": 5, "test": 5}, seed=8)
    # a degenerate cf interval equal to one sample's own initial state
    rec = ds["test"].params[0]
    point = ((rec["x0"], rec["x0"]), (rec["v0"], rec["v0"]))
    osc.build_cf_pairs(ds, point, seed=1, splits=["test"])
    np.testing.assert_array_equal(ds["test"].xcf[0], ds["test"].x[0])
    np.testing.assert_array_equal(ds["test"].ccf[0], ds["test"].c[0])


def test_cf_requires_params():
    ds = osc.build_dataset("VM", {"train": 5, "val": 5, "test": 5}, seed=8)
    ds["test"].params = []
    with pytest.raises(DataError):
        osc.build_cf_pairs(ds, splits=["test"])


def test_bundle_roundtrip(tmp_path, small_vm):
    write_bundle(small_vm, tmp_path / "b")
    back = read_bundle(tmp_path / "b")
    assert back.meta["splits"] == {"train": 64, "val": 16, "test": 16}
    for name, s in small_vm.splits.items():
        b = back[name]
        for f in ("x", "c", "xcf", "ccf"):
            assert getattr(b, f).tobytes() == getattr(s, f).tobytes()
        assert b.params == s.params
