import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dacn.cstr_sim import RawSeries, simulate, write_series_csv
from dacn.dataio import (
    ChannelStats,
    SampleSet,
    SchemaError,
    TaskSpec,
    SealedSplitError,
    build_task,
    compute_stats,
    decimate,
    destandardize,
    ingest_csv,
    load_bundle,
    read_series_csv,
    save_bundle,
    split,
    standardize,
    take_per_class,
    window,
)


def series(values, fault="F0", mode="M1", onset=None, times=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    times = np.arange(1, len(values) + 1, dtype=float) if times is None else times
    return RawSeries(times, values, fault, mode, 0, tuple(f"x{i}" for i in range(values.shape[1])), onset)


def toy_runs(modes=("M1", "M2"), classes=("F0", "F1", "F2"), n=120, v=3, onset=40.0, seed=0):
    """Synthetic runs: class c shifts channel c after the onset; modes add an offset."""
    rng = np.random.default_rng(seed)
    out = []
    for mi, mode in enumerate(modes):
        for ci, fault in enumerate(classes):
            x = rng.normal(size=(n, v)) + 3.0 * mi
            t = np.arange(1, n + 1, dtype=float)
            if ci:
                x[t >= onset, (ci - 1) % v] += 4.0
            out.append(RawSeries(t, x, fault, mode, 0, tuple(f"x{i}" for i in range(v)), onset))
    return out


def test_stats_population_std():
    s = compute_stats(series([1.0, 2.0, 3.0]))
    assert s.mean[0] == pytest.approx(2.0)
    assert s.std[0] == pytest.approx(0.8164966, abs=1e-6)
    assert s.origin_mode == "M1" and s.origin_condition == "normal-only"


def test_stats_constant_channel_floored_with_warning():
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        s = compute_stats(series([5.0, 5.0, 5.0]))
    assert s.std[0] == 1e-8 and s.floored == (0,)


def test_stats_use_only_normal_runs():
    s = compute_stats([series([1.0, 3.0]), series([100.0, 200.0], fault="F1")])
    assert s.mean[0] == 2.0


def test_stats_reject_mixed_modes_and_empty():
    with pytest.raises(ValueError):
        compute_stats([series([1.0, 2.0]), series([1.0, 2.0], mode="M2")])
    with pytest.raises(ValueError):
        compute_stats([])
    with pytest.raises(ValueError):
        compute_stats([series([1.0, 2.0], fault="F3")])


def test_standardized_stats_are_unit():
    x = np.random.default_rng(0).normal(4.0, 3.0, size=(500, 4))
    s = series(x)
    z = standardize(s, compute_stats(s))
    again = compute_stats(z)
    assert np.all(np.abs(again.mean) < 1e-6) and np.all(np.abs(again.std - 1) < 1e-6)


def test_standardize_identities():
    x = np.random.default_rng(1).normal(size=(50, 3)) * [1, 10, 100]
    s = series(x)
    stats = compute_stats(s)
    assert np.allclose(standardize(series(np.tile(stats.mean, (4, 1))), stats).channels, 0.0)
    z = standardize(s, stats)
    assert np.array_equal(standardize(z, ChannelStats.unit(3)).channels, z.channels)
    assert np.allclose(destandardize(z, stats).channels, x, atol=1e-10)
    with pytest.raises(ValueError):
        standardize(s, ChannelStats.unit(2))


def test_normal_data_of_every_mode_standardizes_to_unit():
    for mode in ("M1", "M2", "M3"):
        s = simulate(mode, "F0", duration=400, seed=4)
        z = standardize(s, compute_stats(s))
        assert np.all(np.abs(z.channels.mean(0)) < 1e-6)
        assert np.all(np.abs(z.channels.std(0) - 1) < 1e-3)


def test_window_count_and_k1():
    w = window(series(np.arange(100.0)), 64)
    assert len(w) == 37 and w.X.shape == (37, 1, 64)
    x = np.random.default_rng(2).normal(size=(10, 3))
    w1 = window(series(x), 1, dtype=np.float64)
    assert np.array_equal(w1.X[:, :, 0], x)


def test_window_channels_first_and_order():
    x = np.arange(20.0).reshape(10, 2)
    w = window(series(x), 4, dtype=np.float64)
    assert np.array_equal(w.X[0], x[:4].T)
    assert np.array_equal(w.X[-1], x[-4:].T)
    assert w.end_times[0] == 4.0


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 200), k=st.integers(1, 80))
def test_window_count_formula(n, k):
    s = series(np.zeros(n))
    if n < k:
        with pytest.raises(ValueError):
            window(s, k)
    else:
        assert len(window(s, k)) == n - k + 1


def test_window_label_policy_at_onset():
    s = series(np.zeros(20), fault="F2", onset=10.0)
    end = window(s, 4, label=2, policy="end")
    # windows ending at t >= 10 are faulty: ends run 4..20
    assert list(end.y) == [0] * 6 + [2] * 11
    start = window(s, 4, label=2, policy="start")
    assert list(start.y) == [0] * 9 + [2] * 8
    with pytest.raises(ValueError):
        window(s, 4, policy="middle")


def test_split_800_200():
    y = np.repeat(np.arange(3), 1000)
    s = SampleSet(np.zeros((3000, 1, 1)), y, np.full(3000, "M1"))
    a, b = split(s, 0.8, seed=0)
    assert list(a.class_counts()) == [800] * 3 and list(b.class_counts()) == [200] * 3


def test_split_deterministic_disjoint_union():
    rng = np.random.default_rng(0)
    X = np.arange(50, dtype=float).reshape(50, 1, 1)
    y = rng.integers(0, 3, 50)
    s = SampleSet(X, y, np.full(50, "M1"))
    a, b = split(s, 0.7, seed=3)
    a2, _ = split(s, 0.7, seed=3)
    ia, ib = set(a.X.ravel()), set(b.X.ravel())
    assert ia.isdisjoint(ib) and ia | ib == set(range(50))
    assert np.array_equal(a.X, a2.X)
    for c in range(3):
        n = int(np.sum(y == c))
        assert abs(int(np.sum(a.y == c)) - 0.7 * n) <= 1


def test_split_rejects_tiny_class_and_bad_ratio():
    s = SampleSet(np.zeros((3, 1, 1)), [0, 0, 1], ["M1"] * 3)
    with pytest.raises(ValueError):
        split(s, 0.5)
    with pytest.raises(ValueError):
        split(s, 1.0)


def test_take_per_class():
    y = np.repeat(np.arange(4), [10, 3, 7, 12])
    s = SampleSet(np.zeros((len(y), 1, 1)), y, ["M1"] * len(y))
    assert list(take_per_class(s, 5).class_counts()) == [5, 3, 5, 5]
    assert take_per_class(s, None) is s


def test_decimate_keeps_last_sample():
    s = series(np.arange(10.0))
    d = decimate(s, 3)
    assert list(d.times) == [1.0, 4.0, 7.0, 10.0]
    assert decimate(s, 1) is s


def test_te_layout_gives_1401_windows_per_class():
    # 100 h at 3 s (t in minutes), onset 30 h, thinned to one row per 3 min
    n = 120000
    t = np.arange(1, n + 1) * 0.05
    runs = [RawSeries(t, np.random.default_rng(i).normal(size=(n, 2)), f, "M1", 0, ("a", "b"), None)
            for i, f in enumerate(["F0", "F2"])]
    spec = TaskSpec("M1", [], classes=["F0", "F2"], decimation=60, onset=1800.0)
    b = build_task(spec, runs)
    assert b.counts["train"] + b.counts["test1"] == 2 * 1401
    assert b.counts["train"] == 2 * 1120


def test_build_task_counts_tags_and_no_leak():
    runs = toy_runs(modes=("M1", "M2", "M3"))
    spec = TaskSpec("M1", ["M2", "M3"], classes=["F0", "F1", "F2"], k=8, seed=1)
    b = build_task(spec, runs)
    # windows ending at or after t=40: 120 - 40 + 1 = 81 per class
    assert b.counts["train"] + b.counts["test1"] == 3 * 81
    assert b.counts["train"] == 3 * 64
    assert set(b.train.modes) == {"M1"} and set(b.test1.modes) == {"M1"}
    assert set(b.test2.modes) == {"M2", "M3"}
    assert b.counts["test2"] == 2 * 3 * 81
    assert set(b.train.y) == set(b.test1.y) == set(b.test2.y) == {0, 1, 2}


def test_build_task_own_vs_source_stats():
    runs = toy_runs()
    own = build_task(TaskSpec("M1", ["M2"], classes=["F0", "F1", "F2"], k=8), runs)
    src = build_task(TaskSpec("M1", ["M2"], classes=["F0", "F1", "F2"], k=8, stats_scope="source"), runs)
    t2_own = own.test2.X[own.test2.y == 0].mean()
    t2_src = src.test2.X[src.test2.y == 0].mean()
    assert abs(t2_own) < 0.3 and t2_src > 2.0
    assert own.stats["M2"].origin_mode == "M2" and src.stats["M2"].origin_mode == "M1"


def test_build_task_empty_targets():
    b = build_task(TaskSpec("M1", [], classes=["F0", "F1", "F2"], k=8), toy_runs(modes=("M1",)))
    assert len(b.test2) == 0 and b.counts["test2"] == 0


def test_build_task_reports_gaps():
    runs = [r for r in toy_runs() if not (r.mode_id == "M2" and r.fault_id == "F2")]
    with pytest.raises(KeyError, match="M2: F2"):
        build_task(TaskSpec("M1", ["M2", "M3"], classes=["F0", "F1", "F2"], k=8), runs)


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("M1", ["M1"])
    with pytest.raises(ValueError):
        TaskSpec("M1", ["M2"], split_ratio=0.0)
    with pytest.raises(ValueError):
        TaskSpec("M1", ["M2"], stats_scope="global")


def test_task_spec_from_shipped_configs():
    from dacn.config import load_config

    t1 = TaskSpec.from_config(load_config("cstr_t1"))
    assert (t1.source_mode, t1.target_modes, t1.k, t1.split_ratio) == ("M1", ["M2", "M3"], 64, 0.8)
    assert t1.n_classes == 13
    t4 = TaskSpec.from_config(load_config("te_t4"))
    assert t4.source_mode == "M4" and t4.target_modes == ["M1", "M2", "M3", "M5", "M6"]
    assert t4.n_classes == 10


def test_test2_access_audit():
    b = build_task(TaskSpec("M1", ["M2"], classes=["F0", "F1", "F2"], k=8), toy_runs())
    assert b.test2_reads == 0
    _ = b.train, b.test1, b.data_hash
    assert b.test2_reads == 0
    _ = b.test2
    assert b.test2_reads == 1
    b.test2_sealed = True
    with pytest.raises(SealedSplitError):
        _ = b.test2


def test_csv_roundtrip(tmp_path):
    s = simulate("M1", "F5", duration=250, seed=3)
    write_series_csv(s, tmp_path / "M1_F5.csv")
    back = read_series_csv(tmp_path / "M1_F5.csv", schema=list(s.channel_names))
    assert back.equals(s)


def test_csv_schema_errors(tmp_path):
    p = tmp_path / "M1_F0.csv"
    p.write_text("t,a,b\n1,2,3\n")
    with pytest.raises(SchemaError, match="missing columns \\['c'\\]"):
        read_series_csv(p, schema=["a", "c"])
    p.write_text("t,a,b\n1,2,3\n2,x,3\n")
    with pytest.raises(SchemaError, match=":3:"):
        read_series_csv(p)
    p.write_text("t,a,b\n1,2,3\n2,3\n")
    with pytest.raises(SchemaError, match=":3:"):
        read_series_csv(p)
    q = tmp_path / "weird.csv"
    q.write_text("t,a\n1,2\n")
    with pytest.raises(SchemaError, match="mode/fault"):
        read_series_csv(q)


def test_csv_53_channel_schema(tmp_path):
    rows = np.random.default_rng(0).normal(size=(5, 54))
    header = "t," + ",".join(f"v{i}" for i in range(53))
    np.savetxt(tmp_path / "M4_F2.csv", rows, delimiter=",", header=header, comments="")
    (s,) = ingest_csv(tmp_path, schema=53)
    assert s.v == 53 and (s.mode_id, s.fault_id) == ("M4", "F2")
    with pytest.raises(SchemaError):
        ingest_csv(tmp_path, schema=52)


def test_bundle_cache_roundtrip(tmp_path):
    b = build_task(TaskSpec("M1", ["M2"], classes=["F0", "F1", "F2"], k=8), toy_runs())
    path = save_bundle(b, tmp_path / "b.npz")
    c = load_bundle(path)
    assert c.data_hash == b.data_hash
    assert np.array_equal(c.train.X, b.train.X) and list(c.test2.modes) == list(b.test2.modes)
    assert c.spec == b.spec
