import math

import numpy as np
import pytest

import oracles
from specaccess.belief import oracle_reward
from specaccess.metrics import (
    MetricsReport,
    RocPoint,
    and_fusion_miss_probability,
    and_fusion_threshold,
    cr_throughput,
    emit_report,
    lu_throughput,
    normalized_loss,
    np_detect,
    read_report,
    roc_is_monotone,
    roc_point,
)

W = 160e3


def test_cr_throughput_examples():
    T, K = 50, 4
    assert cr_throughput(np.full(T, 1e5), np.zeros((T, K)), np.ones((T, K)), W) == 0.0
    access = np.zeros((T, K))
    access[:, :3] = 1
    assert cr_throughput(np.full(T, 2e5), access, np.full((T, K), 1e6), W) == pytest.approx(3 * 2e5)
    assert cr_throughput([], np.zeros((0, K)), np.zeros((0, K)), W) == 0.0


def test_cr_throughput_matches_summation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T, K = int(rng.integers(1, 40)), int(rng.integers(1, 6))
        rates = rng.uniform(1e4, 6e5, T)
        access = rng.integers(0, 2, (T, K))
        sinr = rng.exponential(3.0, (T, K))
        ours = cr_throughput(rates, access, sinr, W)
        assert ours == pytest.approx(oracles.throughput_sum(rates, access, sinr, W), rel=1e-12)


def test_lu_throughput_examples():
    busy = np.array([1, 0, 1, 1, 0], bool)
    assert lu_throughput(busy, np.full(5, 1e9), 0.9e6, W) == (0.9e6, False)
    assert lu_throughput(busy, np.zeros(5), 0.9e6, W) == (0.0, False)
    assert lu_throughput(np.zeros(5, bool), np.full(5, 1e9), 0.9e6, W) == (0.0, True)


def test_lu_throughput_mixed_recompute():
    rng = np.random.default_rng(1)
    thr = 2 ** (0.9e6 / W) - 1
    busy = rng.random(500) < 0.6
    sinr = rng.exponential(thr, 500)
    ok = sum(1 for b, s in zip(busy, sinr) if b and s >= thr)
    assert lu_throughput(busy, sinr, 0.9e6, W)[0] == pytest.approx(0.9e6 * ok / busy.sum(), rel=1e-12)


def test_normalized_loss_examples():
    truth = np.array([[0, 1, 0], [1, 1, 1], [0, 0, 1]])
    oracle = np.array([oracle_reward(b, 1.0) for b in truth])
    trace, mean, excluded = normalized_loss(oracle, oracle)
    assert mean == 0.0 and excluded == 1 and np.isnan(trace[1])
    trace, mean, _ = normalized_loss(np.zeros(3), oracle)
    assert mean == 1.0
    rng = np.random.default_rng(2)
    realized = rng.integers(-2, 3, 100).astype(float)
    orc = rng.integers(0, 4, 100).astype(float)
    _, mean, excluded = normalized_loss(realized, orc)
    keep = [1 - r / o for r, o in zip(realized, orc) if o > 0]
    assert mean == pytest.approx(sum(keep) / len(keep)) and excluded == 100 - len(keep)


def test_oracle_reward_is_exhaustive_maximum():
    rng = np.random.default_rng(3)
    for _ in range(300):
        b = rng.integers(0, 2, int(rng.integers(1, 8)))
        lam = float(rng.uniform(0, 5))
        assert oracle_reward(b, lam) == pytest.approx(oracles.best_realized(b, lam))


def test_roc_definitions():
    truth = np.random.default_rng(4).integers(0, 2, (40, 5))
    always = roc_point(np.ones_like(truth), truth)
    never = roc_point(np.zeros_like(truth), truth)
    assert (always.p_fa, always.p_md) == (0.0, 1.0)
    assert (never.p_fa, never.p_md) == (1.0, 0.0)
    empty = roc_point(np.ones((3, 2)), np.zeros((3, 2)))
    assert empty.flagged and math.isnan(empty.p_md)
    assert roc_is_monotone([RocPoint(0, 0.1, 0.9, 1, 1), RocPoint(1, 0.5, 0.4, 1, 1)])
    assert not roc_is_monotone([RocPoint(0, 0.1, 0.3, 1, 1), RocPoint(1, 0.5, 0.4, 1, 1)])


def test_np_threshold_analytic_inversion():
    eta = and_fusion_threshold(300, 0.3, 0.1)
    # every one of the 300 noise-only energies exceeds eta with total probability 0.3
    assert math.exp(-eta / 0.1) ** 300 == pytest.approx(0.3, rel=1e-12)
    with pytest.raises(ValueError):
        and_fusion_threshold(300, 1.0, 0.1)


def test_np_noise_only_false_alarm_rate():
    truth = np.zeros((20000, 18), bool)
    declared = np_detect(truth, 300, 0.3, 0.1, 1.1, np.random.default_rng(5))
    assert abs(declared.mean() - 0.30) <= 0.02


def test_np_minimum_shortcut_matches_full_samples():
    rng = np.random.default_rng(6)
    eta = and_fusion_threshold(300, 0.3, 0.1)
    full = (rng.exponential(0.1, (20000, 300)) > eta).all(axis=1).mean()
    assert abs(full - 0.3) <= 0.02
    busy = (rng.exponential(1.1, (20000, 300)) > eta).all(axis=1)
    assert abs((1 - busy.mean()) - and_fusion_miss_probability(300, 0.3, 0.1, 1.1)) <= 0.02


def test_np_infinite_snr_never_misses():
    truth = np.ones((2000, 18), bool)
    declared = np_detect(truth, 300, 0.3, 0.1, 1e12, np.random.default_rng(7))
    assert declared.mean() > 0.999
    assert and_fusion_miss_probability(300, 0.3, 0.1, 1e12) < 1e-9


def test_empty_report_writes_headers_only(tmp_path):
    paths = emit_report(MetricsReport(), tmp_path)
    assert len(paths) == 6
    for p in paths:
        assert len(open(p).read().splitlines()) == 1


def _report():
    rng = np.random.default_rng(8)
    return MetricsReport(
        scalars={"a": 1.5, "b": 3, "c": float(rng.random())},
        utility=[(float(u), float(o)) for u, o in rng.integers(0, 5, (10, 2))],
        loss=[0.25, float("nan"), -0.5],
        roc=[RocPoint(1.0, 0.125, 0.5, 10, 4)],
        estimator=[[1, -12.5, 0.3, 0.8, 0.1, 0.3, 0.3, 0.7, 0.001, 1000]],
        solver=[[0, 1, 0.5, 2.25]],
    )


def test_report_round_trip_and_bytes(tmp_path):
    rep = _report()
    emit_report(rep, tmp_path / "a")
    emit_report(rep, tmp_path / "b")
    back = read_report(tmp_path / "a")
    assert back.scalars["a"] == 1.5 and back.scalars["b"] == 3
    assert back.scalars["c"] == pytest.approx(rep.scalars["c"], rel=1e-8)
    assert back.utility == rep.utility
    assert back.loss[0] == 0.25 and math.isnan(back.loss[1])
    assert back.roc[0].p_md == 0.5 and back.estimator == rep.estimator and back.solver == rep.solver
    for name in ("metrics.csv", "roc.csv", "utility_trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_unwritable_directory_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_report(MetricsReport(), blocker)
