"""Performance metrics, the energy-detection baseline, and report files.

All CSV numbers are written with 9 significant digits so that identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .channel import outage_threshold

REPORT_FILES = ("metrics.csv", "utility_trace.csv", "loss_trace.csv", "roc.csv",
                "estimator_trace.csv", "solver_trace.csv")
ESTIMATOR_COLUMNS = ["iteration", "log_likelihood", "q0", "q1", "p00", "p01", "p10", "p11",
                     "mse_if_reference", "slots"]
SOLVER_COLUMNS = ["fragment", "iteration", "max_change", "mean_value"]


def fmt(x) -> str:
    """Stable text form of a number; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"


def _parse(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)


# ---------------------------------------------------------------------------
# throughput


def cr_throughput(rates, access, sinr, w_hz: float) -> float:
    """Mean per-slot CR throughput: successful accessed subcarriers times their rate.

    ``rates`` is per slot (or per slot and subcarrier); ``access`` and
    ``sinr`` are ``(T, K)``. A transmission succeeds when the realized SINR
    reaches the outage threshold of its rate.
    """
    access = np.asarray(access, dtype=float)
    if access.size == 0 or access.shape[0] == 0:
        return 0.0
    sinr = np.asarray(sinr, dtype=float)
    rates = np.asarray(rates, dtype=float)
    if rates.ndim == 1:
        rates = np.broadcast_to(rates[:, None], access.shape)
    thresholds = 2.0 ** (rates / w_hz) - 1.0
    ok = sinr >= thresholds
    return float(np.sum(rates * access * ok) / access.shape[0])


def lu_throughput(busy, sinr, lu_rate: float, w_hz: float) -> tuple[float, bool]:
    """Licensed-user throughput per transmission; returns ``(value, no_transmissions)``."""
    busy = np.asarray(busy, dtype=bool)
    n = int(busy.sum())
    if n == 0:
        return 0.0, True
    ok = np.asarray(sinr, dtype=float) >= outage_threshold(lu_rate, w_hz)
    return float(lu_rate * np.sum(ok & busy) / n), False


# ---------------------------------------------------------------------------
# decision quality


def normalized_loss(realized, oracle) -> tuple[np.ndarray, float, int]:
    """Per-slot ``1 - realized / oracle``; slots with zero oracle reward are ``nan``.

    Returns the trace, its mean over included slots (``nan`` when none) and
    the number of excluded slots.
    """
    realized = np.asarray(realized, dtype=float)
    oracle = np.asarray(oracle, dtype=float)
    trace = np.full(realized.shape, np.nan)
    ok = oracle > 0
    trace[ok] = 1.0 - realized[ok] / oracle[ok]
    mean = float(trace[ok].mean()) if ok.any() else float("nan")
    return trace, mean, int((~ok).sum())


@dataclass
class RocPoint:
    label: float
    p_fa: float
    p_md: float
    idle_cells: int
    busy_cells: int

    @property
    def flagged(self) -> bool:
        return self.idle_cells == 0 or self.busy_cells == 0


def roc_point(access, truth, label: float = float("nan")) -> RocPoint:
    """False alarm ``P(no access | idle)`` and missed detection ``P(access | busy)``."""
    access = np.asarray(access, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    idle, busy = ~truth, truth
    n_idle, n_busy = int(idle.sum()), int(busy.sum())
    p_fa = float((~access & idle).sum() / n_idle) if n_idle else float("nan")
    p_md = float((access & busy).sum() / n_busy) if n_busy else float("nan")
    return RocPoint(label, p_fa, p_md, n_idle, n_busy)


def roc_is_monotone(points, tol: float = 0.0) -> bool:
    """``P_MD`` nonincreasing when points are ordered by ``P_FA``."""
    pts = sorted((p.p_fa, p.p_md) for p in points)
    return all(b[1] <= a[1] + tol for a, b in zip(pts, pts[1:]))


# ---------------------------------------------------------------------------
# energy detection with AND fusion


def and_fusion_threshold(n_samples: int, target_p_fa: float, sigma_v2: float) -> float:
    """Per-sample energy threshold for AND fusion at a target false-alarm rate.

    AND fusion declares a subcarrier busy only if every one of the
    ``n_samples`` energies exceeds the threshold. Noise-only energies are
    exponential with mean ``sigma_v2``, so each exceeds ``eta`` with
    probability ``exp(-eta / sigma_v2)``; the fused false-alarm rate is that
    to the power ``n_samples``.
    """
    if not 0.0 < target_p_fa < 1.0:
        raise ValueError("target false-alarm rate must lie in (0, 1)")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    return -sigma_v2 * math.log(target_p_fa) / n_samples


def and_fusion_miss_probability(n_samples: int, target_p_fa: float, sigma_v2: float,
                                busy_var: float) -> float:
    eta = and_fusion_threshold(n_samples, target_p_fa, sigma_v2)
    return 1.0 - math.exp(-n_samples * eta / busy_var)


def np_detect(truth, n_samples: int, target_p_fa: float, sigma_v2: float, busy_var: float,
              rng: np.random.Generator) -> np.ndarray:
    """Busy declarations (bool array shaped like ``truth``) from AND-fused energy detection.

    The minimum of ``n_samples`` exponential energies with mean ``v`` is
    exponential with mean ``v / n_samples``, so one draw per cell stands in
    for the full sample set.
    """
    truth = np.asarray(truth, dtype=bool)
    eta = and_fusion_threshold(n_samples, target_p_fa, sigma_v2)
    var = np.where(truth, busy_var, sigma_v2)
    smallest = rng.exponential(1.0, size=truth.shape) * var / n_samples
    return smallest > eta


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    scalars: dict[str, float] = field(default_factory=dict)
    utility: list[tuple[float, float]] = field(default_factory=list)  # (realized, oracle) per slot
    loss: list[float] = field(default_factory=list)
    roc: list[RocPoint] = field(default_factory=list)
    estimator: list[list] = field(default_factory=list)  # rows in ESTIMATOR_COLUMNS order
    solver: list[list] = field(default_factory=list)     # rows in SOLVER_COLUMNS order

    def tables(self) -> dict[str, tuple[list[str], list[list]]]:
        return {
            "metrics.csv": (["name", "value"], [[k, v] for k, v in sorted(self.scalars.items())]),
            "utility_trace.csv": (["slot", "utility", "oracle_utility"],
                                  [[t + 1, u, o] for t, (u, o) in enumerate(self.utility)]),
            "loss_trace.csv": (["slot", "normalized_loss"],
                               [[t + 1, v] for t, v in enumerate(self.loss)]),
            "roc.csv": (["label", "p_fa", "p_md", "idle_cells", "busy_cells"],
                        [[p.label, p.p_fa, p.p_md, p.idle_cells, p.busy_cells] for p in self.roc]),
            "estimator_trace.csv": (ESTIMATOR_COLUMNS, self.estimator),
            "solver_trace.csv": (SOLVER_COLUMNS, self.solver),
        }


def write_table(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_table(path) -> tuple[list[str], list[list]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def emit_report(report: MetricsReport, out_dir) -> list[str]:
    """Write the six report CSVs into ``out_dir``; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, (header, rows) in report.tables().items():
        path = os.path.join(out_dir, name)
        write_table(path, header, rows)
        paths.append(path)
    return paths


def read_report(in_dir) -> MetricsReport:
    """Inverse of :func:`emit_report` (values come back at file precision)."""
    def load(name):
        path = os.path.join(in_dir, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"report file missing: {path}")
        return read_table(path)[1]

    rep = MetricsReport()
    for name, value in load("metrics.csv"):
        rep.scalars[name] = _parse(value)
    rep.utility = [(_parse(u), _parse(o)) for _, u, o in load("utility_trace.csv")]
    rep.loss = [float("nan") if v == "" else float(v) for _, v in load("loss_trace.csv")]
    for label, p_fa, p_md, n_idle, n_busy in load("roc.csv"):
        nan = float("nan")
        rep.roc.append(RocPoint(nan if label == "" else float(label), nan if p_fa == "" else float(p_fa),
                                nan if p_md == "" else float(p_md), int(n_idle), int(n_busy)))
    rep.estimator = [[_parse(v) for v in row] for row in load("estimator_trace.csv")]
    rep.solver = [[_parse(v) for v in row] for row in load("solver_trace.csv")]
    return rep
