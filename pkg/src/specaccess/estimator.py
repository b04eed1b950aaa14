"""Baum-Welch estimation of the occupancy parameters from sensing logs.

The E-step runs an exact scaled forward-backward pass over the ``2**K'``
joint states of each fragment and reduces the smoothed pairwise posteriors
to the sufficient statistics of the six parameters. The M-step is closed
form.

A fragment whose first subcarrier is not subcarrier 1 of the band does not
follow ``q`` on that subcarrier (its lower neighbour lives in another
fragment). Such fragments carry their own two-parameter "boundary law" for
the first subcarrier, estimated alongside ``theta``; ``q`` is learned only
from the leading fragment.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .channel import SensingModel
from .occupancy import (
    ThetaVector,
    initial_distribution,
    state_bits,
    transition_matrix,
    with_first_law,
)

MAX_FRAGMENT_WIDTH = 12


@dataclass
class SensingLog:
    """Complex samples per slot and subcarrier; ``nan`` where not sensed."""

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (tau, K) array")

    @property
    def tau(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def sensed(self) -> np.ndarray:
        return ~np.isnan(self.samples)

    @classmethod
    def empty(cls, tau: int, width: int) -> "SensingLog":
        return cls(np.full((tau, width), np.nan + 0j))

    @classmethod
    def from_observations(cls, observations: Sequence[dict], width: int) -> "SensingLog":
        log = cls.empty(len(observations), width)
        for t, obs in enumerate(observations):
            for k, y in obs.items():
                log.samples[t, k] = y
        return log

    def fragment(self, start: int, width: int) -> "SensingLog":
        return SensingLog(self.samples[:, start:start + width])

    def head(self, tau: int) -> "SensingLog":
        return SensingLog(self.samples[:tau])

    def max_sensed(self) -> int:
        return int(self.sensed.sum(axis=1).max()) if self.tau else 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "subcarrier", "y_re", "y_im"])
            for t, k in zip(*np.nonzero(self.sensed)):
                y = self.samples[t, k]
                writer.writerow([t + 1, k + 1, f"{y.real:.17g}", f"{y.imag:.17g}"])

    @classmethod
    def read_csv(cls, path, width: int, tau: int | None = None) -> "SensingLog":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                rows.append((int(row["t"]) - 1, int(row["subcarrier"]) - 1,
                             complex(float(row["y_re"]), float(row["y_im"]))))
        n = tau if tau is not None else (max(r[0] for r in rows) + 1 if rows else 0)
        log = cls.empty(n, width)
        for t, k, y in rows:
            if not 0 <= k < width:
                raise ValueError(f"subcarrier {k + 1} outside 1..{width}")
            log.samples[t, k] = y
        return log


def random_sensing_sets(tau: int, width: int, kappa: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random ``kappa``-subsets per slot, as a ``(tau, kappa)`` array."""
    if not 0 <= kappa <= width:
        raise ValueError("kappa must lie in 0..K")
    keys = rng.random((tau, width))
    return np.sort(np.argsort(keys, axis=1)[:, :kappa], axis=1)


def observe_trace(trace: np.ndarray, sensing_sets: np.ndarray, model: SensingModel,
                  rng: np.random.Generator) -> SensingLog:
    """Sense a known occupancy trace on the given per-slot subcarrier sets."""
    trace = np.asarray(trace)
    log = SensingLog.empty(*trace.shape)
    rows = np.repeat(np.arange(trace.shape[0]), sensing_sets.shape[1])
    cols = sensing_sets.reshape(-1)
    var = model.variances[trace[rows, cols]]
    z = rng.standard_normal((rows.size, 2))
    log.samples[rows, cols] = np.sqrt(var / 2.0) * (z[:, 0] + 1j * z[:, 1])
    return log


# ---------------------------------------------------------------------------
# E-step


@dataclass
class EStepStats:
    """Expected transition counts.

    ``first[w, b]``: first-subcarrier transitions from ``w`` to ``b``.
    ``interior[u, v, b]``: subcarrier ``k >= 2`` moving from ``v`` to ``b``
    while subcarrier ``k - 1`` is ``u`` in the new slot.
    """

    first: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    interior: np.ndarray = field(default_factory=lambda: np.zeros((2, 2, 2)))

    def __add__(self, other: "EStepStats") -> "EStepStats":
        return EStepStats(self.first + other.first, self.interior + other.interior)


@dataclass
class EStepResult:
    stats: EStepStats
    log_likelihood: float
    posteriors: np.ndarray | None = None


def emission_log_likelihoods(log: SensingLog, model: SensingModel) -> np.ndarray:
    """``log f(Y(t) | B)`` for every slot and fragment state, ``(tau, 2**K')``."""
    width = log.width
    sensed = log.sensed
    energy = np.where(sensed, np.abs(np.nan_to_num(log.samples)) ** 2, 0.0)
    logf = model.energy_log_likelihoods(energy)  # (tau, K', 2)
    logf = np.where(sensed[..., None], logf, 0.0)
    bits = state_bits(width).astype(float)
    base = logf[..., 0].sum(axis=1)
    llr = logf[..., 1] - logf[..., 0]
    return base[:, None] + llr @ bits.T


def bit_kernels(theta: ThetaVector, width: int) -> np.ndarray:
    """Per-subcarrier 2x2 kernels ``M[k, u, v, b] = P(B_k = b | B'_k = v, B_{k-1} = u)``.

    For ``k = 0`` there is no lower neighbour and both ``u`` slices hold the
    first-subcarrier law.
    """
    p, q = theta.p_matrix, theta.q_vector
    out = np.empty((width, 2, 2, 2))
    first = np.stack([1.0 - q, q], axis=1)
    out[0] = first[None]
    inner = np.stack([1.0 - p, p], axis=2)
    out[1:] = inner[None]
    return out


@njit(cache=True)
def _push(c, kern, width):  # pragma: no cover - compiled
    # replace old bits by new bits, lowest subcarrier first
    n = c.shape[0]
    for k in range(width):
        bit = 1 << k
        for i0 in range(n):
            if i0 & bit:
                continue
            i1 = i0 | bit
            u = (i0 >> (k - 1)) & 1 if k > 0 else 0
            c0 = c[i0]
            c1 = c[i1]
            c[i0] = c0 * kern[k, u, 0, 0] + c1 * kern[k, u, 1, 0]
            c[i1] = c0 * kern[k, u, 0, 1] + c1 * kern[k, u, 1, 1]


@njit(cache=True)
def _pull(c, kern, width):  # pragma: no cover - compiled
    # replace new bits by old bits, highest subcarrier first
    n = c.shape[0]
    for k in range(width - 1, -1, -1):
        bit = 1 << k
        for i0 in range(n):
            if i0 & bit:
                continue
            i1 = i0 | bit
            u = (i0 >> (k - 1)) & 1 if k > 0 else 0
            c0 = c[i0]
            c1 = c[i1]
            c[i0] = kern[k, u, 0, 0] * c0 + kern[k, u, 0, 1] * c1
            c[i1] = kern[k, u, 1, 0] * c0 + kern[k, u, 1, 1] * c1


@njit(cache=True)
def _scaled_recursions(em, kernels, init):  # pragma: no cover - compiled
    n_seq, tau, n_states = em.shape
    width = kernels.shape[1]
    alpha = np.empty((n_seq, tau, n_states))
    g = np.empty((n_seq, tau, n_states))
    scale = np.empty((n_seq, tau))
    buf = np.empty(n_states)
    for f in range(n_seq):
        kern = kernels[f]
        s = 0.0
        for j in range(n_states):
            buf[j] = init[j] * em[f, 0, j]
            s += buf[j]
        scale[f, 0] = s
        for t in range(tau):
            if t > 0:
                for j in range(n_states):
                    buf[j] = alpha[f, t - 1, j]
                _push(buf, kern, width)
                s = 0.0
                for j in range(n_states):
                    buf[j] *= em[f, t, j]
                    s += buf[j]
                scale[f, t] = s
            inv = 1.0 / s if s > 0.0 else 0.0
            for j in range(n_states):
                alpha[f, t, j] = buf[j] * inv
        # g[t] = em[t] * beta[t] / scale[t]; a zero scale marks an impossible sequence
        inv = 1.0 / scale[f, tau - 1] if scale[f, tau - 1] > 0.0 else 0.0
        for j in range(n_states):
            g[f, tau - 1, j] = em[f, tau - 1, j] * inv
        for t in range(tau - 2, -1, -1):
            for j in range(n_states):
                buf[j] = g[f, t + 1, j]
            _pull(buf, kern, width)
            inv = 1.0 / scale[f, t] if scale[f, t] > 0.0 else 0.0
            for j in range(n_states):
                g[f, t, j] = em[f, t, j] * buf[j] * inv
    return alpha, g, scale


def _scaled_emissions(em_log: np.ndarray):
    shift = em_log.max(axis=2)
    return np.exp(em_log - shift[..., None]), shift.sum(axis=1)


def _forward_backward_core(em_log: np.ndarray, thetas, init: np.ndarray,
                           keep_posteriors: bool = False, scaled=None):
    """Scaled forward-backward over a batch of sequences.

    ``em_log`` is ``(F, tau, S)``; ``thetas`` holds one parameter vector per
    sequence. Returns summed pairwise posteriors ``(F, S, S)``,
    log-likelihoods and, optionally, smoothed state posteriors ``(F, tau, S)``.
    ``scaled`` may carry a precomputed ``_scaled_emissions(em_log)``.
    """
    n_seq, tau, n_states = em_log.shape
    width = n_states.bit_length() - 1
    kernels = np.stack([bit_kernels(th, width) for th in thetas])
    em, shift = _scaled_emissions(em_log) if scaled is None else scaled
    alpha, g, scale = _scaled_recursions(em, kernels, np.ascontiguousarray(init, dtype=float))
    with np.errstate(divide="ignore"):
        loglik = np.log(scale).sum(axis=1) + shift
    dead = ~np.isfinite(loglik)
    if dead.any():
        # zero-probability observation sequence: no meaningful statistics
        loglik[dead] = -np.inf
        alpha[dead] = 0.0
        g[dead] = 0.0
    trans = np.stack([transition_matrix(width, th) for th in thetas])
    counts = np.matmul(np.swapaxes(alpha[:, :-1], 1, 2), g[:, 1:]) * trans
    posteriors = None
    if keep_posteriors:
        posteriors = np.empty_like(alpha)
        posteriors[:, -1] = alpha[:, -1]
        if tau > 1:
            beta = np.matmul(g[:, 1:], np.swapaxes(trans, 1, 2))
            posteriors[:, :-1] = alpha[:, :-1] * beta
    return counts, loglik, posteriors


def counts_to_stats(counts: np.ndarray, width: int) -> EStepStats:
    """Reduce expected joint-state transition counts ``N[from, to]``."""
    bits = state_bits(width)
    onehot = np.stack([bits == 0, bits == 1], axis=-1).astype(float)  # (S, K', 2)
    first = onehot[:, 0, :].T @ counts @ onehot[:, 0, :]
    interior = np.zeros((2, 2, 2))
    for k in range(1, width):
        # new-slot pair (to_{k-1}, to_k) as a 4-way one-hot
        pair = (onehot[:, k - 1, :, None] * onehot[:, k, None, :]).reshape(-1, 4)
        block = onehot[:, k, :].T @ counts @ pair  # [v, (u, b)]
        interior += block.reshape(2, 2, 2).transpose(1, 0, 2)
    return EStepStats(first=first, interior=interior)


def forward_backward(log: SensingLog, theta: ThetaVector, model: SensingModel,
                     init: str = "uniform", keep_posteriors: bool = False) -> EStepResult:
    """Exact E-step on one fragment's sensing log."""
    width = log.width
    if width > MAX_FRAGMENT_WIDTH:
        raise ValueError(f"fragment width {width} exceeds {MAX_FRAGMENT_WIDTH}")
    if log.tau < 1:
        raise ValueError("sensing log is empty")
    em_log = emission_log_likelihoods(log, model)[None]
    counts, loglik, post = _forward_backward_core(
        em_log, [theta], initial_distribution(width, init), keep_posteriors)
    return EStepResult(counts_to_stats(counts[0], width), float(loglik[0]),
                       None if post is None else post[0])


# ---------------------------------------------------------------------------
# M-step and EM loop


def _ratio(busy, total, previous):
    if total > 0:
        return float(busy / total), False
    return float(previous), True


def m_step(stats: EStepStats, previous: ThetaVector | None = None) -> tuple[ThetaVector, list[str]]:
    """Closed-form maximizer; zero-count cells keep their previous value."""
    previous = ThetaVector.uniform() if previous is None else previous
    degenerate = []
    values = {}
    for u in (0, 1):
        for v in (0, 1):
            name = f"p{u}{v}"
            cell = stats.interior[u, v]
            values[name], bad = _ratio(cell[1], cell.sum(), getattr(previous, name))
            if bad:
                degenerate.append(name)
    for w in (0, 1):
        name = f"q{w}"
        cell = stats.first[w]
        values[name], bad = _ratio(cell[1], cell.sum(), getattr(previous, name))
        if bad:
            degenerate.append(name)
    return ThetaVector(**values), degenerate


def mse(theta_a: ThetaVector, theta_b: ThetaVector) -> float:
    """Squared Euclidean distance between parameter vectors."""
    diff = theta_a.as_array() - theta_b.as_array()
    return float(diff @ diff)


@dataclass
class EstimatorRow:
    iteration: int
    log_likelihood: float
    theta: ThetaVector
    mse: float | None = None


@dataclass
class EstimateResult:
    theta: ThetaVector
    boundary: dict[int, tuple[float, float]]
    history: list[EstimatorRow]
    converged: bool
    degenerate: list[str] = field(default_factory=list)

    @property
    def log_likelihoods(self) -> list[float]:
        return [row.log_likelihood for row in self.history]

    def fragment_theta(self, index: int) -> ThetaVector:
        """Parameters governing fragment ``index`` in isolation."""
        if index == 0:
            return self.theta
        return with_first_law(self.theta, self.boundary[index])


class FragmentedEstimator:
    """Baum-Welch over a band split into equal contiguous fragments.

    The emission likelihoods of every fragment are computed once; each EM
    iteration then costs one batched forward-backward pass.
    """

    def __init__(self, log: SensingLog, fragment_width: int, model: SensingModel,
                 init: str = "uniform"):
        if log.width % fragment_width:
            raise ValueError("fragment width must divide the number of subcarriers")
        if fragment_width > MAX_FRAGMENT_WIDTH:
            raise ValueError(f"fragment width {fragment_width} exceeds {MAX_FRAGMENT_WIDTH}")
        if log.tau < 2:
            raise ValueError("estimation needs at least two slots")
        self.width = fragment_width
        self.n_fragments = log.width // fragment_width
        self.em_log = np.stack([
            emission_log_likelihoods(log.fragment(f * fragment_width, fragment_width), model)
            for f in range(self.n_fragments)
        ])
        self.init = initial_distribution(fragment_width, init)
        self._scaled = _scaled_emissions(self.em_log)

    def e_step(self, theta: ThetaVector, boundary: dict[int, tuple[float, float]]):
        thetas = [theta if f == 0 else with_first_law(theta, boundary[f])
                  for f in range(self.n_fragments)]
        counts, loglik, _ = _forward_backward_core(self.em_log, thetas, self.init,
                                                  scaled=self._scaled)
        per_fragment = [counts_to_stats(counts[f], self.width) for f in range(self.n_fragments)]
        return per_fragment, float(loglik.sum())

    def m_step(self, per_fragment: list[EStepStats], theta: ThetaVector,
               boundary: dict[int, tuple[float, float]]):
        pooled = EStepStats(first=per_fragment[0].first.copy(),
                            interior=sum(s.interior for s in per_fragment))
        new_theta, degenerate = m_step(pooled, theta)
        new_boundary = {}
        for f in range(1, self.n_fragments):
            first = per_fragment[f].first
            law = []
            for w in (0, 1):
                value, bad = _ratio(first[w, 1], first[w].sum(), boundary[f][w])
                law.append(value)
                if bad:
                    degenerate.append(f"boundary{f}.r{w}")
            new_boundary[f] = (law[0], law[1])
        return new_theta, new_boundary, degenerate

    def run(self, theta0: ThetaVector, max_iters: int = 100, tol: float = 1e-3,
            reference: ThetaVector | None = None,
            boundary0: dict[int, tuple[float, float]] | None = None,
            start_iteration: int = 0) -> EstimateResult:
        theta = theta0
        boundary = {f: (theta0.q0, theta0.q1) for f in range(1, self.n_fragments)}
        if boundary0:
            boundary.update(boundary0)

        def row(i, ll, th):
            return EstimatorRow(i, ll, th, None if reference is None else mse(th, reference))

        stats, ll = self.e_step(theta, boundary)
        history = [row(start_iteration, ll, theta)]
        converged = False
        degenerate: list[str] = []
        for i in range(1, max_iters + 1):
            theta, boundary, degenerate = self.m_step(stats, theta, boundary)
            stats, ll_new = self.e_step(theta, boundary)
            history.append(row(start_iteration + i, ll_new, theta))
            if abs(ll_new - ll) < tol:
                converged = True
                break
            ll = ll_new
        return EstimateResult(theta, boundary, history, converged, degenerate)


def estimate(log: SensingLog, theta0: ThetaVector, model: SensingModel, max_iters: int = 100,
             tol: float = 1e-3, reference: ThetaVector | None = None,
             fragment_width: int | None = None, init: str = "uniform") -> EstimateResult:
    """Run EM from ``theta0`` until the log-likelihood gain drops below ``tol``.

    ``fragment_width`` defaults to the full log width (a single fragment).
    """
    width = log.width if fragment_width is None else fragment_width
    return FragmentedEstimator(log, width, model, init).run(theta0, max_iters, tol, reference)


def write_estimator_csv(rows: Sequence[EstimatorRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ESTIMATOR_COLUMNS)
        for r in rows:
            writer.writerow(estimator_row_cells(r))


ESTIMATOR_COLUMNS = ["iteration", "log_likelihood", "q0", "q1", "p00", "p01", "p10", "p11",
                     "mse_if_reference"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return f"{x:.9g}"


def estimator_row_cells(r: EstimatorRow) -> list[str]:
    th = r.theta
    return [str(r.iteration), _fmt(r.log_likelihood), _fmt(th.q0), _fmt(th.q1), _fmt(th.p00),
            _fmt(th.p01), _fmt(th.p10), _fmt(th.p11), _fmt(r.mse)]
