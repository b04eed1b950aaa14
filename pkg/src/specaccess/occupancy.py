"""Time-frequency Markov occupancy process.

The occupancy of ``K`` adjacent subcarriers evolves as a Markov chain whose
one-step transition factorizes "bottom-up" in frequency: subcarrier 1 depends
only on its own previous state, and subcarrier ``k >= 2`` depends on its own
previous state and on the *new* state of subcarrier ``k - 1``.

States are ``uint8`` bit vectors; bit 0 is subcarrier 1 (lowest frequency).
When a state must be used as an index into a dense vector, subcarrier ``k``
contributes ``2**(k-1)`` (see :func:`state_index`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

INIT_CHOICES = ("uniform", "all-idle")


@dataclass(frozen=True)
class ThetaVector:
    """Six transition parameters, ordered ``[p00, p01, p10, p11, q0, q1]``.

    ``q_w`` is P(subcarrier 1 busy next slot | it is ``w`` now).
    ``p_uv`` is P(subcarrier k busy next slot | subcarrier k-1 is ``u`` next
    slot, subcarrier k is ``v`` now).
    """

    p00: float
    p01: float
    p10: float
    p11: float
    q0: float
    q1: float

    def __post_init__(self):
        for name, value in zip(("p00", "p01", "p10", "p11", "q0", "q1"), astuple(self)):
            if not (0.0 <= value <= 1.0) or math.isnan(value):
                raise ValueError(f"theta.{name}={value!r} is not a probability")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ThetaVector":
        values = [float(v) for v in values]
        if len(values) != 6:
            raise ValueError(f"theta needs 6 values, got {len(values)}")
        return cls(*values)

    @classmethod
    def uniform(cls, value: float = 0.5) -> "ThetaVector":
        return cls(value, value, value, value, value, value)

    @property
    def p_matrix(self) -> np.ndarray:
        """``P[u, v] = p_uv``."""
        return np.array([[self.p00, self.p01], [self.p10, self.p11]])

    @property
    def q_vector(self) -> np.ndarray:
        return np.array([self.q0, self.q1])


# Default occupancy parameters for scenarios and tests.
DEFAULT_THETA = ThetaVector(p00=0.1, p01=0.3, p10=0.3, p11=0.7, q0=0.3, q1=0.8)


def _as_bits(state, width: int | None = None) -> np.ndarray:
    bits = np.asarray(state, dtype=np.uint8)
    if bits.ndim != 1:
        raise ValueError("an occupancy state is a 1-D bit vector")
    if np.any(bits > 1):
        raise ValueError("occupancy bits must be 0 or 1")
    if width is not None and bits.size != width:
        raise ValueError(f"state width {bits.size} does not match K={width}")
    return bits


@lru_cache(maxsize=None)
def _state_bits_cached(width: int) -> np.ndarray:
    idx = np.arange(2 ** width)
    bits = ((idx[:, None] >> np.arange(width)[None, :]) & 1).astype(np.uint8)
    bits.setflags(write=False)
    return bits


def state_bits(width: int) -> np.ndarray:
    """All ``2**width`` states as a read-only ``(2**width, width)`` array."""
    if width < 1:
        raise ValueError("width must be >= 1")
    return _state_bits_cached(width)


def state_index(bits) -> int:
    bits = _as_bits(bits)
    return int(np.dot(bits.astype(np.int64), 1 << np.arange(bits.size, dtype=np.int64)))


def index_bits(index: int, width: int) -> np.ndarray:
    return ((int(index) >> np.arange(width)) & 1).astype(np.uint8)


def transition_probability(from_state, to_state, theta: ThetaVector) -> float:
    """One-step probability of moving from ``from_state`` to ``to_state``."""
    b_from = _as_bits(from_state)
    b_to = _as_bits(to_state)
    if b_from.size != b_to.size:
        raise ValueError(f"width mismatch: {b_from.size} vs {b_to.size}")
    if b_from.size < 1:
        raise ValueError("states must have at least one subcarrier")
    q, p = theta.q_vector, theta.p_matrix
    prob = q[b_from[0]] if b_to[0] else 1.0 - q[b_from[0]]
    for k in range(1, b_to.size):
        pk = p[b_to[k - 1], b_from[k]]
        prob *= pk if b_to[k] else 1.0 - pk
    return float(prob)


def transition_matrix(width: int, theta: ThetaVector) -> np.ndarray:
    """Dense ``T[from, to]`` over all ``2**width`` states (width <= 12)."""
    if width > 12:
        raise ValueError("dense transition matrices are limited to width <= 12")
    bits = state_bits(width)
    from_bits = bits[:, None, :]
    to_bits = bits[None, :, :]
    q, p = theta.q_vector, theta.p_matrix

    busy = np.broadcast_to(q[bits[:, 0]][:, None], (bits.shape[0], bits.shape[0]))
    trans = np.where(to_bits[..., 0] == 1, busy, 1.0 - busy)
    for k in range(1, width):
        busy = p[to_bits[..., k - 1], from_bits[..., k]]
        trans = trans * np.where(to_bits[..., k] == 1, busy, 1.0 - busy)
    return trans


def sample_next_state(from_state, theta: ThetaVector, rng: np.random.Generator) -> np.ndarray:
    """Draw the next state subcarrier by subcarrier, lowest frequency first."""
    b_from = _as_bits(from_state)
    u = rng.random(b_from.size)
    q, p = theta.q_vector, theta.p_matrix
    out = np.empty_like(b_from)
    prev = int(u[0] < q[b_from[0]])
    out[0] = prev
    for k in range(1, b_from.size):
        prev = int(u[k] < p[prev, b_from[k]])
        out[k] = prev
    return out


def initial_state(width: int, init: str, rng: np.random.Generator) -> np.ndarray:
    if init == "uniform":
        return (rng.random(width) < 0.5).astype(np.uint8)
    if init == "all-idle":
        return np.zeros(width, dtype=np.uint8)
    raise ValueError(f"unknown init {init!r}; expected one of {INIT_CHOICES}")


def initial_log_probability(state, init: str) -> float:
    bits = _as_bits(state)
    if init == "uniform":
        return -bits.size * math.log(2.0)
    if init == "all-idle":
        return 0.0 if not bits.any() else -math.inf
    raise ValueError(f"unknown init {init!r}; expected one of {INIT_CHOICES}")


def initial_distribution(width: int, init: str) -> np.ndarray:
    """Initial law over the dense state index."""
    if init == "uniform":
        return np.full(2 ** width, 2.0 ** -width)
    if init == "all-idle":
        dist = np.zeros(2 ** width)
        dist[0] = 1.0
        return dist
    raise ValueError(f"unknown init {init!r}; expected one of {INIT_CHOICES}")


def sample_trace(
    theta: ThetaVector,
    width: int,
    tau: int,
    init: str = "uniform",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Simulate ``tau`` slots; returns a ``(tau, width)`` uint8 array."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    trace = np.empty((tau, width), dtype=np.uint8)
    trace[0] = initial_state(width, init, rng)
    for t in range(1, tau):
        trace[t] = sample_next_state(trace[t - 1], theta, rng)
    return trace


def _transition_log_terms(trace: np.ndarray, theta: ThetaVector) -> np.ndarray:
    prev, nxt = trace[:-1], trace[1:]
    q, p = theta.q_vector, theta.p_matrix
    busy = np.empty(nxt.shape, dtype=float)
    busy[:, 0] = q[prev[:, 0]]
    if trace.shape[1] > 1:
        busy[:, 1:] = p[nxt[:, :-1], prev[:, 1:]]
    probs = np.where(nxt == 1, busy, 1.0 - busy)
    with np.errstate(divide="ignore"):
        return np.log(probs)


def trace_log_likelihood(trace, theta: ThetaVector, init: str = "uniform") -> float:
    """Log-probability of a fully observed trace.

    Returns ``-inf`` when some transition (or the first state) is impossible
    under ``theta``.
    """
    trace = np.asarray(trace, dtype=np.uint8)
    if trace.ndim != 2 or trace.shape[0] < 1:
        raise ValueError("trace must be a (tau, K) array with tau >= 1")
    total = initial_log_probability(trace[0], init)
    if trace.shape[0] > 1:
        total += float(_transition_log_terms(trace, theta).sum())
    return total


def bic(trace, theta_star: ThetaVector, gamma_params: int = 6, nu: int | None = None,
        init: str = "uniform") -> float:
    """Bayesian information criterion ``gamma * ln(nu) - 2 ln P(trace | theta)``.

    ``nu`` defaults to the number of occupancy samples in the trace.
    """
    trace = np.asarray(trace, dtype=np.uint8)
    nu = trace.size if nu is None else nu
    if nu < 1:
        raise ValueError("nu must be >= 1")
    return gamma_params * math.log(nu) - 2.0 * trace_log_likelihood(trace, theta_star, init)


def write_trace_csv(trace, path) -> None:
    trace = np.asarray(trace, dtype=np.uint8)
    width = trace.shape[1] if trace.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [f"b_{k + 1}" for k in range(width)])
        for t, row in enumerate(trace):
            writer.writerow([t + 1] + [int(b) for b in row])


def read_trace_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        width = len(header) - 1
        rows = [[int(v) for v in row[1:]] for row in reader]
    return np.array(rows, dtype=np.uint8).reshape(len(rows), width)


def propagate_distribution(dist, theta: ThetaVector, width: int) -> np.ndarray:
    """One-step push-forward of a state distribution without a dense matrix.

    Sums out the previous state one subcarrier at a time, which costs
    ``O(width * 2**width)`` instead of ``O(4**width)``.
    """
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (2 ** width,):
        raise ValueError("distribution length must be 2**width")
    q, p = theta.q_vector, theta.p_matrix
    first = np.stack([1.0 - q, q], axis=1)  # [from_1, to_1]
    inner = np.stack([1.0 - p, p], axis=2)  # [to_{k-1}, from_k, to_k]
    # C-order reshape puts the highest subcarrier on axis 0.
    cur = np.tensordot(dist.reshape((2,) * width), first, axes=([width - 1], [0]))
    for k in range(1, width):
        # axes: (from_K .. from_k, to_1 .. to_{k-1}); bring from_k last
        cur = np.moveaxis(cur, width - k - 1, -1)
        cur = (cur[..., None] * inner).sum(axis=-2)
    # axes are now (to_1, ..., to_K)
    return np.transpose(cur, axes=tuple(range(width - 1, -1, -1))).reshape(-1)


def stationary_distribution(theta: ThetaVector, width: int, tol: float = 1e-13,
                            max_iter: int = 10000) -> np.ndarray:
    dist = np.full(2 ** width, 2.0 ** -width)
    for _ in range(max_iter):
        nxt = propagate_distribution(dist, theta, width)
        if np.abs(nxt - dist).sum() < tol:
            return nxt
        dist = nxt
    return dist


def boundary_law(theta: ThetaVector, offset: int) -> tuple[float, float]:
    """Stationary law of subcarrier ``offset`` (0-based) given only its own past.

    Returns ``(P(busy next | idle now), P(busy next | busy now))``. For
    ``offset == 0`` this is ``(q0, q1)``; for an interior subcarrier it
    averages over the unobserved lower neighbours, which is how the first
    subcarrier of a non-leading fragment behaves when the fragment is
    modelled in isolation.
    """
    if offset == 0:
        return theta.q0, theta.q1
    width = offset + 1
    pi = stationary_distribution(theta, width)
    own = state_bits(width)[:, offset]
    out = []
    for v in (0, 1):
        start = np.where(own == v, pi, 0.0)
        mass = start.sum()
        nxt = propagate_distribution(start, theta, width)
        out.append(float(nxt[own == 1].sum() / mass) if mass > 0 else 0.5)
    return out[0], out[1]


def with_first_law(theta: ThetaVector, law: tuple[float, float]) -> ThetaVector:
    """Copy of ``theta`` whose first-subcarrier parameters are replaced by ``law``."""
    return ThetaVector(theta.p00, theta.p01, theta.p10, theta.p11, float(law[0]), float(law[1]))
