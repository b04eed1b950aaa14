"""Belief-state operations for one spectrum fragment.

A belief is a dense probability vector over the ``2**K'`` occupancy states of
a fragment, indexed as in :func:`specaccess.occupancy.state_index`.
"""

from __future__ import annotations

import csv
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np

from .channel import SensingModel
from .occupancy import ThetaVector, state_bits, transition_matrix

NORMALIZATION_TOL = 1e-9


class BeliefError(ValueError):
    pass


def width_of(belief) -> int:
    n = np.asarray(belief).shape[-1]
    width = n.bit_length() - 1
    if width < 1 or 2 ** width != n:
        raise BeliefError(f"belief length {n} is not a power of two")
    return width


def uniform_belief(width: int) -> np.ndarray:
    return np.full(2 ** width, 2.0 ** -width)


def point_belief(index: int, width: int) -> np.ndarray:
    belief = np.zeros(2 ** width)
    belief[index] = 1.0
    return belief


def check_belief(belief, tol: float = NORMALIZATION_TOL) -> np.ndarray:
    belief = np.asarray(belief, dtype=float)
    width_of(belief)
    if np.any(belief < 0) or abs(belief.sum() - 1.0) > tol:
        raise BeliefError("belief must be nonnegative and sum to one")
    return belief


def _normalize(weights: np.ndarray) -> np.ndarray:
    total = weights.sum(axis=-1, keepdims=True)
    if np.any(total <= 0) or not np.all(np.isfinite(total)):
        raise BeliefError("belief update produced zero total mass")
    return weights / total


def observation_log_likelihoods(width: int, sensing_set: Iterable[int], energies,
                                model: SensingModel) -> np.ndarray:
    """``log f(Y | B)`` for every state ``B`` of the fragment.

    ``energies`` are the ``|y|**2`` values for ``sensing_set`` in the same
    order. Unsensed subcarriers contribute a constant factor of one.
    """
    ks = [int(k) for k in sensing_set]
    out = np.zeros(2 ** width)
    if not ks:
        return out
    bits = state_bits(width)
    logf = model.energy_log_likelihoods(np.asarray(energies, dtype=float))  # (len(ks), 2)
    for j, k in enumerate(ks):
        out += logf[j, bits[:, k]]
    return out


def posterior_from_loglik(prior, loglik) -> np.ndarray:
    """Bayes update given per-state observation log-likelihoods."""
    prior = np.asarray(prior, dtype=float)
    shifted = np.asarray(loglik, dtype=float)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    return _normalize(prior * np.exp(shifted))


def posterior_update(prior, sensing_set, y: Mapping[int, complex], model: SensingModel) -> np.ndarray:
    """Posterior belief after observing ``y`` on ``sensing_set``."""
    ks = sorted(int(k) for k in sensing_set)
    if sorted(y) != ks:
        raise BeliefError("observation keys must equal the sensing set")
    prior = np.asarray(prior, dtype=float)
    width = width_of(prior)
    energies = [abs(y[k]) ** 2 for k in ks]
    return posterior_from_loglik(prior, observation_log_likelihoods(width, ks, energies, model))


@lru_cache(maxsize=None)
def hamming_mask(width: int, delta: int) -> np.ndarray:
    """Boolean ``mask[B', B]``: Hamming distance between states is at most ``delta``."""
    if not 1 <= delta <= width:
        raise ValueError(f"Hamming radius must lie in 1..{width}")
    idx = np.arange(2 ** width)
    xor = idx[:, None] ^ idx[None, :]
    dist = np.zeros_like(xor)
    for k in range(width):
        dist += (xor >> k) & 1
    mask = dist <= delta
    mask.setflags(write=False)
    return mask


def filtered_transition(width: int, theta: ThetaVector, delta: int,
                        trans: np.ndarray | None = None) -> np.ndarray:
    """Transition matrix with entries beyond Hamming radius ``delta`` zeroed."""
    trans = transition_matrix(width, theta) if trans is None else trans
    if delta >= width:
        return trans
    return np.where(hamming_mask(width, delta), trans, 0.0)


def propagate_prior_exact(posterior, theta: ThetaVector | None = None, *,
                          trans: np.ndarray | None = None) -> np.ndarray:
    """Next-slot prior ``sum_B' P(B | B') posterior(B')``."""
    posterior = np.asarray(posterior, dtype=float)
    if trans is None:
        trans = transition_matrix(width_of(posterior), theta)
    return posterior @ trans


def propagate_prior_hamming(posterior, theta: ThetaVector | None = None, delta: int | None = None, *,
                            trans: np.ndarray | None = None) -> np.ndarray:
    """Next-slot prior using only transitions within Hamming radius ``delta``.

    The restricted sum is renormalized so the result is a distribution; with
    ``delta`` equal to the fragment width this is exact propagation.
    """
    posterior = np.asarray(posterior, dtype=float)
    width = width_of(posterior)
    delta = width if delta is None else delta
    if trans is None:
        trans = transition_matrix(width, theta)
    return _normalize(posterior @ filtered_transition(width, theta, delta, trans))


def marginal_occupancy(belief) -> np.ndarray:
    """Per-subcarrier probability of being busy."""
    belief = np.asarray(belief, dtype=float)
    return belief @ state_bits(width_of(belief))


def access_threshold(lam: float) -> float:
    if lam < 0:
        raise ValueError("penalty lambda must be nonnegative")
    return 1.0 / (1.0 + lam)


def access_decision(marginals, lam: float) -> np.ndarray:
    """Access every subcarrier whose busy probability is at most ``1/(1+lam)``."""
    return (np.asarray(marginals, dtype=float) <= access_threshold(lam)).astype(np.uint8)


def expected_reward(marginals, lam: float) -> float:
    """Expected reward of the optimal access decision under ``marginals``."""
    access_threshold(lam)
    marginals = np.asarray(marginals, dtype=float)
    return float(np.maximum(1.0 - (1.0 + lam) * marginals, 0.0).sum())


def realized_reward(phi, truth, lam: float) -> float:
    """Reward of access vector ``phi`` against the true occupancy: +1 per idle
    subcarrier used, ``-lam`` per busy one."""
    phi = np.asarray(phi, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if phi.shape != truth.shape:
        raise ValueError("access vector and state widths differ")
    return float(np.sum((1.0 - truth) * phi - lam * truth * phi))


def oracle_reward(truth, lam: float) -> float:
    """Best achievable reward knowing the state: the number of idle subcarriers."""
    access_threshold(lam)
    truth = np.asarray(truth)
    return float(truth.size - int(truth.sum()))


def write_belief_csv(belief, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["state_index", "weight"])
        for i, w in enumerate(np.asarray(belief, dtype=float)):
            writer.writerow([i, f"{w:.9g}"])
