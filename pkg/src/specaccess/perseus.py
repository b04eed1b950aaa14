"""Point-based value iteration for the sensing policy of one fragment.

Randomized PERSEUS with Monte-Carlo backups and Hamming-filtered prior
propagation. Fragments are solved independently.

The Monte-Carlo step exploits the structure of the observation model: a
sensing sample only distinguishes states through their bits on the sensed
set, so the posterior after any observation is the prior reweighted by a
function of that ``kappa'``-bit pattern. Every belief statistic needed in a
backup (marginals, future-hyperplane scores) is therefore a short sum over
at most ``2**kappa'`` pattern classes.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .belief import (
    access_threshold,
    check_belief,
    filtered_transition,
    marginal_occupancy,
    posterior_update,
    uniform_belief,
    width_of,
)
from .channel import SensingModel, sense
from .occupancy import ThetaVector, initial_state, sample_next_state, state_bits, transition_matrix

DEDUP_TOL = 1e-6


@dataclass(frozen=True)
class Fragment:
    index: int
    start: int  # 0-based first subcarrier of the band
    width: int
    kappa: int

    @property
    def subcarriers(self) -> range:
        return range(self.start, self.start + self.width)


def fragment_spectrum(k_total: int, k_prime: int, kappa_total: int) -> list[Fragment]:
    """Split ``k_total`` subcarriers into contiguous fragments of ``k_prime``.

    The sensing budget is split proportionally, so ``kappa_total * k_prime``
    must be a multiple of ``k_total``.
    """
    if k_prime < 1 or k_total < 1:
        raise ValueError("subcarrier counts must be positive")
    if k_total % k_prime:
        raise ValueError(f"fragment width {k_prime} does not divide K={k_total}; "
                         f"pick a divisor such as {_divisors(k_total)}")
    if not 0 <= kappa_total <= k_total:
        raise ValueError("sensing budget must lie in 0..K")
    n = k_total // k_prime
    if kappa_total % n:
        raise ValueError(f"sensing budget {kappa_total} cannot be split evenly over {n} fragments; "
                         f"use a multiple of {n}")
    kappa = kappa_total // n
    return [Fragment(f, f * k_prime, k_prime, kappa) for f in range(n)]


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def action_space(width: int, kappa: int) -> list[tuple[int, ...]]:
    """All ``kappa``-subsets of the fragment's subcarriers, in lexicographic order."""
    if not 0 <= kappa <= width:
        raise ValueError("kappa must lie in 0..K'")
    return list(itertools.combinations(range(width), kappa))


@dataclass(frozen=True)
class SolverConfig:
    u_beliefs: int = 128
    n_mc: int = 64
    gamma: float = 0.9
    epsilon: float = 1e-5
    delta: int | None = None  # Hamming radius; None means the fragment width
    lam: float = 1.0
    seed: int = 0
    max_iters: int = 500

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.n_mc < 1 or self.u_beliefs < 1 or self.max_iters < 1:
            raise ValueError("n_mc, u_beliefs and max_iters must be >= 1")
        if self.delta is not None and self.delta < 1:
            raise ValueError("Hamming radius must be >= 1")
        access_threshold(self.lam)

    def radius(self, width: int) -> int:
        delta = width if self.delta is None else self.delta
        if delta > width:
            raise ValueError(f"Hamming radius {delta} exceeds fragment width {width}")
        return delta

    def streams(self):
        """Independent generators for exploration, Monte-Carlo draws and pick order."""
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(3)]


@dataclass
class PolicySet:
    alphas: np.ndarray  # (U, 2**K')
    actions: list[tuple[int, ...]]

    def __post_init__(self):
        self.alphas = np.atleast_2d(np.asarray(self.alphas, dtype=float))
        if len(self.actions) != self.alphas.shape[0] or not self.actions:
            raise ValueError("policy needs one action per hyperplane and at least one entry")

    @property
    def width(self) -> int:
        return width_of(self.alphas[0])

    def value(self, belief) -> float:
        return float(np.max(self.alphas @ np.asarray(belief, dtype=float)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            n = self.alphas.shape[1]
            writer.writerow(["entry_id", "action_indices"] + [f"alpha_{i}" for i in range(n)])
            for u, (alpha, action) in enumerate(zip(self.alphas, self.actions)):
                writer.writerow([u, " ".join(str(k + 1) for k in action)]
                                + [f"{a:.9g}" for a in alpha])

    @classmethod
    def read_csv(cls, path) -> "PolicySet":
        alphas, actions = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                actions.append(tuple(int(k) - 1 for k in row[1].split()))
                alphas.append([float(a) for a in row[2:]])
        return cls(np.array(alphas), actions)


def policy_action(belief, policy: PolicySet) -> tuple[int, ...]:
    """Action of the hyperplane maximizing ``<belief, alpha>`` (lowest index on ties)."""
    scores = policy.alphas @ np.asarray(belief, dtype=float)
    return policy.actions[int(np.argmax(scores))]


# ---------------------------------------------------------------------------
# exploration


def explore_beliefs(theta: ThetaVector, width: int, kappa: int, config: SolverConfig,
                    model: SensingModel, rng: np.random.Generator) -> np.ndarray:
    """Collect up to ``U`` distinct reachable priors by random interaction.

    Starts from the uniform belief with a uniformly drawn true state; each
    slot picks a random action, senses, updates and propagates with the
    Hamming filter. Runs at most ``10 * U`` slots.
    """
    delta = config.radius(width)
    trans = filtered_transition(width, theta, delta)
    actions = action_space(width, kappa)
    belief = uniform_belief(width)
    state = initial_state(width, "uniform", rng)
    found = [belief]
    for _ in range(10 * config.u_beliefs):
        if len(found) >= config.u_beliefs:
            break
        action = actions[int(rng.integers(len(actions)))]
        y = sense(state, action, model.p_t, model.sigma_h2, model.sigma_v2, rng)
        posterior = posterior_update(belief, action, y, model)
        nxt = posterior @ trans
        belief = nxt / nxt.sum()
        state = sample_next_state(state, theta, rng)
        if min(np.max(np.abs(belief - b)) for b in found) >= DEDUP_TOL:
            found.append(belief)
    return np.array(found)


# ---------------------------------------------------------------------------
# backup


class _Backup:
    """Precomputed, belief-independent pieces of the Monte-Carlo backup."""

    def __init__(self, theta: ThetaVector, width: int, kappa: int, config: SolverConfig,
                 model: SensingModel):
        self.width = width
        self.config = config
        self.actions = action_space(width, kappa)
        self.trans = transition_matrix(width, theta)
        self.filtered = filtered_transition(width, theta, config.radius(width), self.trans)
        bits = state_bits(width)
        self.bits = bits
        n_pat = 2 ** kappa
        pat_bits = state_bits(kappa) if kappa else np.zeros((1, 0), dtype=np.uint8)
        # pattern[a, B]: index of B's bits on action a
        weights = 1 << np.arange(kappa)
        self.pattern = np.array([bits[:, list(a)] @ weights if kappa else np.zeros(2 ** width, int)
                                 for a in self.actions], dtype=int)
        self.onehot = np.zeros((len(self.actions), 2 ** width, n_pat))
        for a in range(len(self.actions)):
            self.onehot[a, np.arange(2 ** width), self.pattern[a]] = 1.0
        self.cost = 1.0 - (1.0 + config.lam) * bits  # reward of accessing, per state and subcarrier
        self.threshold = access_threshold(config.lam)
        # Common random numbers: one fixed set of unit-exponential energies
        # per (action, draw, sensed subcarrier), rescaled by the true pattern.
        mc_rng = config.streams()[1]
        base = mc_rng.exponential(1.0, size=(len(self.actions), config.n_mc, kappa))
        var = model.variances[pat_bits]  # (P, kappa)
        energy = var[None, :, None, :] * base[:, None, :, :]  # (A, P_true, N, kappa)
        logf = model.energy_log_likelihoods(energy)  # (..., kappa, 2)
        idx = np.broadcast_to(pat_bits.astype(int).T[None, None, None], energy.shape[:3] + pat_bits.T.shape)
        ll = np.take_along_axis(logf, idx, axis=-1).sum(axis=-2)  # (A, P_true, N, P_hyp)
        ll -= ll.max(axis=-1, keepdims=True)
        self.lik = np.exp(ll)

    def future_tables(self, alphas: np.ndarray):
        """Distinct previous hyperplanes and their propagated forms."""
        uniq = np.unique(alphas, axis=0)
        score_map = uniq @ self.filtered.T  # G[u', B'] = sum_B Mdelta[B', B] alpha(B)
        future = uniq @ self.trans.T        # Vf[u', B] = sum_B'' P(B''|B) alpha(B'')
        return uniq, score_map, future

    def run(self, belief: np.ndarray, tables) -> tuple[np.ndarray, int, float]:
        _, score_map, future = tables
        gamma = self.config.gamma
        mass = np.einsum("s,asp->ap", belief, self.onehot)                     # (A, P)
        busy = np.einsum("s,sk,asp->apk", belief, self.bits, self.onehot)        # (A, P, K')
        hyper = np.einsum("s,us,asp->aup", belief, score_map, self.onehot)       # (A, U', P)
        lik = self.lik
        norm = np.einsum("atnp,ap->atn", lik, mass)
        marg = np.einsum("atnp,apk->atnk", lik, busy) / norm[..., None]
        phi = (marg <= self.threshold).astype(float)
        scores = np.einsum("atnp,aup->atnu", lik, hyper)
        best = np.argmax(scores, axis=-1)                                          # (A, P_true, N)
        phi_bar = phi.mean(axis=2)                                                 # (A, P_true, K')
        n_future = future.shape[0]
        freq = np.zeros(best.shape[:2] + (n_future,))
        for u in range(n_future):
            freq[..., u] = (best == u).mean(axis=2)
        xi = np.empty((len(self.actions), belief.size))
        for a in range(len(self.actions)):
            pat = self.pattern[a]
            immediate = np.einsum("sk,sk->s", phi_bar[a, pat], self.cost)
            ahead = np.einsum("su,us->s", freq[a, pat], future)
            xi[a] = immediate + gamma * ahead
        values = xi @ belief
        a_best = int(np.argmax(values))
        return xi[a_best], a_best, float(values[a_best])


def backup(belief, policy: PolicySet, theta: ThetaVector, kappa: int, config: SolverConfig,
           model: SensingModel) -> tuple[np.ndarray, tuple[int, ...], float]:
    """One Monte-Carlo backup at ``belief`` against the hyperplanes of ``policy``.

    Returns the new hyperplane, its sensing action and ``<belief, alpha>``.
    """
    belief = check_belief(belief)
    engine = _Backup(theta, width_of(belief), kappa, config, model)
    alpha, a, value = engine.run(belief, engine.future_tables(policy.alphas))
    return alpha, engine.actions[a], value


# ---------------------------------------------------------------------------
# value iteration


@dataclass
class IterationStats:
    iteration: int
    max_change: float
    mean_value: float
    backups: int


@dataclass
class SolveResult:
    policy: PolicySet
    beliefs: np.ndarray
    values: np.ndarray
    trace: list[IterationStats]
    converged: bool
    value_history: list[np.ndarray] = field(default_factory=list)


def perseus_iteration(beliefs: np.ndarray, policy: PolicySet, values: np.ndarray,
                      engine: _Backup, rng: np.random.Generator):
    """One improve-all-points sweep; returns ``(policy, values, n_backups)``.

    ``values`` are the current per-belief values. A backup that fails to
    improve its own belief falls back to the best existing hyperplane for
    it, so no belief value ever decreases.
    """
    n_beliefs = beliefs.shape[0]
    tables = engine.future_tables(policy.alphas)
    new_alphas = policy.alphas.copy()
    new_actions = list(policy.actions)
    new_values = values.copy()
    pending = list(range(n_beliefs))
    backups = 0
    while pending:
        u = pending.pop(int(rng.integers(len(pending))))
        alpha, a, value = engine.run(beliefs[u], tables)
        backups += 1
        action = engine.actions[a]
        if value < values[u]:
            old = policy.alphas @ beliefs[u]
            best = int(np.argmax(old))
            alpha, action, value = policy.alphas[best], policy.actions[best], float(old[best])
        new_alphas[u], new_actions[u], new_values[u] = alpha, action, value
        if pending:
            idx = np.array(pending)
            gains = beliefs[idx] @ alpha
            improved = gains >= values[idx]
            for j, g in zip(idx[improved], gains[improved]):
                new_alphas[j], new_actions[j], new_values[j] = alpha, action, g
            pending = [int(j) for j in idx[~improved]]
    return PolicySet(new_alphas, new_actions), new_values, backups


def solve_fragment(theta: ThetaVector, width: int, kappa: int, config: SolverConfig,
                   model: SensingModel, keep_history: bool = False) -> SolveResult:
    """Run value iteration until no belief value moves by more than epsilon."""
    explore_rng, _, order_rng = config.streams()
    beliefs = explore_beliefs(theta, width, kappa, config, model, explore_rng)
    engine = _Backup(theta, width, kappa, config, model)
    n = beliefs.shape[0]
    policy = PolicySet(np.zeros((n, 2 ** width)), [()] * n)
    values = np.zeros(n)
    trace: list[IterationStats] = []
    history = [values.copy()] if keep_history else []
    converged = False
    for i in range(1, config.max_iters + 1):
        policy, new_values, backups = perseus_iteration(beliefs, policy, values, engine, order_rng)
        change = float(np.max(np.abs(new_values - values)))
        values = new_values
        trace.append(IterationStats(i, change, float(values.mean()), backups))
        if keep_history:
            history.append(values.copy())
        if change <= config.epsilon:
            converged = True
            break
    return SolveResult(policy, beliefs, values, trace, converged, history)


def write_solver_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "max_change", "mean_value"])
        for row in trace:
            writer.writerow([row.iteration, f"{row.max_change:.9g}", f"{row.mean_value:.9g}"])


# ---------------------------------------------------------------------------
# closed-loop evaluation on a single fragment


def greedy_action(belief, actions, lam: float):
    """Sense the subcarriers whose occupancy is most uncertain (myopic baseline)."""
    marg = marginal_occupancy(belief)
    spread = -np.abs(marg - access_threshold(lam))
    order = np.argsort(-spread, kind="stable")
    return tuple(sorted(int(k) for k in order[:len(actions[0])]))


def simulate_fragment(theta: ThetaVector, width: int, kappa: int, lam: float, model: SensingModel,
                      slots: int, rng: np.random.Generator, policy: PolicySet | None = None,
                      mode: str = "policy", delta: int | None = None) -> np.ndarray:
    """Per-slot realized reward of sensing-then-access on a simulated fragment.

    ``mode`` is ``"policy"`` (requires ``policy``), ``"random"`` or ``"greedy"``.
    """
    if mode == "policy" and policy is None:
        raise ValueError("policy mode needs a policy")
    if mode not in ("policy", "random", "greedy"):
        raise ValueError(f"unknown sensing mode {mode!r}")
    trans = filtered_transition(width, theta, width if delta is None else delta)
    actions = action_space(width, kappa)
    thr = access_threshold(lam)
    belief = uniform_belief(width)
    state = initial_state(width, "uniform", rng)
    rewards = np.empty(slots)
    for t in range(slots):
        if mode == "policy":
            action = policy_action(belief, policy)
        elif mode == "random":
            action = actions[int(rng.integers(len(actions)))]
        else:
            action = greedy_action(belief, actions, lam)
        y = sense(state, action, model.p_t, model.sigma_h2, model.sigma_v2, rng)
        posterior = posterior_update(belief, action, y, model)
        phi = marginal_occupancy(posterior) <= thr
        rewards[t] = np.sum(phi * (1.0 - (1.0 + lam) * state))
        nxt = posterior @ trans
        belief = nxt / nxt.sum()
        state = sample_next_state(state, theta, rng)
    return rewards


__all__ = [
    "Fragment", "fragment_spectrum", "action_space", "SolverConfig", "PolicySet", "policy_action",
    "explore_beliefs", "backup", "perseus_iteration", "solve_fragment", "SolveResult",
    "IterationStats", "write_solver_trace", "simulate_fragment", "greedy_action",
]
