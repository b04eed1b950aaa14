"""End-to-end simulation: occupancy, sensing, learning, access and throughput.

Every random quantity comes from its own stream spawned from the scenario
seed, so switching the agent (LESSA, genie, energy detector) or the
learning mode never changes the occupancy trace, and sensing noise is
shared between single-agent and one-agent distributed runs.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .belief import access_threshold, filtered_transition, marginal_occupancy, posterior_update, uniform_belief
from .channel import (
    adapt_rate,
    link_geometry,
    relink,
    sample_link,
    sense,
    small_scale_gains,
)
from .config import ScenarioConfig
from .estimator import FragmentedEstimator, SensingLog, mse
from .metrics import (
    MetricsReport,
    cr_throughput,
    lu_throughput,
    normalized_loss,
    np_detect,
    roc_point,
)
from .multiagent import allocate_access, default_quorum, rssi_matrix, run_consensus
from .occupancy import ThetaVector, boundary_law, sample_trace, with_first_law
from .perseus import Fragment, PolicySet, SolverConfig, SolveResult, action_space, fragment_spectrum, policy_action, solve_fragment

AGENTS = ("lessa", "genie", "np")
POST_CONVERGENCE_FRACTION = 0.25

# Solved policies keyed by everything that determines them.
_SOLVE_CACHE: dict = {}


def cached_solve(theta: ThetaVector, width: int, kappa: int, config: SolverConfig, model) -> SolveResult:
    key = (theta, width, kappa, config, model)
    if key not in _SOLVE_CACHE:
        _SOLVE_CACHE[key] = solve_fragment(theta, width, kappa, config, model)
    return _SOLVE_CACHE[key]


def clear_solve_cache() -> None:
    _SOLVE_CACHE.clear()


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("occupancy", "sensing", "geometry", "fading", "learning", "detector", "agents")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def fragment_thetas(theta: ThetaVector, fragments, boundary: dict | None = None) -> list[ThetaVector]:
    """Law of each fragment in isolation.

    Without ``boundary`` the first-subcarrier law of a non-leading fragment
    is the stationary conditional implied by ``theta``.
    """
    out = []
    for fr in fragments:
        if fr.index == 0:
            out.append(theta)
        elif boundary is not None:
            out.append(with_first_law(theta, boundary[fr.index]))
        else:
            out.append(with_first_law(theta, boundary_law(theta, fr.start)))
    return out


@dataclass
class FragmentAgent:
    """Belief tracking and sensing choice for one fragment."""

    fragment: Fragment
    kappa: int
    delta: int
    theta: ThetaVector
    policy: PolicySet | None = None
    belief: np.ndarray = None
    trans: np.ndarray = None

    def __post_init__(self):
        self.actions = action_space(self.fragment.width, self.kappa)
        if self.belief is None:
            self.belief = uniform_belief(self.fragment.width)
        self.retarget(self.theta, self.policy)

    def retarget(self, theta: ThetaVector, policy: PolicySet | None) -> None:
        self.theta = theta
        self.policy = policy
        self.trans = filtered_transition(self.fragment.width, theta, self.delta)

    def choose(self, rng: np.random.Generator | None = None) -> tuple[int, ...]:
        if rng is not None or self.policy is None:
            if rng is None:
                raise ValueError("random sensing needs a generator")
            return self.actions[int(rng.integers(len(self.actions)))]
        return policy_action(self.belief, self.policy)

    def advance(self, posterior: np.ndarray) -> None:
        nxt = posterior @ self.trans
        self.belief = nxt / nxt.sum()


# ---------------------------------------------------------------------------
# radio environment


class RadioEnvironment:
    """Geometry, mobility and per-slot fading for the throughput metrics.

    Licensed user ``j`` transmits on the fragments it owns (fragment ``f``
    belongs to user ``f mod J_L``).
    """

    def __init__(self, cfg: ScenarioConfig, geo_rng: np.random.Generator):
        self.cfg = cfg
        env = cfg.channel
        g = cfg.geometry
        self.rng = geo_rng
        self.owner = np.array([(k // cfg.K_prime) % cfg.J_L for k in range(cfg.K)])
        self.lu_tx = [np.asarray(p, dtype=float) for p in g.lu_tx[:cfg.J_L]]
        self.lu_rx = [self._in_disc(p[:2], g.lu_rx_radius) for p in self.lu_tx]
        self.cr_tx = np.asarray(g.cr_tx, dtype=float)
        self.cr_rx = self._in_disc(self.cr_tx[:2], g.cr_rx_radius)
        self.waypoint = self._in_disc(self.cr_tx[:2], g.cr_rx_radius)
        self.lu_links = [sample_link(*link_geometry(t, r), env, geo_rng) for t, r in zip(self.lu_tx, self.lu_rx)]
        self.cr_to_lu = [sample_link(*link_geometry(self.cr_tx, r), env, geo_rng) for r in self.lu_rx]
        self.cr_link = sample_link(*link_geometry(self.cr_tx, self.cr_rx), env, geo_rng)
        self.lu_to_cr = [sample_link(*link_geometry(t, self.cr_rx), env, geo_rng) for t in self.lu_tx]
        self.anchor = self.cr_rx.copy()
        self.rate = self._adapt()
        self.adaptations = 1

    def _in_disc(self, center, radius) -> np.ndarray:
        r = radius * math.sqrt(self.rng.random())
        a = 2.0 * math.pi * self.rng.random()
        return np.array([center[0] + r * math.cos(a), center[1] + r * math.sin(a), 0.0])

    def _adapt(self) -> float:
        env = self.cfg.channel
        link = self.cr_link
        return adapt_rate(link.psi, link.k_factor, self.cfg.cr_power, env.noise_power, env.bandwidth_w)

    def move(self) -> None:
        g = self.cfg.geometry
        step = g.speed_mps * g.slot_s
        gap = self.waypoint[:2] - self.cr_rx[:2]
        dist = float(np.hypot(*gap))
        if dist <= step:
            self.cr_rx[:2] = self.waypoint[:2]
            self.waypoint = self._in_disc(self.cr_tx[:2], g.cr_rx_radius)
        else:
            self.cr_rx[:2] += gap * (step / dist)
        if float(np.hypot(*(self.cr_rx[:2] - self.anchor[:2]))) > g.readapt_m:
            env = self.cfg.channel
            self.cr_link = relink(self.cr_link, *link_geometry(self.cr_tx, self.cr_rx), env)
            self.lu_to_cr = [relink(l, *link_geometry(t, self.cr_rx), env)
                             for l, t in zip(self.lu_to_cr, self.lu_tx)]
            self.anchor = self.cr_rx.copy()
            self.rate = self._adapt()
            self.adaptations += 1

    def slot_sinr(self, busy: np.ndarray, access: np.ndarray, fade_rng: np.random.Generator):
        """CR and LU SINR per subcarrier for one slot."""
        cfg, env = self.cfg, self.cfg.channel
        K = cfg.K

        def power(link):
            h = small_scale_gains(link.k_factor, K, fade_rng)
            return link.psi * np.abs(h) ** 2

        g_cr = power(self.cr_link)
        g_lu_cr = np.array([power(l) for l in self.lu_to_cr])[self.owner, np.arange(K)]
        g_lu = np.array([power(l) for l in self.lu_links])[self.owner, np.arange(K)]
        g_cr_lu = np.array([power(l) for l in self.cr_to_lu])[self.owner, np.arange(K)]
        n0 = env.noise_power
        sinr_cr = cfg.cr_power * g_cr / (n0 + cfg.lu_power * g_lu_cr * busy)
        sinr_lu = cfg.lu_power * g_lu / (n0 + cfg.cr_power * g_cr_lu * access)
        return sinr_cr, sinr_lu


# ---------------------------------------------------------------------------
# single-agent runs


@dataclass
class ScenarioResult:
    report: MetricsReport
    truth: np.ndarray
    access: np.ndarray
    rewards: np.ndarray
    oracle: np.ndarray
    theta_hat: ThetaVector | None = None
    policies: list[PolicySet] = field(default_factory=list)
    solver_converged: bool = True
    estimator_converged: bool = True
    log: SensingLog | None = None

    @property
    def converged(self) -> bool:
        return self.solver_converged and self.estimator_converged


def _checkpoints(cfg: ScenarioConfig) -> list[int]:
    est = cfg.estimator
    if est.mode == "concurrent":
        out, t = [], est.update_start
        while t < cfg.horizon:
            out.append(t)
            t *= 2
        return out
    if est.mode == "sequential":
        learn = cfg.horizon // 2 if est.learning_slots is None else est.learning_slots
        return [learn] if 0 < learn < cfg.horizon else []
    return []


def _learning_slots(cfg: ScenarioConfig) -> int:
    if cfg.estimator.mode != "sequential":
        return 0
    return cfg.horizon // 2 if cfg.estimator.learning_slots is None else cfg.estimator.learning_slots


def run_scenario(cfg: ScenarioConfig, agent: str = "lessa") -> ScenarioResult:
    """Simulate ``cfg.horizon`` slots with the chosen access agent."""
    if agent not in AGENTS:
        raise ValueError(f"unknown agent {agent!r}; expected one of {AGENTS}")
    rng = _streams(cfg.seed)
    fragments = cfg.fragments
    tau, K = cfg.horizon, cfg.K
    truth = (sample_trace(cfg.theta_true, K, tau, cfg.init, rng["occupancy"]) if tau
             else np.zeros((0, K), dtype=np.uint8))
    model = cfg.sensing
    lam = cfg.lam
    thr = access_threshold(lam)
    solver = dataclasses.replace(cfg.solver, lam=lam)
    delta = solver.radius(cfg.K_prime)
    report = MetricsReport()

    access = np.zeros((tau, K), dtype=bool)
    samples = np.full((tau, K), np.nan + 0j)
    solver_ok, est_ok = True, True
    theta_hat = None
    policies: list[PolicySet] = []
    learning = agent == "lessa" and cfg.estimator.mode != "known"

    def solve_all(thetas):
        nonlocal solver_ok
        out = []
        for fr, th in zip(fragments, thetas):
            res = cached_solve(th, fr.width, fr.kappa, solver, model)
            solver_ok = solver_ok and res.converged
            report.solver.extend([fr.index + 1, s.iteration, s.max_change, s.mean_value] for s in res.trace)
            out.append(res.policy)
        return out

    if agent == "lessa":
        if learning:
            theta_hat = ThetaVector.uniform(cfg.estimator.theta0)
            boundary = {fr.index: (theta_hat.q0, theta_hat.q1) for fr in fragments[1:]}
            thetas = fragment_thetas(theta_hat, fragments, boundary)
        else:
            thetas = fragment_thetas(cfg.theta_true, fragments)
        sequential_learn = _learning_slots(cfg)
        policies = [None] * len(fragments) if sequential_learn else solve_all(thetas)
        agents = [FragmentAgent(fr, fr.kappa, delta, th, pol)
                  for fr, th, pol in zip(fragments, thetas, policies)]
        checkpoints = set(_checkpoints(cfg))
        em_iter = 0

        def refit(t):
            nonlocal theta_hat, boundary, em_iter, est_ok
            if t < 2:
                return fragment_thetas(theta_hat, fragments, boundary)
            fit = FragmentedEstimator(SensingLog(samples[:t]), cfg.K_prime, model, cfg.init).run(
                theta_hat, cfg.estimator.max_iters, cfg.estimator.tol, reference=cfg.theta_true,
                boundary0=boundary, start_iteration=em_iter)
            rows = fit.history if em_iter == 0 else fit.history[1:]
            for r in rows:
                th = r.theta
                report.estimator.append([r.iteration, r.log_likelihood, th.q0, th.q1, th.p00, th.p01,
                                         th.p10, th.p11, r.mse, t])
            em_iter = fit.history[-1].iteration
            theta_hat, boundary = fit.theta, fit.boundary
            est_ok = fit.converged
            return fragment_thetas(theta_hat, fragments, boundary)

        for t in range(tau):
            if learning and t in checkpoints:
                thetas = refit(t)
                for ag, th, pol in zip(agents, thetas, solve_all(thetas)):
                    ag.retarget(th, pol)
            for ag in agents:
                fr = ag.fragment
                explore = learning and t < sequential_learn
                local = ag.choose(rng["learning"] if explore else None)
                state = truth[t, fr.start:fr.start + fr.width]
                y = sense(state, local, model.p_t, model.sigma_h2, model.sigma_v2, rng["sensing"])
                post = posterior_update(ag.belief, local, y, model)
                access[t, fr.start:fr.start + fr.width] = marginal_occupancy(post) <= thr
                for k, v in y.items():
                    samples[t, fr.start + k] = v
                ag.advance(post)
        if learning and tau >= 2:
            refit(tau)
        policies = [ag.policy for ag in agents]
    elif agent == "genie":
        access = truth == 0
    else:
        busy = np_detect(truth, cfg.roc.np_samples, cfg.roc.np_target_p_fa, model.sigma_v2,
                         model.variances[1], rng["detector"])
        access = ~busy

    busy = truth.astype(bool)
    rewards = np.sum(access * (1.0 - (1.0 + lam) * busy), axis=1) if tau else np.zeros(0)
    oracle = np.sum(~busy, axis=1).astype(float) if tau else np.zeros(0)

    # throughput
    env = RadioEnvironment(cfg, rng["geometry"]) if tau else None
    rates = np.zeros(tau)
    sinr_cr = np.zeros((tau, K))
    sinr_lu = np.zeros((tau, K))
    for t in range(tau):
        rates[t] = env.rate
        sinr_cr[t], sinr_lu[t] = env.slot_sinr(busy[t], access[t], rng["fading"])
        env.move()
    w = cfg.channel.bandwidth_w
    lu_tp, no_tx = lu_throughput(busy, sinr_lu, cfg.lu_rate, w)

    loss_trace, loss_mean, excluded = normalized_loss(rewards, oracle)
    tail = loss_trace[int(math.floor((1.0 - POST_CONVERGENCE_FRACTION) * tau)):]
    tail = tail[~np.isnan(tail)]
    roc = roc_point(access, busy, lam)
    report.roc.append(roc)
    report.utility = list(zip(rewards.tolist(), oracle.tolist()))
    report.loss = loss_trace.tolist()
    s = report.scalars
    s.update({
        "agent": {"lessa": 0, "genie": 1, "np": 2}[agent],
        "seed": cfg.seed,
        "horizon": tau,
        "lambda": lam,
        "cr_throughput_bps": cr_throughput(rates, access, sinr_cr, w),
        "lu_throughput_bps": lu_tp,
        "lu_no_transmissions": no_tx,
        "mean_utility": float(rewards.mean()) if tau else 0.0,
        "mean_oracle_utility": float(oracle.mean()) if tau else 0.0,
        "normalized_loss_mean": loss_mean,
        "normalized_loss_post": float(tail.mean()) if tail.size else float("nan"),
        "loss_excluded_slots": excluded,
        "p_fa": roc.p_fa,
        "p_md": roc.p_md,
        "access_count": int(access.sum()),
        "interference_events": int((access & busy).sum()),
        "solver_converged": solver_ok,
        "estimator_converged": est_ok,
        "rate_adaptations": env.adaptations if env else 0,
    })
    if theta_hat is not None:
        s["estimator_final_mse"] = mse(theta_hat, cfg.theta_true)
    return ScenarioResult(report, truth, access, rewards, oracle, theta_hat, policies,
                          solver_ok, est_ok, SensingLog(samples) if agent == "lessa" else None)


def roc_sweep(cfg: ScenarioConfig, lambdas, seeds) -> dict[float, list]:
    """LESSA ``(p_fa, p_md)`` per penalty for every seed."""
    out = {}
    for lam in lambdas:
        out[lam] = [roc_point(r.access, r.truth.astype(bool), lam)
                    for r in (run_scenario(cfg.with_overrides(lam=float(lam), seed=s)) for s in seeds)]
    return out


# ---------------------------------------------------------------------------
# distributed episodes


@dataclass
class EpisodeResult:
    report: MetricsReport
    log_rows: list[list]
    consensus: object
    order: tuple[int, ...]
    consensus_ok: bool
    utilities: np.ndarray          # (tau,) ensemble utility
    agent_utilities: np.ndarray    # (tau, n_agents)
    coop_reward: float
    solo_rewards: np.ndarray       # mean per agent
    max_distinct_sensed: int


def _intents(marg: np.ndarray, thr: float) -> list[int]:
    idx = np.nonzero(marg <= thr)[0]
    return [int(k) for k in idx[np.argsort(marg[idx], kind="stable")]]


def run_distributed_episode(cfg: ScenarioConfig) -> EpisodeResult:
    """Several cognitive radios sharing the band under a consensus access order.

    The sensing budget is ``n_agents * sensing_per_agent`` split over the
    fragments; the policy's sensing sets are handed out round-robin along
    the agreed rank. With ``cooperative`` all samples feed one fused
    posterior; otherwise each agent runs on its own samples. In cooperative
    mode each agent also keeps a solo belief for comparison.
    """
    ma = cfg.multi_agent
    n = ma.n_agents
    rng = _streams(cfg.seed)
    kappa_total = n * ma.sensing_per_agent
    fragments = fragment_spectrum(cfg.K, cfg.K_prime, kappa_total)
    tau, K = cfg.horizon, cfg.K
    truth = (sample_trace(cfg.theta_true, K, tau, cfg.init, rng["occupancy"]) if tau
             else np.zeros((0, K), dtype=np.uint8))
    model, lam = cfg.sensing, cfg.lam
    thr = access_threshold(lam)
    solver = dataclasses.replace(cfg.solver, lam=lam)
    delta = solver.radius(cfg.K_prime)
    thetas = fragment_thetas(cfg.theta_true, fragments)
    policies = [cached_solve(th, fr.width, fr.kappa, solver, model).policy for fr, th in zip(fragments, thetas)]

    # topology and consensus
    positions = np.array([[*_disc_point(rng["agents"], ma.area_radius), 0.0] for _ in range(n)])
    if ma.rssi_db is not None:
        rssi = np.array(ma.rssi_db, dtype=float)
    else:
        rssi = rssi_matrix(positions, cfg.cr_power, cfg.channel) if n > 1 else np.zeros((1, 1))
    quorum = default_quorum(n) if ma.quorum is None else ma.quorum
    cons = run_consensus(rssi, ma.threshold_db, cfg.seed, quorum, ma.stability_rounds, ma.max_rounds, ma.drop_prob)
    ok = cons.terminated and cons.agreed()
    order = cons.order() if ok else tuple(range(n))
    rank_of = {a: r for r, a in enumerate(order)}

    def make(fr, th, pol):
        return FragmentAgent(fr, fr.kappa, delta, th, pol)

    shared = [make(fr, th, pol) for fr, th, pol in zip(fragments, thetas, policies)]
    own = [[make(fr, th, pol) for fr, th, pol in zip(fragments, thetas, policies)] for _ in range(n)]

    agent_util = np.zeros((tau, n))
    coop_rewards = np.zeros(tau)
    solo_rewards = np.zeros((tau, n))
    rows = []
    max_distinct = 0
    busy_all = truth.astype(bool)
    access_all = np.zeros((tau, K), dtype=bool)
    for t in range(tau):
        state = truth[t]
        # sensing assignment: global subcarrier -> agent
        if ma.cooperative:
            plan = [[(fr.start + k) for k in policy_action(ag.belief, ag.policy)] for fr, ag in zip(fragments, shared)]
            flat = [k for part in plan for k in part]
            assigned = {order[i % n]: [] for i in range(n)}
            for i, k in enumerate(flat):
                assigned[order[i % n]].append(k)
        else:
            assigned = {}
            for a in order:
                flat = [fr.start + k for fr, ag in zip(fragments, own[a])
                        for k in policy_action(ag.belief, ag.policy)]
                r = rank_of[a]
                assigned[a] = [k for i, k in enumerate(flat) if i % n == r]
        sensed_by = {a: [] for a in order}
        samples = {a: {} for a in order}
        for fr in fragments:
            for a in order:
                local = tuple(k - fr.start for k in assigned[a] if fr.start <= k < fr.start + fr.width)
                if not local:
                    continue
                y = sense(state[fr.start:fr.start + fr.width], local, model.p_t, model.sigma_h2,
                          model.sigma_v2, rng["sensing"])
                samples[a].update({fr.start + k: v for k, v in y.items()})
                sensed_by[a].extend(fr.start + k for k in local)
        max_distinct = max(max_distinct, len({k for ks in sensed_by.values() for k in ks}))

        def update(frag_agents, obs):
            marg = np.empty(K)
            for fr, ag in zip(fragments, frag_agents):
                local = {k - fr.start: v for k, v in obs.items() if fr.start <= k < fr.start + fr.width}
                post = posterior_update(ag.belief, tuple(local), local, model)
                marg[fr.start:fr.start + fr.width] = marginal_occupancy(post)
                ag.advance(post)
            return marg

        gain = 1.0 - (1.0 + lam) * busy_all[t]
        if ma.cooperative:
            fused = {}
            for a in order:
                fused.update(samples[a])
            marg = update(shared, fused)
            intents = {a: _intents(marg, thr) for a in order}
            coop_rewards[t] = float(np.sum((marg <= thr) * gain))
            for a in order:
                solo_marg = update(own[a], samples[a])
                solo_rewards[t, a] = float(np.sum((solo_marg <= thr) * gain))
        else:
            intents = {}
            for a in order:
                solo_marg = update(own[a], samples[a])
                intents[a] = _intents(solo_marg, thr)
                solo_rewards[t, a] = float(np.sum((solo_marg <= thr) * gain))
        alloc = allocate_access(order, intents)
        for a in sorted(order):
            sensed = " ".join(str(k + 1) for k in sorted(sensed_by[a]))
            if not alloc[a]:
                rows.append([t + 1, a, sensed, "", "", 0.0])
            for k in sorted(alloc[a]):
                u = float(gain[k])
                agent_util[t, a] += u
                access_all[t, k] = True
                rows.append([t + 1, a, sensed, k + 1, int(busy_all[t, k]), u])
        if not ma.cooperative:
            coop_rewards[t] = agent_util[t].sum()

    utilities = agent_util.sum(axis=1)
    oracle = np.sum(~busy_all, axis=1).astype(float)
    loss_trace, loss_mean, excluded = normalized_loss(utilities, oracle)
    roc = roc_point(access_all, busy_all, lam)
    report = MetricsReport()
    report.utility = list(zip(utilities.tolist(), oracle.tolist()))
    report.loss = loss_trace.tolist()
    report.roc.append(roc)
    solo_mean = solo_rewards.mean(axis=0) if tau else np.zeros(n)
    report.scalars.update({
        "seed": cfg.seed,
        "horizon": tau,
        "lambda": lam,
        "n_agents": n,
        "cooperative": ma.cooperative,
        "consensus_reached": ok,
        "consensus_rounds": cons.total_rounds,
        "mean_utility": float(utilities.mean()) if tau else 0.0,
        "normalized_loss_mean": loss_mean,
        "loss_excluded_slots": excluded,
        "p_fa": roc.p_fa,
        "p_md": roc.p_md,
        "coop_reward_mean": float(coop_rewards.mean()) if tau else 0.0,
        "solo_reward_mean_max": float(solo_mean.max()) if tau else 0.0,
        "max_distinct_sensed": max_distinct,
    })
    return EpisodeResult(report, rows, cons, order, ok, utilities, agent_util,
                         float(coop_rewards.mean()) if tau else 0.0, solo_mean, max_distinct)


def _disc_point(rng: np.random.Generator, radius: float) -> tuple[float, float]:
    r = radius * math.sqrt(rng.random())
    a = 2.0 * math.pi * rng.random()
    return r * math.cos(a), r * math.sin(a)


EPISODE_COLUMNS = ["slot", "agent_id", "sensed_subcarrier", "access_subcarrier", "truth_bit", "utility"]
