"""Physical layer: sensing observations, fading links, SINR, outage and rate.

Two channel abstractions coexist on purpose. Sensing observations use the
flat model ``Y_k | B_k ~ CN(0, sigma_h2 * p_t * B_k + sigma_v2)`` so that
belief updates stay analytic. Throughput uses the geometric model: LoS/NLoS
draw from the elevation angle, distance pathloss, and Rician/Rayleigh
small-scale gains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy import special

# Minimum elevation used when two nodes sit at the same height.
_MIN_ELEVATION = 1e-6


@dataclass(frozen=True)
class SensingModel:
    """Parameters of the per-subcarrier sensing observation law."""

    p_t: float = 1.0
    sigma_h2: float = 1.0
    sigma_v2: float = 0.1

    def __post_init__(self):
        if self.p_t <= 0 or self.sigma_h2 <= 0 or self.sigma_v2 <= 0:
            raise ValueError("sensing powers and variances must be positive")

    @classmethod
    def from_snr_db(cls, snr_db: float, sigma_v2: float = 0.1, sigma_h2: float = 1.0) -> "SensingModel":
        p_t = sigma_v2 * 10.0 ** (snr_db / 10.0) / sigma_h2
        return cls(p_t=p_t, sigma_h2=sigma_h2, sigma_v2=sigma_v2)

    @property
    def snr_db(self) -> float:
        return 10.0 * math.log10(self.sigma_h2 * self.p_t / self.sigma_v2)

    @property
    def variances(self) -> np.ndarray:
        """Observation variance for an idle and for a busy subcarrier."""
        return np.array([self.sigma_v2, self.sigma_h2 * self.p_t + self.sigma_v2])

    def energy_log_likelihoods(self, energy) -> np.ndarray:
        """Log densities ``[log f(y|0), log f(y|1)]`` given ``|y|**2``.

        The trailing axis of the result has length 2.
        """
        energy = np.asarray(energy, dtype=float)[..., None]
        var = self.variances
        return -np.log(np.pi * var) - energy / var


@dataclass(frozen=True)
class ChannelEnvParams:
    mu_los: float = 2.0
    mu_nlos: float = 2.8
    iota: float = 0.2
    psi0: float = 1e-4
    f1: float = 1.0
    f2: float = 0.0512
    z1: float = 9.12
    z2: float = 0.16
    noise_power: float = 1e-15
    bandwidth_w: float = 160e3

    def __post_init__(self):
        if not self.mu_nlos >= self.mu_los >= 2.0:
            raise ValueError("pathloss exponents must satisfy mu_nlos >= mu_los >= 2")
        if not 0.0 < self.iota <= 1.0:
            raise ValueError("iota must lie in (0, 1]")
        if self.bandwidth_w <= 0 or self.noise_power <= 0 or self.psi0 <= 0:
            raise ValueError("bandwidth, noise power and psi0 must be positive")


@dataclass(frozen=True)
class LinkState:
    is_los: bool
    psi: float
    k_factor: float
    distance_m: float
    elevation_rad: float


# ---------------------------------------------------------------------------
# sensing observations


def observation_log_density(y, b, p_t: float, sigma_h2: float, sigma_v2: float):
    """Log of the circular complex Gaussian density of a sensed sample."""
    if sigma_h2 <= 0 or sigma_v2 <= 0:
        raise ValueError("variances must be positive")
    var = sigma_h2 * p_t * np.asarray(b, dtype=float) + sigma_v2
    return -np.log(np.pi * var) - np.abs(y) ** 2 / var


def sense(state, sensing_set: Iterable[int], p_t: float, sigma_h2: float, sigma_v2: float,
          rng: np.random.Generator) -> dict[int, complex]:
    """Draw one complex sample per sensed subcarrier (0-based indices)."""
    bits = np.asarray(state)
    ks = sorted(int(k) for k in sensing_set)
    if len(set(ks)) != len(ks):
        raise ValueError("sensing set has repeated subcarriers")
    for k in ks:
        if not 0 <= k < bits.size:
            raise ValueError(f"subcarrier {k} is outside 0..{bits.size - 1}")
    if not ks:
        return {}
    var = sigma_h2 * p_t * bits[ks].astype(float) + sigma_v2
    z = rng.standard_normal((len(ks), 2))
    samples = np.sqrt(var / 2.0) * (z[:, 0] + 1j * z[:, 1])
    return {k: complex(s) for k, s in zip(ks, samples)}


def observation_vector_log_density(y: Mapping[int, complex], state, model: SensingModel) -> float:
    """Joint log density of an observation vector: a sum over sensed subcarriers."""
    bits = np.asarray(state)
    return float(sum(
        observation_log_density(v, bits[k], model.p_t, model.sigma_h2, model.sigma_v2)
        for k, v in y.items()
    ))


# ---------------------------------------------------------------------------
# Marcum Q


def marcum_q1(a: float, b: float) -> float:
    """First-order Marcum Q-function ``Q1(a, b)``.

    Uses the Bessel series in its convergent orientation with exponentially
    scaled Bessel functions; arguments whose series would need too many
    terms fall back to adaptive quadrature of the defining integral.
    """
    a = float(a)
    b = float(b)
    if a < 0 or b < 0 or math.isnan(a) or math.isnan(b):
        raise ValueError("Marcum Q arguments must be nonnegative")
    if b == 0.0:
        return 1.0
    if a == 0.0:
        return math.exp(-0.5 * b * b)
    x = a * b
    scale = math.exp(-0.5 * (a - b) ** 2)
    if scale == 0.0:
        return 0.0 if b > a else 1.0
    n_terms = int(10.0 * math.sqrt(x) + 50)
    if n_terms > 20000:
        return _marcum_q1_quad(a, b)
    k = np.arange(n_terms, dtype=float)
    bessel = special.ive(k, x)
    if a < b:
        terms = (a / b) ** k * bessel
        value = scale * math.fsum(terms)
    else:
        terms = (b / a) ** k[1:] * bessel[1:]
        value = 1.0 - scale * math.fsum(terms)
    return min(1.0, max(0.0, value))


def _marcum_q1_quad(a: float, b: float) -> float:
    from scipy import integrate

    def integrand(x):
        return x * math.exp(-0.5 * (x - a) ** 2) * special.i0e(a * x)

    if b < a:
        head, _ = integrate.quad(integrand, 0.0, b, limit=200, epsabs=1e-13)
        return min(1.0, max(0.0, 1.0 - head))
    tail, _ = integrate.quad(integrand, b, max(b, a) + 40.0, limit=200, epsabs=1e-13)
    return min(1.0, max(0.0, tail))


# ---------------------------------------------------------------------------
# large-scale geometry


def los_probability(elevation_rad: float, z1: float, z2: float) -> float:
    """Probability of a line-of-sight link at elevation ``elevation_rad``."""
    if not 0.0 < elevation_rad <= math.pi / 2 + 1e-12:
        raise ValueError("elevation must lie in (0, pi/2]")
    return 1.0 / (1.0 + z1 * math.exp(-z2 * (elevation_rad - z1)))


def pathloss(distance_m: float, is_los: bool, env: ChannelEnvParams) -> float:
    if is_los:
        return env.psi0 * distance_m ** (-env.mu_los)
    return env.iota * env.psi0 * distance_m ** (-env.mu_nlos)


def k_factor(elevation_rad: float, is_los: bool, env: ChannelEnvParams) -> float:
    return env.f1 * math.exp(env.f2 * elevation_rad) if is_los else 0.0


def link_geometry(tx_xyz, rx_xyz) -> tuple[float, float]:
    """3-D distance and elevation angle between two points."""
    tx = np.asarray(tx_xyz, dtype=float)
    rx = np.asarray(rx_xyz, dtype=float)
    horizontal = float(np.hypot(*(tx[:2] - rx[:2])))
    dh = abs(float(tx[2] - rx[2]))
    distance = math.hypot(horizontal, dh)
    if distance <= 0:
        raise ValueError("transmitter and receiver coincide")
    elevation = max(_MIN_ELEVATION, math.atan2(dh, horizontal))
    return distance, elevation


def sample_link(distance_m: float, elevation_rad: float, env: ChannelEnvParams,
                rng: np.random.Generator) -> LinkState:
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    is_los = bool(rng.random() < los_probability(elevation_rad, env.z1, env.z2))
    return LinkState(
        is_los=is_los,
        psi=pathloss(distance_m, is_los, env),
        k_factor=k_factor(elevation_rad, is_los, env),
        distance_m=distance_m,
        elevation_rad=elevation_rad,
    )


def relink(link: LinkState, distance_m: float, elevation_rad: float, env: ChannelEnvParams) -> LinkState:
    """Recompute pathloss and K-factor after a move, keeping the LoS draw."""
    return LinkState(
        is_los=link.is_los,
        psi=pathloss(distance_m, link.is_los, env),
        k_factor=k_factor(elevation_rad, link.is_los, env),
        distance_m=distance_m,
        elevation_rad=elevation_rad,
    )


def small_scale_gains(k_factor_: float, size, rng: np.random.Generator) -> np.ndarray:
    """Rician (Rayleigh for ``k_factor_ == 0``) gains with unit mean power."""
    los = math.sqrt(k_factor_ / (k_factor_ + 1.0))
    spread = math.sqrt(1.0 / (2.0 * (k_factor_ + 1.0)))
    z = rng.standard_normal(tuple(np.atleast_1d(size)) + (2,))
    return los + spread * (z[..., 0] + 1j * z[..., 1])


def expected_rssi_db(distance_m: float, elevation_rad: float, p_t: float, env: ChannelEnvParams) -> float:
    """Mean received power over noise, in dB, averaging the LoS/NLoS branches."""
    p_los = los_probability(elevation_rad, env.z1, env.z2)
    psi = p_los * pathloss(distance_m, True, env) + (1 - p_los) * pathloss(distance_m, False, env)
    return 10.0 * math.log10(psi * p_t / env.noise_power)


# ---------------------------------------------------------------------------
# link quality


def sinr_and_capacity(gains, powers, sigma_v2: float, w_hz: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-(receiver, subcarrier) SINR and Shannon capacity.

    ``gains[j, i, k]`` is ``|h|**2`` from transmitter ``j`` to receiver ``i``
    (transmitter ``i`` is intended for receiver ``i``); ``powers[j, k]`` is
    the power of transmitter ``j`` on subcarrier ``k`` (0 when idle).
    """
    gains = np.asarray(gains, dtype=float)
    powers = np.asarray(powers, dtype=float)
    if gains.ndim == 2:
        gains = gains[..., None]
    if powers.ndim == 1:
        powers = powers[:, None]
    n = gains.shape[0]
    if gains.shape[1] != n or powers.shape[0] != n:
        raise ValueError("gains must be (n, n, K) and powers (n, K) with matching n")
    received = gains * powers[:, None, :]
    idx = np.arange(n)
    signal = received[idx, idx, :]
    interference = received.sum(axis=0) - signal
    sinr = signal / (sigma_v2 + interference)
    return sinr, w_hz * np.log2(1.0 + sinr)


def outage_threshold(rate_bps: float, w_hz: float) -> float:
    """SINR below which a transmission at ``rate_bps`` fails."""
    return 2.0 ** (rate_bps / w_hz) - 1.0


def outage_probability(rate_bps: float, psi: float, k_factor_: float, p_t: float,
                       sigma_v2: float, w_hz: float) -> float:
    """Interference-free outage probability of a Rician link."""
    if k_factor_ < 0:
        raise ValueError("K-factor must be nonnegative")
    if rate_bps <= 0:
        return 0.0
    a = math.sqrt(2.0 * k_factor_)
    b = math.sqrt(2.0 * (k_factor_ + 1.0) * sigma_v2 / (psi * p_t)) * outage_threshold(rate_bps, w_hz)
    return min(1.0, max(0.0, 1.0 - marcum_q1(a, b)))


def expected_throughput(rate_bps: float, psi: float, k_factor_: float, p_t: float,
                        sigma_v2: float, w_hz: float) -> float:
    return rate_bps * (1.0 - outage_probability(rate_bps, psi, k_factor_, p_t, sigma_v2, w_hz))


def adapt_rate(psi: float, k_factor_: float, p_t: float, sigma_v2: float, w_hz: float,
               rel_tol: float = 1e-6, grid_points: int = 128) -> float:
    """Rate maximizing the expected throughput ``rate * (1 - P_out(rate))``.

    A coarse grid brackets the maximizer, then golden-section search refines
    it until the bracket is narrower than ``rel_tol`` relative.
    """
    if psi <= 0 or p_t <= 0 or sigma_v2 <= 0 or w_hz <= 0:
        raise ValueError("adapt_rate needs positive inputs")
    hi = 4.0 * w_hz * math.log2(1.0 + psi * p_t / sigma_v2)

    def objective(r):
        return expected_throughput(r, psi, k_factor_, p_t, sigma_v2, w_hz)

    grid = np.linspace(0.0, hi, grid_points + 1)
    values = [objective(r) for r in grid]
    best = int(np.argmax(values))
    lo_b = grid[max(best - 1, 0)]
    hi_b = grid[min(best + 1, grid_points)]

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi_b - inv_phi * (hi_b - lo_b)
    x2 = lo_b + inv_phi * (hi_b - lo_b)
    f1, f2 = objective(x1), objective(x2)
    while hi_b - lo_b > rel_tol * max(hi_b, 1e-300):
        if f1 < f2:
            lo_b, x1, f1 = x1, x2, f2
            x2 = lo_b + inv_phi * (hi_b - lo_b)
            f2 = objective(x2)
        else:
            hi_b, x2, f2 = x2, x1, f1
            x1 = hi_b - inv_phi * (hi_b - lo_b)
            f1 = objective(x1)
    return 0.5 * (lo_b + hi_b)
