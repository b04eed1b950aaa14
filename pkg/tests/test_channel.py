import math

import numpy as np
import pytest
from scipy import stats

import oracles
from specaccess.channel import (
    ChannelEnvParams,
    SensingModel,
    adapt_rate,
    expected_throughput,
    k_factor,
    los_probability,
    marcum_q1,
    observation_log_density,
    observation_vector_log_density,
    outage_probability,
    pathloss,
    sample_link,
    sense,
    sinr_and_capacity,
    small_scale_gains,
)

# Frozen from two independent routes: quadrature of the defining integral
# and the noncentral chi-squared tail ``ncx2.sf(b**2, 2, a**2)``.
Q1_ONE_ONE = 0.7328798037968203
# 1 / (1 + 9.12 exp(-0.16 (pi/2 - 9.12))) evaluated directly
LOS_AT_ZENITH = 0.03172711142708974
ENV = ChannelEnvParams()


def test_marcum_known_values():
    assert marcum_q1(1.0, 1.0) == pytest.approx(Q1_ONE_ONE, abs=1e-12)
    assert oracles.marcum_q1_quad(1.0, 1.0) == pytest.approx(Q1_ONE_ONE, abs=1e-12)
    assert stats.ncx2.sf(1.0, 2, 1.0) == pytest.approx(Q1_ONE_ONE, abs=1e-12)
    assert marcum_q1(2.5, 0.0) == 1.0
    for b in (0.1, 1.0, 3.0):
        assert marcum_q1(0.0, b) == pytest.approx(math.exp(-b * b / 2), rel=1e-14)


@pytest.mark.parametrize("a,b", [(0.3, 0.2), (1.5, 2.5), (4.0, 3.0), (10.0, 12.0), (25.0, 20.0), (0.01, 5.0)])
def test_marcum_against_quadrature(a, b):
    assert marcum_q1(a, b) == pytest.approx(oracles.marcum_q1_quad(a, b), abs=1e-9)


def test_marcum_monotonicity_on_grid():
    grid = np.linspace(0, 8, 33)
    table = np.array([[marcum_q1(a, b) for b in grid] for a in grid])
    assert np.all(np.diff(table, axis=1) <= 1e-12)   # nonincreasing in b
    assert np.all(np.diff(table, axis=0) >= -1e-12)  # nondecreasing in a


def test_los_probability():
    assert los_probability(math.pi / 2, 9.12, 0.16) == pytest.approx(LOS_AT_ZENITH, rel=1e-12)
    z1 = 1.2  # elevation equal to z1 gives exponent zero
    assert los_probability(z1, z1, 0.5) == pytest.approx(1 / (1 + z1))
    chis = np.linspace(0.01, math.pi / 2, 50)
    vals = [los_probability(c, 9.12, 0.16) for c in chis]
    assert np.all(np.diff(vals) >= 0)


def test_k_factor_and_pathloss():
    assert k_factor(1.0, True, ENV) == pytest.approx(math.exp(0.0512), rel=1e-12)
    assert k_factor(1.0, False, ENV) == 0.0
    d = 75.0
    ratio = pathloss(d, True, ENV) / pathloss(d, False, ENV)
    assert ratio == pytest.approx(1 / (ENV.iota * d ** (ENV.mu_los - ENV.mu_nlos)))
    link = sample_link(50.0, 0.3, ENV, np.random.default_rng(1))
    assert link.k_factor == (k_factor(0.3, True, ENV) if link.is_los else 0.0)


def test_sense_moments():
    rng = np.random.default_rng(0)
    n = 10 ** 5
    idle = np.array([abs(sense([0], [0], 1.0, 1.0, 0.1, rng)[0]) ** 2 for _ in range(n)])
    busy = np.array([abs(sense([1], [0], 1.0, 1.0, 0.1, rng)[0]) ** 2 for _ in range(n)])
    # |Y|^2 is exponential with mean var: mean var, variance var^2
    assert idle.mean() == pytest.approx(0.1, rel=0.02)
    assert idle.var() == pytest.approx(0.1 ** 2, rel=0.04)
    assert busy.mean() == pytest.approx(1.1, rel=0.02)
    assert sense([1, 0, 1], [], 1.0, 1.0, 0.1, rng) == {}


def test_observation_density():
    assert observation_log_density(0.0, 0, 1.0, 1.0, 0.1) == pytest.approx(math.log(1 / (math.pi * 0.1)))
    for b in (0, 1):
        assert oracles.complex_density_integral(b, 1.0, 1.0, 0.1) == pytest.approx(1.0, abs=1e-8)
    r = np.linspace(0, 3, 40)
    lr = observation_log_density(r, 1, 1.0, 1.0, 0.1) - observation_log_density(r, 0, 1.0, 1.0, 0.1)
    assert np.all(np.diff(lr) > 0)


def test_joint_density_factorizes():
    model = SensingModel()
    y = {0: 0.3 + 0.1j, 2: -0.5j}
    state = [1, 0, 0]
    direct = sum(math.log(oracles.obs_density(abs(v) ** 2, state[k], 1.0, 1.0, 0.1)) for k, v in y.items())
    assert observation_vector_log_density(y, state, model) == pytest.approx(direct, abs=1e-12)


def test_small_scale_gains_unit_power():
    g = small_scale_gains(3.0, 200000, np.random.default_rng(4))
    assert np.mean(np.abs(g) ** 2) == pytest.approx(1.0, rel=0.01)


def test_outage_limits_and_rayleigh_case():
    psi, p_t, sv2, w = 1e-9, 0.1, 1e-15, 160e3
    assert outage_probability(1e-9, psi, 2.0, p_t, sv2, w) == pytest.approx(0.0, abs=1e-9)
    rate = 300e3
    gamma_th = 2 ** (rate / w) - 1
    rayleigh = 1 - math.exp(-sv2 * gamma_th ** 2 / (psi * p_t))
    assert outage_probability(rate, psi, 0.0, p_t, sv2, w) == pytest.approx(rayleigh, rel=1e-12)
    rates = np.linspace(1e3, 2e6, 60)
    vals = [outage_probability(r, psi, 1.5, p_t, sv2, w) for r in rates]
    assert np.all(np.diff(vals) >= -1e-12)


def test_outage_in_unit_interval_on_random_grid():
    rng = np.random.default_rng(7)
    for _ in range(300):
        v = outage_probability(rng.uniform(1, 3e6), 10 ** rng.uniform(-13, -7), rng.uniform(0, 5),
                               rng.uniform(0.01, 1), 1e-15, 160e3)
        assert 0.0 <= v <= 1.0


def test_adapt_rate_optimality():
    psi, kf, p_t, sv2, w = 2e-10, 1.0, 0.1, 1e-15, 160e3
    r = adapt_rate(psi, kf, p_t, sv2, w)

    def obj(x):
        return expected_throughput(x, psi, kf, p_t, sv2, w)

    assert obj(r) >= obj(0.5 * r) and obj(r) >= obj(2 * r)
    hi = 4 * w * math.log2(1 + psi * p_t / sv2)
    grid = np.linspace(0, hi, 10 ** 4)
    best = max(obj(x) for x in grid)
    assert obj(r) >= best * (1 - 1e-3)


def test_adapt_rate_grows_with_link_gain():
    rates = [adapt_rate(psi, 0.5, 0.1, 1e-15, 160e3) for psi in (1e-11, 5e-11, 2e-10, 1e-9)]
    assert np.all(np.diff(rates) >= 0)


def test_sinr_and_capacity():
    sinr, cap = sinr_and_capacity([[1.0]], [1.0], 1.0, 160e3)
    assert cap[0, 0] == pytest.approx(160e3)
    gains = np.array([[2.0, 0.5, 0.1], [0.3, 1.5, 0.2], [0.4, 0.6, 3.0]])
    powers = np.array([1.0, 2.0, 0.5])
    sinr, _ = sinr_and_capacity(gains, powers, 0.1, 1.0)
    by_hand = [2.0 * 1 / (0.1 + 0.3 * 2 + 0.4 * 0.5),
               1.5 * 2 / (0.1 + 0.5 * 1 + 0.6 * 0.5),
               3.0 * 0.5 / (0.1 + 0.1 * 1 + 0.2 * 2)]
    assert np.allclose(sinr[:, 0], by_hand, rtol=1e-12)
    quiet, _ = sinr_and_capacity(gains, [1.0, 2.0, 0.0], 0.1, 1.0)
    assert quiet[0, 0] > sinr[0, 0]
