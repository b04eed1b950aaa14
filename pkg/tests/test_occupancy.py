import math

import numpy as np
import pytest

import oracles
from specaccess.occupancy import (
    DEFAULT_THETA,
    ThetaVector,
    bic,
    boundary_law,
    propagate_distribution,
    sample_next_state,
    sample_trace,
    state_index,
    trace_log_likelihood,
    transition_matrix,
    transition_probability,
)

PT = tuple(DEFAULT_THETA.as_array())


def test_two_subcarrier_idle_to_idle():
    # (1 - q0)(1 - p00) = 0.7 * 0.9
    assert transition_probability([0, 0], [0, 0], DEFAULT_THETA) == pytest.approx(0.63, abs=1e-15)
    assert oracles.trans_prob((0, 0), (0, 0), PT) == pytest.approx(0.63, abs=1e-15)


@pytest.mark.parametrize("width", range(1, 11))
def test_rows_sum_to_one(width):
    rows = transition_matrix(width, DEFAULT_THETA).sum(axis=1)
    assert np.max(np.abs(rows - 1.0)) < 1e-12


@pytest.mark.parametrize("width", [1, 2, 3, 4])
def test_matrix_matches_factor_by_factor_oracle(width):
    rng = np.random.default_rng(width)
    theta = ThetaVector.from_array(rng.random(6))
    ours = transition_matrix(width, theta)
    ref = oracles.trans_matrix(width, tuple(theta.as_array()))
    assert np.max(np.abs(ours - ref)) < 1e-14


def test_all_zero_and_all_one_parameters():
    zero, one = ThetaVector.uniform(0.0), ThetaVector.uniform(1.0)
    rng = np.random.default_rng(0)
    for frm in ([0, 1, 1], [1, 0, 1], [1, 1, 1]):
        assert transition_probability(frm, [0, 0, 0], zero) == 1.0
        assert sample_next_state(frm, one, rng).tolist() == [1, 1, 1]


def test_sampler_matches_exact_law():
    # chi-squared goodness of fit of 1e6 draws from a fixed state
    theta = DEFAULT_THETA
    frm = np.array([1, 0, 1], dtype=np.uint8)
    rng = np.random.default_rng(11)
    n = 10 ** 6
    draws = np.array([state_index(sample_next_state(frm, theta, rng)) for _ in range(n)])
    counts = np.bincount(draws, minlength=8)
    prob = np.array([oracles.trans_prob(tuple(frm), oracles.bits_of(j, 3), tuple(theta.as_array()))
                     for j in range(8)])
    expected = n * prob
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 24.3  # 99.9% quantile at 7 degrees of freedom
    se = np.sqrt(prob * (1 - prob) / n)
    assert np.all(np.abs(counts / n - prob) <= 3 * se + 1e-12)


def test_sampler_is_deterministic():
    a = sample_trace(DEFAULT_THETA, 5, 50, "uniform", np.random.default_rng(3))
    b = sample_trace(DEFAULT_THETA, 5, 50, "uniform", np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert sample_trace(DEFAULT_THETA, 4, 1, "uniform", np.random.default_rng(0)).shape == (1, 4)


def test_long_run_occupancy_strictly_inside_unit_interval():
    trace = sample_trace(DEFAULT_THETA, 18, 20000, "uniform", np.random.default_rng(1))
    rate = trace.mean(axis=0)
    assert np.all(rate > 0) and np.all(rate < 1)


def test_log_likelihood_two_slots():
    trace = np.array([[0, 0], [0, 0]])
    assert trace_log_likelihood(trace, DEFAULT_THETA) == pytest.approx(math.log(0.63) - 2 * math.log(2))


def test_forbidden_transition_gives_minus_infinity():
    theta = ThetaVector(0.0, 0.3, 0.3, 0.7, 0.3, 0.8)
    trace = np.array([[0, 0], [0, 1]])
    assert trace_log_likelihood(trace, theta) == -math.inf


def test_true_parameters_score_higher_on_average():
    rng = np.random.default_rng(2)
    other = ThetaVector(0.2, 0.4, 0.2, 0.6, 0.4, 0.7)
    diffs = [trace_log_likelihood(t, DEFAULT_THETA) - trace_log_likelihood(t, other)
             for t in (sample_trace(DEFAULT_THETA, 4, 200, "uniform", rng) for _ in range(100))]
    assert np.mean(diffs) > 0


def test_log_likelihood_additivity():
    trace = sample_trace(DEFAULT_THETA, 3, 40, "uniform", np.random.default_rng(4))
    whole = trace_log_likelihood(trace, DEFAULT_THETA)
    head = trace_log_likelihood(trace[:21], DEFAULT_THETA)
    tail = trace_log_likelihood(trace[20:], DEFAULT_THETA)
    assert whole == pytest.approx(head + tail - (-3 * math.log(2)), abs=1e-9)


def test_bic_properties():
    trace = sample_trace(DEFAULT_THETA, 3, 100, "uniform", np.random.default_rng(6))
    nu = trace.size
    b6 = bic(trace, DEFAULT_THETA, 6, nu)
    b12 = bic(trace, DEFAULT_THETA, 12, nu)
    assert b12 - b6 == pytest.approx(6 * math.log(nu))
    other = ThetaVector(0.5, 0.5, 0.5, 0.5, 0.5, 0.5)
    ll_a, ll_b = trace_log_likelihood(trace, DEFAULT_THETA), trace_log_likelihood(trace, other)
    assert (bic(trace, DEFAULT_THETA, 6, nu) < bic(trace, other, 6, nu)) == (ll_a > ll_b)


def test_propagate_distribution_matches_dense_product():
    rng = np.random.default_rng(8)
    for width in (1, 3, 5):
        dist = rng.dirichlet(np.ones(2 ** width))
        assert np.allclose(propagate_distribution(dist, DEFAULT_THETA, width),
                           dist @ transition_matrix(width, DEFAULT_THETA), atol=1e-14)


def test_boundary_law_is_marginal_conditional():
    law = boundary_law(DEFAULT_THETA, 0)
    assert law == (DEFAULT_THETA.q0, DEFAULT_THETA.q1)
    r0, r1 = boundary_law(DEFAULT_THETA, 6)
    trace = sample_trace(DEFAULT_THETA, 7, 100000, "uniform", np.random.default_rng(9))
    prev, nxt = trace[1000:-1, 6], trace[1001:, 6]
    assert nxt[prev == 0].mean() == pytest.approx(r0, abs=0.01)
    assert nxt[prev == 1].mean() == pytest.approx(r1, abs=0.01)
