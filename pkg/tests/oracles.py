"""Brute-force reference implementations used only by the tests.

Everything here is written from the model definitions with plain loops and
deliberately shares no code with the package.
"""

import itertools
import math

import numpy as np
from scipy import integrate, special


def bits_of(index, width):
    return tuple((index >> k) & 1 for k in range(width))


def trans_prob(frm, to, theta):
    """P(to | frm) by the bottom-up product, theta = (p00, p01, p10, p11, q0, q1)."""
    p00, p01, p10, p11, q0, q1 = theta
    p = {(0, 0): p00, (0, 1): p01, (1, 0): p10, (1, 1): p11}
    q = {0: q0, 1: q1}
    prob = q[frm[0]] if to[0] else 1 - q[frm[0]]
    for k in range(1, len(to)):
        pk = p[(to[k - 1], frm[k])]
        prob *= pk if to[k] else 1 - pk
    return prob


def trans_matrix(width, theta):
    n = 2 ** width
    return np.array([[trans_prob(bits_of(i, width), bits_of(j, width), theta) for j in range(n)]
                     for i in range(n)])


def obs_density(energy, bit, p_t, sh2, sv2):
    var = sh2 * p_t * bit + sv2
    return math.exp(-energy / var) / (math.pi * var)


def posterior(prior, width, obs, p_t, sh2, sv2):
    """``obs`` maps subcarrier -> complex sample."""
    w = []
    for i, pr in enumerate(prior):
        b = bits_of(i, width)
        lik = 1.0
        for k, y in obs.items():
            lik *= obs_density(abs(y) ** 2, b[k], p_t, sh2, sv2)
        w.append(pr * lik)
    s = sum(w)
    return np.array([x / s for x in w])


def hamming_propagate(post, width, theta, delta):
    n = 2 ** width
    out = np.zeros(n)
    for j in range(n):
        for i in range(n):
            if sum(a != b for a, b in zip(bits_of(i, width), bits_of(j, width))) <= delta:
                out[j] += post[i] * trans_prob(bits_of(i, width), bits_of(j, width), theta)
    return out / out.sum()


def marginals(belief, width):
    return np.array([sum(belief[i] for i in range(len(belief)) if bits_of(i, width)[k])
                     for k in range(width)])


def best_access_value(marg, lam):
    """max over every access vector of the expected reward."""
    best = -math.inf
    for phi in itertools.product((0, 1), repeat=len(marg)):
        val = sum(f * ((1 - m) - lam * m) for f, m in zip(phi, marg))
        best = max(best, val)
    return best


def best_realized(truth, lam):
    best = -math.inf
    for phi in itertools.product((0, 1), repeat=len(truth)):
        best = max(best, sum(f * ((1 - b) - lam * b) for f, b in zip(phi, truth)))
    return best


def enumerate_smoother(observations, width, theta, init, p_t, sh2, sv2):
    """Exact E-step by summing over every state trajectory.

    ``observations[t]`` maps subcarrier -> complex sample. Returns
    ``(first[w, b], interior[u, v, b], log P(Y))``.
    """
    tau = len(observations)
    n = 2 ** width
    first = np.zeros((2, 2))
    interior = np.zeros((2, 2, 2))
    total = 0.0
    for path in itertools.product(range(n), repeat=tau):
        bits = [bits_of(s, width) for s in path]
        w = init[path[0]]
        for t in range(tau):
            if t:
                w *= trans_prob(bits[t - 1], bits[t], theta)
            for k, y in observations[t].items():
                w *= obs_density(abs(y) ** 2, bits[t][k], p_t, sh2, sv2)
        if w == 0:
            continue
        total += w
        for t in range(1, tau):
            old, new = bits[t - 1], bits[t]
            first[old[0], new[0]] += w
            for k in range(1, width):
                interior[new[k - 1], old[k], new[k]] += w
    return first / total, interior / total, math.log(total)


def marcum_q1_quad(a, b):
    """Defining integral of the first-order Marcum Q-function."""
    # exp(-(x^2+a^2)/2) I0(ax) = exp(-(x-a)^2/2) i0e(ax), which does not overflow
    f = lambda x: x * math.exp(-(x - a) ** 2 / 2) * special.i0e(a * x)
    val, _ = integrate.quad(f, b, max(a, b) + 60, points=[a] if a > b else None,
                            limit=400, epsabs=1e-14, epsrel=1e-13)
    return val


def complex_density_integral(bit, p_t, sh2, sv2):
    var = sh2 * p_t * bit + sv2
    f = lambda r: 2 * math.pi * r * math.exp(-r * r / var) / (math.pi * var)
    val, _ = integrate.quad(f, 0, 60 * math.sqrt(var))
    return val


def backup_value_quadrature(belief, alphas, theta, width, sensed, lam, gamma, p_t, sh2, sv2):
    """Backup value for a single-subcarrier action, integrating over the energy.

    With full propagation the chosen future hyperplane maximizes
    ``<alpha, posterior @ T>``.
    """
    T = trans_matrix(width, theta)
    var = [sv2, sh2 * p_t + sv2]
    states = [bits_of(i, width) for i in range(2 ** width)]

    def integrand(e):
        like = np.array([math.exp(-e / var[s[sensed]]) / var[s[sensed]] for s in states])
        joint = belief * like
        dens = joint.sum()
        if dens == 0:
            return 0.0
        post = joint / dens
        marg = [sum(post[i] for i, s in enumerate(states) if s[k]) for k in range(width)]
        now = sum(max(1 - (1 + lam) * m, 0.0) for m in marg)
        ahead = max(float(a @ (post @ T)) for a in alphas)
        return dens * (now + gamma * ahead)

    top = 60 * var[1]
    pts = [var[0] * x for x in (1, 3, 10)] + [var[1] * x for x in (1, 3)]
    val, _ = integrate.quad(integrand, 0, top, points=sorted(pts), limit=500)
    return val


def los_probability(chi, z1, z2):
    return 1.0 / (1.0 + z1 * math.exp(-z2 * (chi - z1)))


def throughput_sum(rates, access, sinr, w):
    total = 0.0
    T = len(access)
    for t in range(T):
        for k in range(len(access[t])):
            if access[t][k] and sinr[t][k] >= 2 ** (rates[t] / w) - 1:
                total += rates[t]
    return total / T if T else 0.0
