"""Independent reference implementations used by the tests.

Nothing here calls the package's numeric kernels: distances are scalar
Python loops, gradients are central differences and volumes are
Monte-Carlo membership counts.
"""
import math

import numpy as np


def gen_distance(m, p, diff):
    return sum((abs(float(mj)) * abs(float(dj))) ** abs(float(pj)) for mj, pj, dj in zip(m, p, diff))


def single_distance(A, p, diff):
    A = np.asarray(A, dtype=float)
    d = len(diff)
    M = [[sum(A[i][k] * A[j][k] for k in range(d)) for j in range(d)] for i in range(d)]
    u = [sum(M[i][j] * float(diff[j]) for j in range(d)) for i in range(d)]
    p = abs(float(p))
    return sum(abs(x) ** p for x in u) ** (1.0 / p)


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_err(got, ref, floor=1e-8):
    got = np.asarray(got, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    return float(np.linalg.norm(got - ref) / max(np.linalg.norm(ref), floor))


def bounding_halfwidths(params, t):
    """Half-widths of an axis-aligned box containing the set of radius ``t``."""
    if params.kind == "generalized":
        return t ** (1.0 / params.p_eff) / params.m_eff
    Minv = np.abs(np.linalg.inv(params.M))
    p = params.p_eff
    # Hoelder: |(M^-1 u)_i| <= ||row_i||_q ||u||_p, and ||u||_1 <= ||u||_p for p < 1
    if p <= 1.0:
        return t * Minv.max(axis=1)
    q = p / (p - 1.0)
    return t * (Minv ** q).sum(axis=1) ** (1.0 / q)


def mc_volume(params, t, n=1_000_000, seed=0, chunk=250_000):
    from confsets.geometry import diff_distances

    rng = np.random.default_rng(seed)
    hw = bounding_halfwidths(params, t)
    inside = 0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        z = rng.uniform(-1.0, 1.0, size=(m, params.d)) * hw
        inside += int(np.count_nonzero(diff_distances(params, z) <= t))
        done += m
    frac = inside / n
    return frac * float(np.prod(2.0 * hw)), frac


def brute_force_mvais(pos, neg, alpha):
    """Scan every candidate threshold; return the smallest one meeting coverage
    and the best exclusion any feasible candidate achieves."""
    pos = [float(x) for x in pos]
    n = len(pos)
    need = math.ceil((1.0 - alpha) * (n + 1) - 1e-9)
    if need > n:
        return math.inf, 0.0
    best_t = None
    best_exc = -1.0
    for t in sorted(set(pos)):
        covered = sum(1 for x in pos if x <= t)
        if covered >= need:
            if best_t is None:
                best_t = t
            exc = sum(1 for x in neg if x > t) / len(neg) if len(neg) else 0.0
            best_exc = max(best_exc, exc)
    return best_t, best_exc


def random_single(rng, d, p_lo=1.0, p_hi=4.0):
    from confsets.geometry import SingleNorm

    A = np.eye(d) + 0.3 * rng.normal(size=(d, d))
    return SingleNorm(A, float(rng.uniform(p_lo, p_hi)))


def random_generalized(rng, d, p_lo=1.0, p_hi=4.0):
    from confsets.geometry import Generalized

    return Generalized(rng.uniform(0.5, 2.0, d), rng.uniform(p_lo, p_hi, d))
