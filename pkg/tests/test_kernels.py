"""Both kernel backends must agree with each other and with scalar loops."""
import math

import numpy as np
import pytest

from confsets import _kernels
from confsets._kernels import sigmoid

numba_only = pytest.mark.skipif(not _kernels.numba_available(), reason="numba not installed")


def _gen_scalar(diff, m, p):
    return sum((m[j] * abs(diff[j])) ** p[j] for j in range(len(diff)))


def _single_scalar(diff, M, p):
    u = [sum(M[i][j] * diff[j] for j in range(len(diff))) for i in range(len(diff))]
    return sum(abs(x) ** p for x in u) ** (1.0 / p)


def _case(rng, n=40, d=4):
    diffs = rng.normal(size=(n, d))
    m = rng.uniform(0.5, 2.0, d)
    p = rng.uniform(1.0, 3.0, d)
    A = rng.normal(size=(d, d)) + 2 * np.eye(d)
    return diffs, m, p, A @ A.T, rng.uniform(1.2, 3.5)


def test_distances_match_scalar_loops(backend, rng):
    diffs, m, p, M, ps = _case(rng)
    g = _kernels.gen_dist(diffs, m, p)
    s = _kernels.single_dist(diffs, M, ps)
    for i in range(len(diffs)):
        assert g[i] == pytest.approx(_gen_scalar(diffs[i], m, p), rel=1e-12)
        assert s[i] == pytest.approx(_single_scalar(diffs[i], M, ps), rel=1e-12)


@numba_only
def test_backends_agree(rng):
    diffs, m, p, M, ps = _case(rng, n=300, d=5)
    w = rng.uniform(size=300)
    out = {}
    for name in ("numpy", "numba"):
        _kernels.use(name)
        try:
            out[name] = (
                _kernels.gen_dist(diffs, m, p), _kernels.single_dist(diffs, M, ps),
                *_kernels.gen_grad(diffs, m, p, w, True), *_kernels.single_grad(diffs, M, ps, w, True),
                *_kernels.gen_sigmoid_grad(diffs, m, p, 3.0, 7.0, True),
                *_kernels.single_sigmoid_grad(diffs, M, ps, 2.0, 7.0, True),
            )
        finally:
            _kernels.use("numpy")
    for a, b in zip(out["numpy"], out["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_sigmoid_is_stable():
    x = np.array([-1e6, -750.0, -30.0, 0.0, 30.0, 750.0, 1e6])
    s = sigmoid(x)
    assert np.all(np.isfinite(s))
    assert 0.0 < s[0] <= 1e-300 and 0.0 < s[1] <= 1e-300
    assert s[3] == 0.5 and s[-1] == 1.0
    assert s[4] == pytest.approx(1.0 / (1.0 + math.exp(-30.0)), rel=1e-15)
    assert np.all(np.diff(s) >= 0)


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.use("cuda")
