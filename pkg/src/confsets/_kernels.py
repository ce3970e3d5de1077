"""Hot pairwise-distance kernels, in two interchangeable backends.

``numba``: explicit per-pair loops compiled with ``numba.njit``. They stream
without temporaries and their cost follows the textbook operation count
(O(d) per pair for the generalized norm, O(d^2) for the single norm).

``numpy``: vectorised over a ``(d, N)`` layout so exp/log hit numpy's SIMD
ufuncs. At small ``d`` this is several times faster than the scalar loops,
so it is the default. ``CONFSETS_JIT=1`` selects numba at import, ``use()``
switches at runtime.

Conventions: ``diffs`` is an ``(N, d)`` float64 array of displacements;
``m``/``p`` (generalized) and ``M``/``p`` (single) are the *effective*
parameters. ``*_sigmoid_grad`` kernels return the per-row sigmoid values of
``T * (dist - q)`` together with the gradient of their sum.
"""
import math
import os
from types import SimpleNamespace

import numpy as np

LOG_EPS = 1e-12
SAT = 700.0


# --------------------------------------------------------------------------
# scalar-loop sources (compiled by numba on demand)
# --------------------------------------------------------------------------

def _sigmoid_scalar(x):
    e = math.exp(-min(abs(x), SAT))
    if x >= 0.0:
        return 1.0 / (1.0 + e)
    return e / (1.0 + e)


def _gen_dist_loop(diffs, m, p):
    n, d = diffs.shape
    out = np.empty(n)
    logm = np.log(m)
    for i in range(n):
        s = 0.0
        for j in range(d):
            a = abs(diffs[i, j])
            if a > 0.0:
                s += math.exp(p[j] * (math.log(a) + logm[j]))
        out[i] = s
    return out


def _gen_accum(diffs, i, m, p, logm, wi, gm, gp, gdiff, need_gdiff):
    d = diffs.shape[1]
    for j in range(d):
        a = abs(diffs[i, j])
        if a == 0.0:
            continue
        la = math.log(a) + logm[j]
        term = math.exp(p[j] * la)
        if a < LOG_EPS:
            la = math.log(LOG_EPS) + logm[j]
        gm[j] += wi * p[j] * term / m[j]
        gp[j] += wi * term * la
        if need_gdiff:
            g = wi * p[j] * term / a
            gdiff[i, j] = g if diffs[i, j] > 0.0 else -g


def _gen_grad_loop(diffs, m, p, w, need_gdiff):
    n, d = diffs.shape
    gm = np.zeros(d)
    gp = np.zeros(d)
    gdiff = np.zeros((n, d)) if need_gdiff else np.zeros((0, d))
    logm = np.log(m)
    for i in range(n):
        if w[i] != 0.0:
            _gen_accum(diffs, i, m, p, logm, w[i], gm, gp, gdiff, need_gdiff)
    return gm, gp, gdiff


def _gen_sigmoid_grad_loop(diffs, m, p, q, T, need_gdiff):
    n, d = diffs.shape
    gm = np.zeros(d)
    gp = np.zeros(d)
    gdiff = np.zeros((n, d)) if need_gdiff else np.zeros((0, d))
    sig = np.empty(n)
    logm = np.log(m)
    for i in range(n):
        s = 0.0
        for j in range(d):
            a = abs(diffs[i, j])
            if a > 0.0:
                s += math.exp(p[j] * (math.log(a) + logm[j]))
        sg = _sigmoid_scalar(T * (s - q))
        sig[i] = sg
        wi = T * sg * (1.0 - sg)
        if wi != 0.0:
            _gen_accum(diffs, i, m, p, logm, wi, gm, gp, gdiff, need_gdiff)
    return sig, gm, gp, gdiff


def _matvec_abs(M, diffs, i, u):
    d = M.shape[0]
    umax = 0.0
    for r in range(d):
        acc = 0.0
        for c in range(d):
            acc += M[r, c] * diffs[i, c]
        u[r] = acc
        if abs(acc) > umax:
            umax = abs(acc)
    return umax


def _pnorm_scaled(u, umax, p):
    s = 0.0
    for r in range(u.shape[0]):
        if u[r] != 0.0:
            s += math.exp(p * math.log(abs(u[r]) / umax))
    return umax * math.exp(math.log(s) / p)


def _single_dist_loop(diffs, M, p):
    n, d = diffs.shape
    out = np.empty(n)
    u = np.empty(d)
    for i in range(n):
        umax = _matvec_abs(M, diffs, i, u)
        out[i] = 0.0 if umax == 0.0 else _pnorm_scaled(u, umax, p)
    return out


def _single_accum(diffs, i, M, p, u, g, wi, dgdu, gM, gdiff, need_gdiff):
    d = M.shape[0]
    acc_p = 0.0
    for r in range(d):
        ar = abs(u[r]) / g
        if ar > 0.0:
            rp = math.exp(p * math.log(ar))
            acc_p += rp * math.log(max(ar, LOG_EPS))
            v = rp / ar
            dgdu[r] = v if u[r] > 0.0 else -v
        else:
            dgdu[r] = 0.0
    for r in range(d):
        coef = wi * dgdu[r]
        if coef != 0.0:
            for c in range(d):
                gM[r, c] += coef * diffs[i, c]
    if need_gdiff:
        for c in range(d):
            acc = 0.0
            for r in range(d):
                acc += M[r, c] * dgdu[r]
            gdiff[i, c] = wi * acc
    return wi * g / p * acc_p


def _single_grad_loop(diffs, M, p, w, need_gdiff):
    n, d = diffs.shape
    gM = np.zeros((d, d))
    gp = 0.0
    gdiff = np.zeros((n, d)) if need_gdiff else np.zeros((0, d))
    u = np.empty(d)
    dgdu = np.empty(d)
    for i in range(n):
        if w[i] == 0.0:
            continue
        umax = _matvec_abs(M, diffs, i, u)
        if umax == 0.0:
            continue
        g = _pnorm_scaled(u, umax, p)
        gp += _single_accum(diffs, i, M, p, u, g, w[i], dgdu, gM, gdiff, need_gdiff)
    return gM, gp, gdiff


def _single_sigmoid_grad_loop(diffs, M, p, q, T, need_gdiff):
    n, d = diffs.shape
    gM = np.zeros((d, d))
    gp = 0.0
    gdiff = np.zeros((n, d)) if need_gdiff else np.zeros((0, d))
    sig = np.empty(n)
    u = np.empty(d)
    dgdu = np.empty(d)
    for i in range(n):
        umax = _matvec_abs(M, diffs, i, u)
        g = 0.0 if umax == 0.0 else _pnorm_scaled(u, umax, p)
        sg = _sigmoid_scalar(T * (g - q))
        sig[i] = sg
        wi = T * sg * (1.0 - sg)
        if wi != 0.0 and g > 0.0:
            gp += _single_accum(diffs, i, M, p, u, g, wi, dgdu, gM, gdiff, need_gdiff)
    return sig, gM, gp, gdiff


# --------------------------------------------------------------------------
# numpy backend
# --------------------------------------------------------------------------

def sigmoid(x):
    """Logistic function, overflow-free for any input.

    ``|x|`` is capped at 700 so the lower tail saturates at about 1e-304
    (never 0) and no subnormal arithmetic occurs.
    """
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.minimum(np.abs(x), SAT))
    return np.where(x >= 0.0, 1.0, e) / (1.0 + e)


def _gen_terms(diffs, m, p):
    # (d, N) layout keeps every ufunc call contiguous
    a = np.ascontiguousarray(diffs.T)
    np.abs(a, out=a)
    with np.errstate(divide="ignore"):
        la = np.log(a)
    la += np.log(m)[:, None]
    term = p[:, None] * la
    np.exp(term, out=term)
    return a, la, term


def _gen_dist_np(diffs, m, p):
    return _gen_terms(diffs, m, p)[2].sum(axis=0)


def _gen_grad_from_terms(diffs, m, p, a, la, term, w, need_gdiff):
    la = np.maximum(la, math.log(LOG_EPS) + np.log(m)[:, None])
    wt = term * w
    gm = wt.sum(axis=1) * p / m
    gp = (wt * la).sum(axis=1)
    if not need_gdiff:
        return gm, gp, np.zeros((0, diffs.shape[1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        gd = np.where(a > 0.0, wt * p[:, None] / a, 0.0)
    return gm, gp, (gd * np.sign(diffs.T)).T


def _gen_grad_np(diffs, m, p, w, need_gdiff):
    a, la, term = _gen_terms(diffs, m, p)
    return _gen_grad_from_terms(diffs, m, p, a, la, term, w, need_gdiff)


def _gen_sigmoid_grad_np(diffs, m, p, q, T, need_gdiff):
    a, la, term = _gen_terms(diffs, m, p)
    sig = sigmoid(T * (term.sum(axis=0) - q))
    w = T * sig * (1.0 - sig)
    return (sig,) + _gen_grad_from_terms(diffs, m, p, a, la, term, w, need_gdiff)


def _single_terms(diffs, M, p):
    u = M @ diffs.T
    if not u.flags.c_contiguous:
        u = np.ascontiguousarray(u)
    a = np.abs(u)
    umax = a.max(axis=0)
    safe = np.where(umax > 0.0, umax, 1.0)
    r = a / safe
    with np.errstate(divide="ignore"):
        rp = np.exp(p * np.log(r))
    g = np.where(umax > 0.0, safe * np.power(rp.sum(axis=0), 1.0 / p), 0.0)
    return u, a, g


def _single_dist_np(diffs, M, p):
    return _single_terms(diffs, M, p)[2]


def _single_grad_from_terms(diffs, M, p, u, a, g, w, need_gdiff):
    d = diffs.shape[1]
    w = np.where(g > 0.0, w, 0.0)
    safe = np.where(g > 0.0, g, 1.0)
    r = a / safe
    with np.errstate(divide="ignore", invalid="ignore"):
        rp = np.exp(p * np.log(r))
        dgdu = np.where(r > 0.0, rp / r, 0.0) * np.sign(u)
    lr = np.log(np.maximum(r, LOG_EPS))
    gp = float(np.sum(w * g / p * (rp * lr).sum(axis=0)))
    wd = dgdu * w
    gM = wd @ diffs
    if not need_gdiff:
        return gM, gp, np.zeros((0, d))
    return gM, gp, (M.T @ wd).T


def _single_grad_np(diffs, M, p, w, need_gdiff):
    u, a, g = _single_terms(diffs, M, p)
    return _single_grad_from_terms(diffs, M, p, u, a, g, w, need_gdiff)


def _single_sigmoid_grad_np(diffs, M, p, q, T, need_gdiff):
    u, a, g = _single_terms(diffs, M, p)
    sig = sigmoid(T * (g - q))
    w = T * sig * (1.0 - sig)
    return (sig,) + _single_grad_from_terms(diffs, M, p, u, a, g, w, need_gdiff)


numpy_impl = SimpleNamespace(
    name="numpy",
    gen_dist=_gen_dist_np,
    gen_grad=_gen_grad_np,
    gen_sigmoid_grad=_gen_sigmoid_grad_np,
    single_dist=_single_dist_np,
    single_grad=_single_grad_np,
    single_sigmoid_grad=_single_sigmoid_grad_np,
)

_jit_cache = {}


def numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def jit_impl():
    """Compile (once) and return the numba backend."""
    if "impl" not in _jit_cache:
        from numba import njit

        jit = njit(cache=True)
        # helpers are resolved from module globals when the kernels compile
        for name in ("_sigmoid_scalar", "_gen_accum", "_matvec_abs", "_pnorm_scaled", "_single_accum"):
            globals()[name] = jit(globals()[name])
        _jit_cache["impl"] = SimpleNamespace(
            name="numba",
            gen_dist=jit(_gen_dist_loop),
            gen_grad=jit(_gen_grad_loop),
            gen_sigmoid_grad=jit(_gen_sigmoid_grad_loop),
            single_dist=jit(_single_dist_loop),
            single_grad=jit(_single_grad_loop),
            single_sigmoid_grad=jit(_single_sigmoid_grad_loop),
        )
    return _jit_cache["impl"]


_active = numpy_impl


def use(name):
    """Select the kernel backend (``"numpy"`` or ``"numba"``)."""
    global _active
    if name == "numpy":
        _active = numpy_impl
    elif name == "numba":
        if not numba_available():
            raise RuntimeError("numba backend requested but numba is not installed")
        _active = jit_impl()
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend():
    return _active.name


if os.environ.get("CONFSETS_JIT", "").strip().lower() in ("1", "true", "yes", "numba"):
    use("numba")


def _c(diffs):
    return np.ascontiguousarray(diffs, dtype=float)


def gen_dist(diffs, m, p):
    return _active.gen_dist(_c(diffs), m, p)


def gen_grad(diffs, m, p, w, need_gdiff=False):
    return _active.gen_grad(_c(diffs), m, p, np.ascontiguousarray(w, dtype=float), need_gdiff)


def gen_sigmoid_grad(diffs, m, p, q, T, need_gdiff=False):
    return _active.gen_sigmoid_grad(_c(diffs), m, p, float(q), float(T), need_gdiff)


def single_dist(diffs, M, p):
    return _active.single_dist(_c(diffs), _c(M), float(p))


def single_grad(diffs, M, p, w, need_gdiff=False):
    return _active.single_grad(_c(diffs), _c(M), float(p), np.ascontiguousarray(w, dtype=float), need_gdiff)


def single_sigmoid_grad(diffs, M, p, q, T, need_gdiff=False):
    return _active.single_sigmoid_grad(_c(diffs), _c(M), float(p), float(q), float(T), need_gdiff)
