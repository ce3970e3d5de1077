"""Set geometries: distances, closed-form log-volumes and analytic gradients.

Four metric families are supported:

* :class:`SingleNorm` -- ``||M (z - x)||_p`` with ``M = A A^T``.
* :class:`Generalized` -- ``sum_j m_j^{p_j} |z_j - x_j|^{p_j}`` (a powered sum,
  no root is taken; thresholds live on that scale).
* :class:`FixedL2` and :class:`FixedMahalanobis` -- the conformal baselines.

Learnable families store *raw* parameters; the effective values are ``|m|``,
``|p|`` and ``A A^T``. Gradients are always taken with respect to the raw
parameters and are returned as an instance of the same class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import ClassVar, Union

import numpy as np

from . import _kernels
from .special import digamma, lgamma

DET_TOL = 1e-30
LOG_EPS = _kernels.LOG_EPS


class GeometryError(ValueError):
    pass


class DegenerateSetError(GeometryError):
    pass


def _frozen_array(x, ndim, name):
    a = np.array(x, dtype=float)
    if a.ndim != ndim:
        raise GeometryError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"{name} has non-finite entries")
    a.setflags(write=False)
    return a


def _sign(x):
    return np.where(np.asarray(x) < 0.0, -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class SingleNorm:
    """Single-exponent norm ball ``{z : ||A A^T (Z - z)||_p <= t}``."""

    A: np.ndarray
    p: float
    kind: ClassVar[str] = "single"
    learnable: ClassVar[bool] = True

    def __post_init__(self):
        A = _frozen_array(self.A, 2, "A")
        if A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise GeometryError(f"A must be square, got shape {A.shape}")
        p = float(self.p)
        if not math.isfinite(p):
            raise GeometryError("p must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "p", p)

    @classmethod
    def identity(cls, d, p=2.0):
        return cls(np.eye(d), p)

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def M(self):
        return self.A @ self.A.T

    @property
    def p_eff(self):
        return abs(self.p)

    def vector(self):
        return np.concatenate([self.A.ravel(), [self.p]])

    def with_vector(self, v):
        d = self.d
        return SingleNorm(np.asarray(v[: d * d]).reshape(d, d), float(v[d * d]))

    def decay_mask(self):
        # exponents are excluded from weight decay
        mask = np.ones(self.d * self.d + 1)
        mask[-1] = 0.0
        return mask


@dataclass(frozen=True, eq=False)
class Generalized:
    """Per-dimension scales and exponents, ``sum_j (m_j |dz_j|)^{p_j} <= t``."""

    m: np.ndarray
    p: np.ndarray
    kind: ClassVar[str] = "generalized"
    learnable: ClassVar[bool] = True

    def __post_init__(self):
        m = _frozen_array(self.m, 1, "m")
        p = _frozen_array(self.p, 1, "p")
        if m.shape != p.shape or m.size < 1:
            raise GeometryError(f"m and p must have equal non-zero length, got {m.size} and {p.size}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "p", p)

    @classmethod
    def identity(cls, d, p=2.0):
        return cls(np.ones(d), np.full(d, float(p)))

    @property
    def d(self):
        return self.m.size

    @property
    def m_eff(self):
        return np.abs(self.m)

    @property
    def p_eff(self):
        return np.abs(self.p)

    def vector(self):
        return np.concatenate([self.m, self.p])

    def with_vector(self, v):
        d = self.d
        return Generalized(np.asarray(v[:d]), np.asarray(v[d:]))

    def decay_mask(self):
        return np.concatenate([np.ones(self.d), np.zeros(self.d)])


@dataclass(frozen=True, eq=False)
class FixedL2:
    d: int
    kind: ClassVar[str] = "l2"
    learnable: ClassVar[bool] = False

    def __post_init__(self):
        if int(self.d) < 1:
            raise GeometryError("d must be >= 1")
        object.__setattr__(self, "d", int(self.d))


@dataclass(frozen=True, eq=False)
class FixedMahalanobis:
    """Mahalanobis ellipsoid; ``precision`` is the inverse covariance."""

    precision: np.ndarray
    kind: ClassVar[str] = "mahalanobis"
    learnable: ClassVar[bool] = False

    def __post_init__(self):
        P = _frozen_array(self.precision, 2, "precision")
        if P.shape[0] != P.shape[1]:
            raise GeometryError(f"precision must be square, got shape {P.shape}")
        object.__setattr__(self, "precision", P)

    @property
    def d(self):
        return self.precision.shape[0]


MetricParams = Union[SingleNorm, Generalized, FixedL2, FixedMahalanobis]


def fit_mahalanobis(displacements):
    """Mahalanobis metric from the sample covariance of displacement vectors."""
    X = np.asarray(displacements, dtype=float)
    if X.ndim != 2 or X.shape[0] <= X.shape[1]:
        raise GeometryError("need more displacement vectors than dimensions to estimate a covariance")
    cov = np.atleast_2d(np.cov(X, rowvar=False))
    return FixedMahalanobis(np.linalg.inv(cov))


# --------------------------------------------------------------------------
# distances
# --------------------------------------------------------------------------

def _as_diffs(params, anchors, points):
    a = np.asarray(anchors, dtype=float)
    b = np.asarray(points, dtype=float)
    diffs = np.atleast_2d(a - b) if a.shape == b.shape else np.atleast_2d(a) - np.atleast_2d(b)
    return check_diffs(params, diffs)


def check_diffs(params, diffs):
    diffs = np.asarray(diffs, dtype=float)
    if diffs.ndim != 2 or diffs.shape[1] != params.d:
        raise GeometryError(f"dimension mismatch: metric has d={params.d}, input has shape {diffs.shape}")
    if not np.all(np.isfinite(diffs)):
        raise GeometryError("non-finite coordinates")
    return diffs


def diff_distances(params, diffs):
    """Distances for a batch of displacement vectors ``(N, d) -> (N,)``."""
    diffs = check_diffs(params, diffs)
    if isinstance(params, Generalized):
        return _kernels.gen_dist(diffs, params.m_eff, params.p_eff)
    if isinstance(params, SingleNorm):
        return _kernels.single_dist(diffs, params.M, params.p_eff)
    if isinstance(params, FixedL2):
        return np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    if isinstance(params, FixedMahalanobis):
        q = np.einsum("ij,jk,ik->i", diffs, params.precision, diffs)
        return np.sqrt(np.maximum(q, 0.0))
    raise GeometryError(f"unknown metric type {type(params).__name__}")


def pair_distances(params, anchors, points):
    """Distances between matching rows of ``anchors`` and ``points``."""
    return diff_distances(params, _as_diffs(params, anchors, points))


def distance(params, anchor, point):
    a = np.asarray(anchor, dtype=float)
    b = np.asarray(point, dtype=float)
    if a.shape != (params.d,) or b.shape != (params.d,):
        raise GeometryError(f"dimension mismatch: metric has d={params.d}, got {a.shape} and {b.shape}")
    return float(pair_distances(params, a, b)[0])


# --------------------------------------------------------------------------
# volumes
# --------------------------------------------------------------------------

def _log_unit_ball(d, p):
    return d * math.log(2.0) + d * lgamma(1.0 + 1.0 / p) - lgamma(1.0 + d / p)


def _logdet_spd_from_factor(A):
    sign, logabs = np.linalg.slogdet(A)
    logdet = 2.0 * logabs
    if sign == 0 or logdet < math.log(DET_TOL):
        raise DegenerateSetError(f"degenerate set: det(M) = exp({logdet:.3g}) below {DET_TOL:g}")
    return logdet


def _check_t(t):
    t = float(t)
    if math.isnan(t) or t <= 0.0:
        raise GeometryError(f"threshold must be positive, got {t}")
    return t


def log_volume(params, t):
    """Natural log of the Lebesgue volume of ``{z : dist(Z, z) <= t}``.

    Returns ``inf`` for ``t = inf``.
    """
    t = _check_t(t)
    if math.isinf(t):
        return math.inf
    d = params.d
    if isinstance(params, Generalized):
        p = params.p_eff
        if np.any(p == 0.0) or np.any(params.m_eff == 0.0):
            raise DegenerateSetError("degenerate set: zero scale or exponent")
        inv = 1.0 / p
        s = float(inv.sum())
        return (s * math.log(t) - float(np.log(params.m_eff).sum()) + d * math.log(2.0)
                + sum(lgamma(1.0 + x) for x in inv) - lgamma(1.0 + s))
    if isinstance(params, SingleNorm):
        p = params.p_eff
        if p == 0.0:
            raise DegenerateSetError("degenerate set: zero exponent")
        return d * math.log(t) + _log_unit_ball(d, p) - _logdet_spd_from_factor(params.A)
    if isinstance(params, FixedL2):
        return d * math.log(t) + _log_unit_ball(d, 2.0)
    if isinstance(params, FixedMahalanobis):
        sign, logdet = np.linalg.slogdet(params.precision)
        if sign <= 0 or logdet < math.log(DET_TOL):
            raise DegenerateSetError("degenerate set: precision matrix is not positive definite")
        return d * math.log(t) + _log_unit_ball(d, 2.0) - 0.5 * logdet
    raise GeometryError(f"unknown metric type {type(params).__name__}")


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

def _require_learnable(params):
    if not getattr(params, "learnable", False):
        raise GeometryError(f"non-learnable metric: {params.kind}")


def _single_record(params, gM, gp):
    gA = (gM + gM.T) @ params.A
    return SingleNorm(gA, float(gp) * float(_sign(params.p)))


def _gen_record(params, gm, gp):
    return Generalized(gm * _sign(params.m), gp * _sign(params.p))


def accumulate_grad(params, diffs, weights, need_gdiff=False):
    """Gradient of ``sum_i w_i * dist(diffs_i)`` w.r.t. the raw parameters.

    Returns ``(record, gdiff)``; ``gdiff`` is the ``(N, d)`` gradient with
    respect to each displacement when requested, else ``None``.
    """
    _require_learnable(params)
    diffs = check_diffs(params, diffs)
    w = np.asarray(weights, dtype=float)
    if isinstance(params, Generalized):
        gm, gp, gd = _kernels.gen_grad(diffs, params.m_eff, params.p_eff, w, need_gdiff)
        rec = _gen_record(params, gm, gp)
    else:
        gM, gp, gd = _kernels.single_grad(diffs, params.M, params.p_eff, w, need_gdiff)
        rec = _single_record(params, gM, gp)
    return rec, (gd if need_gdiff else None)


def sigmoid_grad(params, diffs, q, T, need_gdiff=False):
    """Sigmoid exclusion surrogate over a batch and the gradient of its sum.

    Returns ``(sig, record, gdiff)`` where ``sig[i] = sigmoid(T (dist_i - q))``
    and ``q`` is treated as a constant.
    """
    _require_learnable(params)
    diffs = check_diffs(params, diffs)
    if isinstance(params, Generalized):
        sig, gm, gp, gd = _kernels.gen_sigmoid_grad(diffs, params.m_eff, params.p_eff, q, T, need_gdiff)
        rec = _gen_record(params, gm, gp)
    else:
        sig, gM, gp, gd = _kernels.single_sigmoid_grad(diffs, params.M, params.p_eff, q, T, need_gdiff)
        rec = _single_record(params, gM, gp)
    return sig, rec, (gd if need_gdiff else None)


def distance_grad(params, anchor, point):
    """Analytic gradient of :func:`distance` w.r.t. every raw parameter.

    ``|dz_j|`` is clamped at 1e-12 inside logarithms so a zero displacement
    gives a finite gradient.
    """
    _require_learnable(params)
    diffs = _as_diffs(params, anchor, point)
    if diffs.shape[0] != 1:
        raise GeometryError("distance_grad takes a single anchor/point pair")
    return accumulate_grad(params, diffs, np.ones(1))[0]


def log_volume_grad(params, t):
    """Gradient of :func:`log_volume` w.r.t. the raw parameters at fixed ``t``."""
    _require_learnable(params)
    t = _check_t(t)
    if math.isinf(t):
        raise GeometryError("log-volume gradient undefined for an unbounded set")
    d = params.d
    if isinstance(params, Generalized):
        p = params.p_eff
        if np.any(p == 0.0) or np.any(params.m == 0.0):
            raise DegenerateSetError("degenerate set: zero scale or exponent")
        s = float((1.0 / p).sum())
        psi_s = digamma(1.0 + s)
        gp = np.array([-(math.log(t) + digamma(1.0 + 1.0 / pj) - psi_s) / (pj * pj) for pj in p])
        return Generalized(-1.0 / params.m, gp * _sign(params.p))
    p = params.p_eff
    _logdet_spd_from_factor(params.A)
    gA = -2.0 * np.linalg.inv(params.A).T
    gp = d / (p * p) * (digamma(1.0 + d / p) - digamma(1.0 + 1.0 / p))
    return SingleNorm(gA, gp * float(_sign(params.p)))
