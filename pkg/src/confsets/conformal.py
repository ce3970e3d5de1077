"""Split-conformal calibration and set membership."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import distance, pair_distances


class CalibrationError(ValueError):
    pass


def quantile_index(n, alpha):
    """1-based order-statistic index ``ceil((1 - alpha)(n + 1))``."""
    if not 0.0 < alpha < 1.0:
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}")
    if n < 1:
        raise CalibrationError("empty calibration scores")
    return ceil_index((1.0 - alpha) * (n + 1))


def ceil_index(x):
    # products like 0.9 * 20 land on 18.000000000000004; snap those first
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 * max(1.0, abs(x)) else int(math.ceil(x))


def conformal_quantile(scores, alpha):
    """The ``ceil((1 - alpha)(n + 1))``-th smallest score, or ``inf``.

    No interpolation. Returns ``inf`` when the index exceeds ``n``.
    """
    s = np.asarray(scores, dtype=float).ravel()
    if s.size == 0:
        raise CalibrationError("empty calibration scores")
    if not np.all(np.isfinite(s)):
        raise CalibrationError("calibration scores must be finite")
    k = quantile_index(s.size, alpha)
    if k > s.size:
        return math.inf
    return float(np.partition(s, k - 1)[k - 1])


def mvais_threshold(params, positive_scores, alpha):
    """Smallest threshold of the nested family meeting the coverage target.

    The sets are nested in ``t`` and their volume is increasing in ``t``, so
    the minimum-volume feasible member is the conformal order statistic.
    ``params`` is accepted for interface symmetry with the volume function.
    """
    return conformal_quantile(positive_scores, alpha)


@dataclass(frozen=True, eq=False)
class CalibratedSet:
    params: object
    alpha: float
    q_hat: float
    n_cal: int
    created_from: str = ""

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise CalibrationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n_cal < 1:
            raise CalibrationError("n_cal must be >= 1")
        if math.isnan(self.q_hat):
            raise CalibrationError("q_hat is NaN")

    @property
    def vacuous(self):
        return math.isinf(self.q_hat)


def calibrate(params, anchors, positives, alpha, created_from=""):
    """Calibrate the threshold on matching rows of ``anchors`` and ``positives``."""
    scores = pair_distances(params, anchors, positives)
    return CalibratedSet(params, float(alpha), conformal_quantile(scores, alpha), int(scores.size), created_from)


def calibrate_pairs(params, cal_pairs, alpha, created_from=""):
    pairs = list(cal_pairs)
    if not pairs:
        raise CalibrationError("empty calibration scores")
    a = np.array([np.asarray(x, dtype=float) for x, _ in pairs])
    b = np.array([np.asarray(y, dtype=float) for _, y in pairs])
    return calibrate(params, a, b, alpha, created_from)


def contains(cset, anchor, point):
    """Inclusive membership: ``distance <= q_hat``."""
    return distance(cset.params, anchor, point) <= cset.q_hat


def contains_batch(cset, anchors, points):
    return pair_distances(cset.params, anchors, points) <= cset.q_hat


__all__ = [
    "CalibratedSet",
    "CalibrationError",
    "calibrate",
    "calibrate_pairs",
    "conformal_quantile",
    "contains",
    "contains_batch",
    "mvais_threshold",
    "quantile_index",
]
