"""Coverage, exclusion and volume reports, OOD scores, AUROC / FPR95 and sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .conformal import ceil_index

TABLE_COLUMNS = ("method", "coverage_mean", "coverage_std", "exclusion_mean", "exclusion_std",
                 "logvol_mean", "logvol_std")

SWEEP_PARAMS = {
    "alpha": "alpha", "T": "sigmoid_T", "sigmoid_t": "sigmoid_T", "sigmoid_T": "sigmoid_T",
    "lambda_infonce": "lambda_infonce", "infonce_weight": "lambda_infonce", "tau": "tau",
    "lambda": "lam", "lam": "lam", "k": "k",
}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class SeedEval:
    seed: int
    coverage: float
    exclusion: float
    log_volume: float
    q_hat: float
    n_pos: int
    n_neg: int
    vacuous: bool = False

    @property
    def pos_miss(self):
        return 1.0 - self.coverage


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float


@dataclass
class EvalReport:
    coverage: Stat
    exclusion: Stat
    log_volume: Stat
    per_seed: list = field(default_factory=list)
    config_digest: str = ""

    def to_dict(self):
        return {
            "coverage": {"mean": self.coverage.mean, "std": self.coverage.std},
            "exclusion": {"mean": self.exclusion.mean, "std": self.exclusion.std},
            "log_volume": {"mean": _jnum(self.log_volume.mean), "std": _jnum(self.log_volume.std)},
            "per_seed": [{k: _jnum(v) if isinstance(v, float) else v for k, v in r.__dict__.items()}
                         for r in self.per_seed],
            "config_digest": self.config_digest,
        }


def _jnum(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def config_digest(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _stat(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return Stat(math.nan, math.nan)
    if np.any(np.isinf(v)):
        return Stat(float(v.mean()), math.nan)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return Stat(float(v.mean()), std)


def aggregate(per_seed, digest=""):
    """Mean and sample standard deviation (n - 1) over seeds."""
    per_seed = sorted(per_seed, key=lambda r: r.seed)
    return EvalReport(_stat([r.coverage for r in per_seed]), _stat([r.exclusion for r in per_seed]),
                      _stat([r.log_volume for r in per_seed]), per_seed, digest)


def _mapped(batch, head):
    return batch if head is None else batch.mapped(head)


def evaluate_set(cset, batches, seed=0, head=None):
    """Fold a stream of test triplet batches into one :class:`SeedEval`."""
    q = cset.q_hat
    n_in = n_pos = n_out = n_neg = 0
    for b in batches:
        b = _mapped(b, head)
        dp = geo.diff_distances(cset.params, b.pos_diffs())
        n_in += int(np.count_nonzero(dp <= q))
        n_pos += dp.size
        if b.k_neg:
            dn = geo.diff_distances(cset.params, b.neg_diffs())
            n_out += int(np.count_nonzero(dn > q))
            n_neg += dn.size
    if n_pos == 0:
        raise EvaluationError("empty test stream")
    vacuous = math.isinf(q)
    try:
        lv = geo.log_volume(cset.params, q)
    except geo.DegenerateSetError:
        lv = math.inf
    return SeedEval(int(seed), n_in / n_pos, (n_out / n_neg) if n_neg else math.nan, lv, q,
                    n_pos, n_neg, vacuous)


def anchor_scores(cset, batch, subtract_positive=False, head=None):
    """Per-anchor anomaly scores: one minus the anchor's negative exclusion rate.

    The subtracting variant also removes the positive exclusion rate and is
    clamped to [-1, 1].
    """
    b = _mapped(batch, head)
    if b.k_neg == 0:
        raise EvaluationError("anomaly scores need negatives")
    q = cset.q_hat
    dn = geo.diff_distances(cset.params, b.neg_diffs()).reshape(b.n, b.k_neg)
    score = 1.0 - np.mean(dn > q, axis=1)
    if subtract_positive:
        dp = geo.diff_distances(cset.params, b.pos_diffs()).reshape(b.n, -1)
        score = np.clip(score - np.mean(dp > q, axis=1), -1.0, 1.0)
    return score


def ood_score(cset, batches, subtract_positive=False, head=None):
    """Dataset-level score: one minus the pooled negative exclusion rate."""
    n_out = n_neg = n_pout = n_pos = 0
    q = cset.q_hat
    for b in batches:
        b = _mapped(b, head)
        if b.k_neg:
            dn = geo.diff_distances(cset.params, b.neg_diffs())
            n_out += int(np.count_nonzero(dn > q))
            n_neg += dn.size
        if subtract_positive:
            dp = geo.diff_distances(cset.params, b.pos_diffs())
            n_pout += int(np.count_nonzero(dp > q))
            n_pos += dp.size
    if n_neg == 0:
        raise EvaluationError("empty stream: no negatives to score")
    s = 1.0 - n_out / n_neg
    if subtract_positive:
        s = min(1.0, max(-1.0, s - n_pout / n_pos))
    return s


def auroc(id_scores, ood_scores):
    """Mann-Whitney AUROC with OOD as the positive class; ties count one half."""
    a = np.asarray(id_scores, dtype=float).ravel()
    b = np.asarray(ood_scores, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EvaluationError("AUROC needs non-empty score sets")
    s = np.sort(a)
    below = np.searchsorted(s, b, side="left")
    ties = np.searchsorted(s, b, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (a.size * b.size))


def fpr95(id_scores, ood_scores, tpr=0.95):
    """Fraction of OOD scores at or below the smallest threshold keeping ``tpr`` of ID."""
    a = np.sort(np.asarray(id_scores, dtype=float).ravel())
    b = np.asarray(ood_scores, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EvaluationError("FPR95 needs non-empty score sets")
    k = min(max(ceil_index(tpr * a.size), 1), a.size)
    thr = a[k - 1]
    return float(np.mean(b <= thr))


@dataclass(frozen=True)
class OODReport:
    auroc: float
    fpr95: float
    id_scores: np.ndarray
    ood_scores: np.ndarray


def ood_report(id_scores, ood_scores):
    return OODReport(auroc(id_scores, ood_scores), fpr95(id_scores, ood_scores),
                     np.asarray(id_scores), np.asarray(ood_scores))


@dataclass(frozen=True)
class BoundCheck:
    name: str
    measured: float
    bound: float
    slack: float
    n: int

    @property
    def passed(self):
        return self.measured >= self.bound - self.slack


def oracle_bound(rate, pi):
    """Class-conditional lower bound ``1 - rate / pi``."""
    if not 0.0 < pi <= 1.0:
        raise EvaluationError(f"pi must lie in (0, 1], got {pi}")
    return 1.0 - rate / pi


def _slack(bound, n):
    b = min(max(bound, 0.0), 1.0)
    return 3.0 * math.sqrt(b * (1.0 - b) / n) if n > 0 else math.inf


def check_oracle_bounds(inclusion, n_inclusion, alpha, pi_pos, exclusion=None, n_exclusion=0,
                        beta=None, pi_neg=1.0):
    """Compare measured class-conditional rates with their oracle lower bounds.

    ``slack`` is three binomial standard deviations at the bound.
    """
    b = oracle_bound(alpha, pi_pos)
    checks = [BoundCheck("inclusion", float(inclusion), b, _slack(b, n_inclusion), int(n_inclusion))]
    if exclusion is not None and beta is not None:
        b = oracle_bound(beta, pi_neg)
        checks.append(BoundCheck("exclusion", float(exclusion), b, _slack(b, n_exclusion), int(n_exclusion)))
    return checks


def sweep_field(name):
    try:
        return SWEEP_PARAMS[name.replace("-", "_")]
    except KeyError:
        raise EvaluationError(f"cannot sweep {name!r}; choose one of alpha, T, lambda_infonce, tau, lambda, k") from None


def sweep(runner, base_config, name, values):
    """Re-run ``runner(config)`` for each value; returns ``[(value, EvalReport)]``."""
    from dataclasses import replace

    fld = sweep_field(name)
    if not len(values):
        raise EvaluationError("sweep needs at least one value")
    return [(v, runner(replace(base_config, **{fld: type(getattr(base_config, fld))(v)}))) for v in values]


def _fmt(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def table_csv(rows):
    """CSV text for ``[(method, EvalReport)]`` in the fixed column order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for name, r in rows:
        w.writerow([name] + [_fmt(x) for x in (r.coverage.mean, r.coverage.std, r.exclusion.mean,
                                               r.exclusion.std, r.log_volume.mean, r.log_volume.std)])
    return buf.getvalue()


def sweep_csv(name, results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((name,) + TABLE_COLUMNS[1:])
    for v, r in results:
        w.writerow([_fmt(v)] + [_fmt(x) for x in (r.coverage.mean, r.coverage.std, r.exclusion.mean,
                                                  r.exclusion.std, r.log_volume.mean, r.log_volume.std)])
    return buf.getvalue()


def report_json(report):
    return json.dumps(report.to_dict(), indent=2) + "\n"


def assert_disjoint(ids_a, ids_b, what="calibration and test"):
    common = set(ids_a).intersection(ids_b)
    if common:
        sample = sorted(common)[:3]
        raise EvaluationError(f"split overlap between {what} data: {len(common)} shared ids, e.g. {sample}")
