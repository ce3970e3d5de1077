"""Single-seed experiment runs on the simulated benchmark.

Every run here is a pure function of its configuration and seed. Seed
fan-out and file output live in :mod:`confsets.cli`.

Calibration protocol: the calibration split is halved at random. The first
half (one positive per anchor) estimates the Mahalanobis covariance, the
second half (one positive per anchor) sets ``q_hat`` for every method.
Vol objectives train in the positive-only regime: no negatives are sampled
and the checkpoint with the lowest training log-volume is kept.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation as ev
from . import geometry as geo
from .conformal import calibrate
from .simdata import SimConfig, TripletSampler, generate_mixed3d, stream, translated
from .training import Objective, ProjectionHead, TrainConfig, train

# sampler purposes, so train / calibration / test draws never share a stream
P_TRAIN, P_CAL, P_TEST, P_HALVES = 1, 2, 3, 4

METHODS = {
    "l2": ("Conformal Ball (l2)", "l2", None),
    "mahalanobis": ("Mahalanobis Ellipsoid", "mahalanobis", None),
    "single-vol": ("Single (Vol)", "single", Objective.VOL),
    "generalized-vol": ("Generalized (Vol)", "generalized", Objective.VOL),
    "single-neg": ("Single (Neg)", "single", Objective.NEG),
    "generalized-neg": ("Generalized (Neg)", "generalized", Objective.NEG),
    "single-negvol": ("Single (Neg,Vol)", "single", Objective.NEGVOL),
    "generalized-negvol": ("Generalized (Neg,Vol)", "generalized", Objective.NEGVOL),
    "single-negvol-infonce": ("Single (Neg,Vol)+InfoNCE", "single", Objective.NEGVOL_INFONCE),
    "generalized-negvol-infonce": ("Generalized (Neg,Vol)+InfoNCE", "generalized", Objective.NEGVOL_INFONCE),
}
TABLE_METHODS = ("l2", "mahalanobis", "single-vol", "generalized-vol", "single-neg", "generalized-neg",
                 "single-negvol", "generalized-negvol")


def method_key(metric, objective=None):
    if metric in ("l2", "mahalanobis"):
        return metric
    return f"{metric}-{Objective(objective).value}"


@dataclass(frozen=True)
class PipelineConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    eval_k: int = 200
    eval_chunk: int = 500
    on_divergence: str = "stop"

    def to_dict(self):
        return {"train": self.train.to_dict(), "sim": self.sim.to_dict(), "eval_k": self.eval_k,
                "eval_chunk": self.eval_chunk, "on_divergence": self.on_divergence}

    def digest(self):
        return ev.config_digest(self.to_dict())


@dataclass
class CalibrationData:
    cov_anchors: np.ndarray
    cov_positives: np.ndarray
    anchors: np.ndarray
    positives: np.ndarray


def calibration_data(data, seed):
    s = TripletSampler(data, "cal", 1, seed, k_neg=0, purpose=P_CAL)
    pos, _, _ = s.indices(0)
    order = stream(seed, P_HALVES).permutation(s.n)
    h = s.n // 2
    first, second = np.sort(order[:h]), np.sort(order[h:])
    X = s.points
    return CalibrationData(X[first], X[pos[first, 0]], X[second], X[pos[second, 0]])


def fit_baseline(metric, cal, d):
    if metric == "l2":
        return geo.FixedL2(d)
    if metric == "mahalanobis":
        return geo.fit_mahalanobis(cal.cov_anchors - cal.cov_positives)
    raise ValueError(f"unknown baseline {metric!r}")


@dataclass
class MethodRun:
    key: str
    params: object
    head: ProjectionHead
    result: ev.SeedEval
    best_epoch: int = 0
    diverged: str = ""
    history: list = field(default_factory=list)


def train_sampler(data, tcfg, seed, positive_only=False):
    return TripletSampler(data, "train", tcfg.k, seed, k_neg=0 if positive_only else tcfg.k, purpose=P_TRAIN)


def test_batches(data, k, seed, chunk, split="test", purpose=P_TEST):
    s = TripletSampler(data, split, k, seed, purpose=purpose)
    pos, neg, match = s.indices(0)
    for a in range(0, s.n, chunk):
        yield s.batch(np.arange(a, min(a + chunk, s.n)), pos, neg, match)


def fit_method(data, key, pcfg, seed, cal=None):
    """Parameters (and head) for one method on one seed's data."""
    _, metric, objective = METHODS[key]
    cal = calibration_data(data, seed) if cal is None else cal
    if objective is None:
        return fit_baseline(metric, cal, data.d), ProjectionHead.identity(data.d), None
    tcfg = replace(pcfg.train, objective=objective, seed=seed)
    pos_only = objective is Objective.VOL
    model = train(train_sampler(data, tcfg, seed, pos_only), tcfg, metric,
                  positive_only=pos_only, on_divergence=pcfg.on_divergence)
    return model.params, model.head, model


def run_method(data, key, pcfg, seed, cal=None):
    cal = calibration_data(data, seed) if cal is None else cal
    params, head, model = fit_method(data, key, pcfg, seed, cal)
    cset = calibrate(params, head.apply(cal.anchors), head.apply(cal.positives), pcfg.train.alpha,
                     created_from=f"{key}:seed={seed}")
    res = ev.evaluate_set(cset, test_batches(data, pcfg.eval_k, seed, pcfg.eval_chunk), seed, head)
    return MethodRun(key, params, head, res, model.best_epoch if model else 0,
                     model.diverged if model else "", model.history if model else [])


def seed_data(pcfg, seed):
    return generate_mixed3d(replace(pcfg.sim, seed=seed))


def run_seed(seed, keys, pcfg):
    data = seed_data(pcfg, seed)
    cal = calibration_data(data, seed)
    return {k: run_method(data, k, pcfg, seed, cal) for k in keys}


def worker_count(requested=None):
    if requested:
        return max(1, int(requested))
    env = os.environ.get("CONFSETS_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def _tuned(fn, *args):
    from ._alloc import tune
    tune()
    return fn(*args)


def fan_out(fn, seeds, *args, workers=None):
    """``[fn(seed, *args) for seed in seeds]`` on a process pool, in seed order."""
    seeds = list(seeds)
    n = min(worker_count(workers), len(seeds)) if seeds else 1
    if n <= 1:
        return [fn(s, *args) for s in seeds]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futs = [pool.submit(_tuned, fn, s, *args) for s in seeds]
        return [f.result() for f in futs]


def _seed_results(seed, keys, pcfg):
    runs = run_seed(seed, keys, pcfg)
    return {k: (r.result, r.best_epoch, r.diverged) for k, r in runs.items()}


def run_table(seeds, keys=TABLE_METHODS, pcfg=PipelineConfig(), workers=None):
    """Per-method :class:`EvalReport` over seeds, plus divergence notes."""
    per = fan_out(_seed_results, seeds, tuple(keys), pcfg, workers=workers)
    digest = pcfg.digest()
    rows, notes = [], []
    for k in keys:
        rows.append((METHODS[k][0], ev.aggregate([p[k][0] for p in per], digest)))
        for s, p in zip(seeds, per):
            if p[k][2]:
                notes.append({"method": k, "seed": s, "message": p[k][2]})
    return rows, notes, per


# --------------------------------------------------------------------------
# out-of-distribution scoring
# --------------------------------------------------------------------------

def ood_seed(seed, key, pcfg, shift=10.0, subtract_positive=False, ood_seed_offset=1000):
    """Per-anchor scores on ID test anchors and on a translated, collapsed copy."""
    data = seed_data(pcfg, seed)
    cal = calibration_data(data, seed)
    params, head, _ = fit_method(data, key, pcfg, seed, cal)
    cset = calibrate(params, head.apply(cal.anchors), head.apply(cal.positives), pcfg.train.alpha)
    ood_cfg = translated(replace(pcfg.sim, seed=seed + ood_seed_offset), shift)
    ood = generate_mixed3d(ood_cfg)
    id_s = np.concatenate([ev.anchor_scores(cset, b, subtract_positive, head)
                           for b in test_batches(data, pcfg.eval_k, seed, pcfg.eval_chunk)])
    ood_s = np.concatenate([ev.anchor_scores(cset, b, subtract_positive, head)
                            for b in test_batches(ood, pcfg.eval_k, seed, pcfg.eval_chunk)])
    rep = ev.ood_report(id_s, ood_s)
    return {"seed": seed, "auroc": rep.auroc, "fpr95": rep.fpr95,
            "id_mean": float(id_s.mean()), "ood_mean": float(ood_s.mean())}


def run_ood(seeds, key="generalized-neg", pcfg=PipelineConfig(), shift=10.0, subtract_positive=False, workers=None):
    return fan_out(ood_seed, seeds, key, pcfg, shift, subtract_positive, workers=workers)


# --------------------------------------------------------------------------
# oracle bound with corrupted positives
# --------------------------------------------------------------------------

def corrupted_seed(seed, pi, key, pcfg):
    """Calibrate on positives that match the anchor class with probability ``pi``.

    Returns the inclusion rate of same-class test positives under that
    threshold, with one positive per test anchor so draws are independent.
    """
    from .simdata import corrupt_positive_labels

    data = seed_data(pcfg, seed)
    noisy = corrupt_positive_labels(data, pi, seed)
    cal = calibration_data(noisy, seed)
    params, head, _ = fit_method(noisy, key, pcfg, seed, cal)
    cset = calibrate(params, head.apply(cal.anchors), head.apply(cal.positives), pcfg.train.alpha)
    s = TripletSampler(data, "test", 1, seed, k_neg=0, purpose=P_TEST)
    b = s.full()
    inside = geo.diff_distances(params, b.mapped(head).pos_diffs()) <= cset.q_hat
    return {"seed": seed, "pi": pi, "inclusion": float(inside.mean()), "n": int(inside.size),
            "q_hat": cset.q_hat}


# --------------------------------------------------------------------------
# sensitivity sweeps
# --------------------------------------------------------------------------

def _sweep_seed(seed, key, pcfg):
    return run_seed(seed, (key,), pcfg)[key].result


def sweep_runner(key, pcfg, seeds, workers=None):
    """``runner(TrainConfig) -> EvalReport`` for :func:`evaluation.sweep`."""
    def runner(tcfg):
        p = replace(pcfg, train=tcfg)
        return ev.aggregate(fan_out(_sweep_seed, seeds, key, p, workers=workers), p.digest())
    return runner
