"""SGD training of set geometry under the exclusion / volume objectives.

The batch threshold ``q_hat`` is the conformal quantile of all positive
distances pooled over the batch and is held constant when differentiating.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import geometry as geo
from ._kernels import sigmoid
from .conformal import CalibrationError, conformal_quantile


class TrainingError(RuntimeError):
    pass


class Objective(str, Enum):
    NEG = "neg"
    VOL = "vol"
    NEGVOL = "negvol"
    NEGVOL_INFONCE = "negvol-infonce"

    @property
    def needs_negatives(self):
        return self is not Objective.VOL


@dataclass(frozen=True)
class TrainConfig:
    """Defaults are the simulated-data settings; see :meth:`embedding_defaults`."""

    objective: Objective = Objective.NEGVOL
    alpha: float = 0.05
    lam: float = 0.05
    lambda_infonce: float = 1.0
    tau: float = 0.1
    sigmoid_T: float = 7.0
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 256
    grad_clip: float = 1.0
    k: int = 200
    seed: int = 0
    lr_schedule: str = "constant"
    eval_anchors: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        if not 0.0 < self.alpha < 1.0:
            raise TrainingError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise TrainingError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.lambda_infonce < 0:
            raise TrainingError("lambda_infonce must be >= 0")
        for name in ("tau", "sigmoid_T", "lr", "batch_size", "grad_clip", "k", "eval_anchors"):
            if not getattr(self, name) > 0:
                raise TrainingError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise TrainingError("momentum, weight_decay and epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise TrainingError(f"unknown lr schedule {self.lr_schedule!r}")

    @classmethod
    def embedding_defaults(cls, **kw):
        base = dict(lr=0.1, momentum=0.9, weight_decay=5e-4, lr_schedule="cosine", sigmoid_T=7.0,
                    k=20, tau=0.1, lambda_infonce=1.0, epochs=30)
        if Objective(kw.get("objective", cls.objective)) is Objective.NEGVOL_INFONCE:
            base["epochs"] = 50
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["objective"] = self.objective.value
        return d

    def lr_at(self, epoch):
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr


@dataclass(frozen=True, eq=False)
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    pos_match: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=float)
        p = np.asarray(self.positives, dtype=float)
        n_ = self.negatives
        neg = np.zeros((a.shape[0], 0, a.shape[1] if a.ndim == 2 else 0)) if n_ is None else np.asarray(n_, dtype=float)
        if a.ndim != 2 or p.ndim != 3 or neg.ndim != 3:
            raise TrainingError("anchors must be (n, d); positives and negatives (n, k, d)")
        n, d = a.shape
        if p.shape[0] != n or neg.shape[0] != n or p.shape[2] != d or neg.shape[2] != d:
            raise TrainingError(f"inconsistent batch shapes {a.shape}, {p.shape}, {neg.shape}")
        if p.shape[1] < 1:
            raise TrainingError("need at least one positive per anchor")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "positives", p)
        object.__setattr__(self, "negatives", neg)

    @property
    def n(self):
        return self.anchors.shape[0]

    @property
    def d(self):
        return self.anchors.shape[1]

    @property
    def k_neg(self):
        return self.negatives.shape[1]

    def pos_diffs(self):
        return (self.anchors[:, None, :] - self.positives).reshape(-1, self.d)

    def neg_diffs(self):
        return (self.anchors[:, None, :] - self.negatives).reshape(-1, self.d)

    def mapped(self, head):
        if head is None or head.is_identity:
            return self
        W = head.W
        return TripletBatch(self.anchors @ W.T, self.positives @ W.T, self.negatives @ W.T, self.pos_match)


@dataclass(frozen=True, eq=False)
class ProjectionHead:
    W: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 2 or not np.all(np.isfinite(W)):
            raise TrainingError("projection head must be a finite matrix")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "_identity", W.shape[0] == W.shape[1] and np.array_equal(W, np.eye(W.shape[0])))

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d))

    @property
    def is_identity(self):
        return self._identity

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        return X if self._identity else X @ self.W.T


@dataclass(frozen=True, eq=False)
class Grads:
    metric: object
    head: np.ndarray = None


def sigmoid_surrogate(c, t, T):
    """``1 / (1 + exp(-T (c - t)))`` without overflow."""
    if not T > 0:
        raise TrainingError("sigmoid steepness T must be positive")
    return float(sigmoid(np.array([T * (float(c) - float(t))]))[0])


def init_params(method, d):
    """Starting geometry: the Euclidean ball for both learnable families."""
    if method == "single":
        return geo.SingleNorm.identity(d)
    if method == "generalized":
        return geo.Generalized.identity(d)
    raise TrainingError(f"no learnable metric called {method!r}")


def _finite(name, value):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss term: {name} = {value}")
    return value


def batch_q_hat(params, batch, alpha):
    """Pooled conformal quantile of positive distances.

    Falls back to the largest score when the batch is too small for the
    order-statistic index to exist.
    """
    d_pos = geo.diff_distances(params, batch.pos_diffs())
    q = conformal_quantile(d_pos, alpha)
    return float(d_pos.max()) if math.isinf(q) else q


def objective_and_grads(params, head, batch, cfg, q_hat=None, wrt_head=False):
    """Loss ``-J`` with gradients for the metric (and optionally the head).

    Returns ``(loss, Grads, q_hat)``. With ``wrt_head`` the metric gradient
    is still computed and the head gradient includes the InfoNCE term.
    """
    obj = cfg.objective
    w_neg = 0.0 if obj is Objective.VOL else (1.0 if obj is Objective.NEG else 1.0 - cfg.lam)
    w_vol = 1.0 if obj is Objective.VOL else (0.0 if obj is Objective.NEG else cfg.lam)
    if w_neg > 0 and batch.k_neg == 0:
        raise TrainingError(f"objective {obj.value!r} needs negative samples")
    mb = batch.mapped(head)
    if q_hat is None:
        q_hat = batch_q_hat(params, mb, cfg.alpha)
    q_hat = float(q_hat)

    loss = 0.0
    gvec = np.zeros_like(params.vector())
    g_head = None
    if wrt_head:
        g_head = np.zeros_like(head.W)
    if w_neg > 0:
        neg_raw = batch.neg_diffs()
        neg_d = neg_raw if (head is None or head.is_identity) else neg_raw @ head.W.T
        sig, rec, gdiff = geo.sigmoid_grad(params, neg_d, q_hat, cfg.sigmoid_T, need_gdiff=wrt_head)
        scale = w_neg / sig.size
        loss -= _finite("negative exclusion", w_neg * float(sig.mean()))
        gvec -= scale * rec.vector()
        if wrt_head:
            g_head -= scale * (gdiff.T @ neg_raw)
    if w_vol > 0:
        lv = _finite("log-volume", geo.log_volume(params, q_hat))
        loss += w_vol * lv
        gvec += w_vol * geo.log_volume_grad(params, q_hat).vector()
    if obj is Objective.NEGVOL_INFONCE and cfg.lambda_infonce > 0:
        l_nce, g_nce = infonce_loss_and_grads(head, batch, cfg.tau)
        loss += cfg.lambda_infonce * _finite("InfoNCE", l_nce)
        if wrt_head:
            g_head += cfg.lambda_infonce * g_nce
    return loss, Grads(params.with_vector(gvec), g_head), q_hat


def _unit(Y):
    n = np.linalg.norm(Y, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise TrainingError("zero-norm embedding after projection")
    return Y / n, n


def infonce_loss_and_grads(head, batch, tau):
    """Mean InfoNCE loss over anchors (first positive vs. all negatives) and dL/dW."""
    if batch.k_neg < 1:
        raise TrainingError("InfoNCE needs at least one negative per anchor")
    if not tau > 0:
        raise TrainingError("tau must be positive")
    W = head.W
    xa, xp, xn = batch.anchors, batch.positives[:, 0, :], batch.negatives
    ua, na = _unit(xa @ W.T)
    up, np_ = _unit(xp @ W.T)
    un, nn = _unit(xn @ W.T)
    s_pos = np.einsum("id,id->i", ua, up)
    s_neg = np.einsum("id,ikd->ik", ua, un)
    logits = np.concatenate([s_pos[:, None], s_neg], axis=1) / tau
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    loss = float(np.mean(lse - logits[:, 0]))

    n = batch.n
    prob = np.exp(logits - lse[:, None])
    c_pos = (prob[:, 0] - 1.0) / (tau * n)
    c_neg = prob[:, 1:] / (tau * n)
    # dL/d(unit vectors)
    g_ua = c_pos[:, None] * up + np.einsum("ik,ikd->id", c_neg, un)
    g_up = c_pos[:, None] * ua
    g_un = c_neg[:, :, None] * ua[:, None, :]

    def back(g, u, norm):
        # through y -> y / |y|
        return (g - u * np.sum(g * u, axis=-1, keepdims=True)) / norm

    gW = back(g_ua, ua, na).T @ xa + back(g_up, up, np_).T @ xp
    gy_n = back(g_un, un, nn)
    gW += gy_n.reshape(-1, gy_n.shape[-1]).T @ xn.reshape(-1, xn.shape[-1])
    return loss, gW


@dataclass
class TrainedModel:
    params: object
    head: ProjectionHead
    history: list = field(default_factory=list)
    best_epoch: int = 0
    config: TrainConfig = None
    selection: str = "exclusion"
    diverged: str = ""


def evaluate_batch(params, head, batch, alpha):
    """Exclusion rate and log-volume at the batch's own conformal threshold."""
    mb = batch.mapped(head)
    q = conformal_quantile(geo.diff_distances(params, mb.pos_diffs()), alpha)
    exc = float("nan")
    if mb.k_neg:
        exc = float(np.mean(geo.diff_distances(params, mb.neg_diffs()) > q))
    try:
        lv = geo.log_volume(params, q)
    except geo.DegenerateSetError:
        lv = math.inf
    return exc, lv, q


def clip_norm(g, max_norm):
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


class _Momentum:
    def __init__(self, size, cfg, decay_mask):
        self.buf = np.zeros(size)
        self.cfg = cfg
        self.mask = decay_mask

    def step(self, x, g, lr):
        cfg = self.cfg
        g = clip_norm(g, cfg.grad_clip)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * self.mask * x
        if cfg.momentum:
            self.buf = cfg.momentum * self.buf + g
            g = self.buf
        return x - lr * g


def train(source, cfg, method="generalized", params=None, head=None, positive_only=False,
          on_divergence="raise"):
    """Run SGD and return the checkpoint chosen on the training split.

    ``source`` must provide ``batches(epoch, batch_size)``, ``eval_batch(n)``
    and ``d``. Selection uses training exclusion, or training log-volume
    when ``positive_only`` is set (no negatives exist). The initial
    parameters count as epoch 0. With ``on_divergence="stop"`` a divergent
    epoch ends training and the best earlier checkpoint is returned; the
    failure is kept in ``model.diverged``.
    """
    if on_divergence not in ("raise", "stop"):
        raise ValueError(f"on_divergence must be 'raise' or 'stop', got {on_divergence!r}")
    d = source.d
    params = init_params(method, d) if params is None else params
    head = ProjectionHead.identity(d) if head is None else head
    if positive_only and cfg.objective.needs_negatives:
        raise TrainingError(f"objective {cfg.objective.value!r} needs negative samples")
    train_head = cfg.objective is Objective.NEGVOL_INFONCE and cfg.lambda_infonce > 0
    selection = "log_volume" if positive_only else "exclusion"
    model = TrainedModel(params, head, [], 0, cfg, selection)
    if cfg.epochs == 0:
        return model

    eval_b = source.eval_batch(cfg.eval_anchors)

    def score(p, h):
        exc, lv, q = evaluate_batch(p, h, eval_b, cfg.alpha)
        key = -lv if positive_only else exc
        return exc, lv, q, key

    exc, lv, q, best_key = score(params, head)
    model.history.append(dict(epoch=0, phase="init", lr=0.0, loss=float("nan"),
                              train_exclusion=exc, train_logvol=lv, train_q_hat=q))
    best = (params, head)
    opt_m = _Momentum(params.vector().size, cfg, params.decay_mask())
    opt_h = _Momentum(head.W.size, cfg, np.ones(head.W.size))

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        head_phase = train_head and epoch % 2 == 1
        losses = []
        try:
            for batch in source.batches(epoch, cfg.batch_size):
                loss, grads, _ = objective_and_grads(params, head, batch, cfg, wrt_head=head_phase)
                losses.append(loss)
                if head_phase:
                    W = opt_h.step(head.W.ravel(), grads.head.ravel(), lr)
                    head = ProjectionHead(W.reshape(head.W.shape))
                else:
                    params = params.with_vector(opt_m.step(params.vector(), grads.metric.vector(), lr))
                if not np.all(np.isfinite(params.vector())):
                    raise TrainingError("non-finite parameters")
            exc, lv, q, key = score(params, head)
        except (TrainingError, geo.GeometryError, CalibrationError, FloatingPointError) as e:
            err = TrainingError(f"training diverged at epoch {epoch + 1}: {e}")
            if on_divergence == "raise":
                raise err from e
            model.diverged = str(err)
            break
        model.history.append(dict(epoch=epoch + 1, phase="head" if head_phase else "metric", lr=lr,
                                  loss=float(np.mean(losses)) if losses else float("nan"),
                                  train_exclusion=exc, train_logvol=lv, train_q_hat=q))
        if key > best_key:
            best_key, best, model.best_epoch = key, (params, head), epoch + 1
    model.params, model.head = best
    return model
