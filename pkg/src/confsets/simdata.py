"""Mixed 3D cluster benchmark and seeded triplet sampling.

Random streams come from ``numpy.random.default_rng([seed, purpose, ...])``
(PCG64 behind a SeedSequence), so each purpose gets an independent stream.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .training import TripletBatch

TRAIN, CAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "cal": CAL, "test": TEST}

# purpose tags for stream splitting
_GEN, _SPLIT, _ORDER, _POS, _NEG, _CORRUPT, _EVAL = 11, 12, 13, 14, 15, 16, 17


class SimDataError(ValueError):
    pass


def stream(seed, *purpose):
    return np.random.default_rng([int(seed), *map(int, purpose)])


@dataclass(frozen=True)
class SimConfig:
    n_classes: int = 5
    points_per_class: int = 5000
    circle_radius: float = 2.5
    stretch_low: float = 3.0
    stretch_high: float = 5.0
    banana_radius: float = 1.5
    noise_sigma: float = 1.0
    n_gaussian_classes: int = 2
    seed: int = 0
    z_amplitude: float = 0.5
    arc_extent: float = math.pi
    train_frac: float = 0.6
    cal_frac: float = 0.2
    offset: tuple = (0.0, 0.0, 0.0)
    collapse_centers: bool = False

    def __post_init__(self):
        if self.n_classes < 1 or self.points_per_class < 1:
            raise SimDataError("n_classes and points_per_class must be >= 1")
        if not 0 <= self.n_gaussian_classes <= self.n_classes:
            raise SimDataError("n_gaussian_classes must lie in [0, n_classes]")
        if self.circle_radius <= 0 or self.banana_radius <= 0 or self.noise_sigma <= 0:
            raise SimDataError("radii and noise sigma must be positive")
        if not 0 < self.stretch_low <= self.stretch_high:
            raise SimDataError("need 0 < stretch_low <= stretch_high")
        if not (0 < self.train_frac and 0 < self.cal_frac and self.train_frac + self.cal_frac < 1):
            raise SimDataError("split fractions must be positive and leave room for a test split")
        if len(self.offset) != 3:
            raise SimDataError("offset must have 3 components")

    def to_dict(self):
        d = asdict(self)
        d["offset"] = list(self.offset)
        return d


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    ids: tuple = ()
    positive_match: float = 1.0
    corrupt_seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or len(self.labels) != len(pts) or len(self.split) != len(pts):
            raise SimDataError("points, labels and split must have matching lengths")
        if not 0.0 < self.positive_match <= 1.0:
            raise SimDataError("positive match probability must lie in (0, 1]")
        ids = tuple(self.ids) if len(self.ids) else tuple(str(i) for i in range(len(pts)))
        if len(ids) != len(pts):
            raise SimDataError("ids must match the number of points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "split", np.asarray(self.split, dtype=np.int8))
        object.__setattr__(self, "ids", ids)

    @property
    def d(self):
        return self.points.shape[1]

    def indices(self, split):
        code = SPLIT_NAMES[split] if isinstance(split, str) else int(split)
        return np.flatnonzero(self.split == code)

    def subset(self, split):
        """Points and labels of one split as a standalone dataset."""
        idx = self.indices(split)
        return LabeledDataset(self.points[idx], self.labels[idx], self.split[idx],
                              tuple(self.ids[i] for i in idx), self.positive_match, self.corrupt_seed, dict(self.meta))


def _random_rotation(rng, d=3):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _centers(cfg):
    theta = 2.0 * np.pi * np.arange(cfg.n_classes) / cfg.n_classes
    c = np.stack([cfg.circle_radius * np.cos(theta), cfg.circle_radius * np.sin(theta),
                  cfg.z_amplitude * np.sin(theta)], axis=1)
    if cfg.collapse_centers:
        c[:] = 0.0
    return c + np.asarray(cfg.offset, dtype=float)


def _gaussian_class(rng, cfg, n):
    Q = _random_rotation(rng)
    cov = Q @ np.diag(rng.uniform(0.5, 1.5, 3)) @ Q.T
    axis = rng.integers(3)
    S = np.eye(3)
    S[axis, axis] = rng.uniform(cfg.stretch_low, cfg.stretch_high)
    cov = S @ cov @ S
    L = np.linalg.cholesky(cov)
    return rng.standard_normal((n, 3)) @ L.T


def _banana_class(rng, cfg, n):
    phi = rng.uniform(0.0, cfg.arc_extent, n)
    r = cfg.banana_radius
    arc = np.stack([r * np.cos(phi), r * np.sin(phi), np.zeros(n)], axis=1)
    arc -= arc.mean(axis=0)
    R = _random_rotation(rng)
    return arc @ R.T + cfg.noise_sigma * rng.standard_normal((n, 3))


def assign_splits(n, seed, train_frac=0.6, cal_frac=0.2):
    order = stream(seed, _SPLIT).permutation(n)
    n_train = int(round(train_frac * n))
    n_cal = int(round(cal_frac * n))
    split = np.full(n, TEST, dtype=np.int8)
    split[order[:n_train]] = TRAIN
    split[order[n_train:n_train + n_cal]] = CAL
    return split


def generate_mixed3d(cfg=SimConfig()):
    rng = stream(cfg.seed, _GEN)
    centers = _centers(cfg)
    n = cfg.points_per_class
    blocks = []
    for c in range(cfg.n_classes):
        make = _gaussian_class if c < cfg.n_gaussian_classes else _banana_class
        blocks.append(make(rng, cfg, n) + centers[c])
    points = np.concatenate(blocks)
    labels = np.repeat(np.arange(cfg.n_classes), n)
    split = assign_splits(len(points), cfg.seed, cfg.train_frac, cfg.cal_frac)
    ids = tuple(f"s{cfg.seed}-{i}" for i in range(len(points)))
    return LabeledDataset(points, labels, split, ids, meta={"sim_config": cfg.to_dict()})


def translated(cfg, shift=10.0, collapse=True):
    """Config for an out-of-distribution copy: centres collapsed and moved by ``shift``.

    With ``collapse=False`` only the offset changes, which leaves every
    within-dataset distance identical to the source data.
    """
    off = tuple(float(o) + (shift if i == 0 else 0.0) for i, o in enumerate(cfg.offset))
    return replace(cfg, offset=off, collapse_centers=collapse)


def corrupt_positive_labels(data, pi, seed=0):
    """Copy of ``data`` whose sampled positives match the anchor class with probability ``pi``."""
    if not 0.0 < pi <= 1.0:
        raise SimDataError(f"pi must lie in (0, 1], got {pi}")
    return replace(data, positive_match=float(pi), corrupt_seed=int(seed))


class TripletSampler:
    """Seeded per-epoch triplet sampling over the points of one split.

    Within each class a random cyclic order is drawn and the anchor at
    position ``r`` takes the next ``k`` members as positives, so positives
    are distinct, never the anchor itself, and marginally a uniform
    ``k``-subset. Negatives are consecutive windows of a shuffled pool of the
    other classes. Everything is vectorised per class.
    """

    def __init__(self, data, split, k, seed, k_neg=None, purpose=0):
        idx = data.indices(split) if split is not None else np.arange(len(data.labels))
        self.data = data
        self.points = np.ascontiguousarray(data.points[idx])
        self.labels = data.labels[idx]
        self.k = int(k)
        self.k_neg = self.k if k_neg is None else int(k_neg)
        self.seed = int(seed)
        self.purpose = int(purpose)
        if self.k < 1:
            raise SimDataError("k must be >= 1")
        self.classes = np.unique(self.labels)
        self.members = [np.flatnonzero(self.labels == c) for c in self.classes]
        for c, m in zip(self.classes, self.members):
            if m.size <= self.k:
                raise SimDataError(f"class {c} has {m.size} points in this split, need more than k={self.k}")
            if self.k_neg and len(self.labels) - m.size < self.k_neg:
                raise SimDataError(f"class {c}: only {len(self.labels) - m.size} negatives available for k={self.k_neg}")

    @property
    def n(self):
        return len(self.labels)

    @property
    def d(self):
        return self.points.shape[1]

    def indices(self, epoch, tag=0):
        """``(pos, neg, match)`` index arrays of shape ``(n, k)`` for one epoch."""
        n, k, kn = self.n, self.k, self.k_neg
        pos = np.empty((n, k), dtype=np.int64)
        neg = np.empty((n, kn), dtype=np.int64)
        rp = stream(self.seed, _POS, self.purpose, tag, epoch)
        rn = stream(self.seed, _NEG, self.purpose, tag, epoch)
        for mem in self.members:
            size = mem.size
            cyc = mem[rp.permutation(size)]
            r = np.arange(size)
            pos[cyc] = cyc[(r[:, None] + np.arange(1, k + 1)) % size]
            if kn:
                pool = np.setdiff1d(np.arange(n), mem, assume_unique=True)
                pool = pool[rn.permutation(pool.size)]
                neg[cyc] = pool[(r[:, None] * kn + np.arange(kn)) % pool.size]
        match = np.ones((n, k), dtype=bool)
        pi = self.data.positive_match
        if pi < 1.0:
            rc = stream(self.data.corrupt_seed, _CORRUPT, self.seed, self.purpose, tag, epoch)
            match = rc.random((n, k)) < pi
            if len(self.classes) < 2 and not match.all():
                raise SimDataError("label corruption needs at least two classes")
            for mem in self.members:
                others = np.setdiff1d(np.arange(n), mem, assume_unique=True)
                sub = ~match[mem]
                block = pos[mem]
                block[sub] = others[rc.integers(others.size, size=int(sub.sum()))]
                pos[mem] = block
        return pos, (neg if kn else neg[:, :0]), match

    def order(self, epoch):
        return stream(self.seed, _ORDER, self.purpose, epoch).permutation(self.n)

    def batch(self, anchors, pos, neg, match=None):
        X = self.points
        return TripletBatch(X[anchors], np.take(X, pos[anchors], axis=0), np.take(X, neg[anchors], axis=0),
                            None if match is None else match[anchors])

    def batches(self, epoch, batch_size):
        pos, neg, match = self.indices(epoch)
        order = self.order(epoch)
        for s in range(0, self.n, batch_size):
            yield self.batch(order[s:s + batch_size], pos, neg, match)

    def eval_batch(self, n_anchors):
        """Fixed anchor subset with its own sampled triplets, for checkpoint scoring."""
        pos, neg, match = self.indices(0, tag=1)
        a = stream(self.seed, _EVAL, self.purpose).permutation(self.n)[:n_anchors]
        return self.batch(np.sort(a), pos, neg, match)

    def full(self, epoch=0, anchors=None):
        """Every anchor (or the given subset) in one batch."""
        pos, neg, match = self.indices(epoch)
        a = np.arange(self.n) if anchors is None else np.asarray(anchors)
        return self.batch(a, pos, neg, match)


def sample_triplets(data, split, k, seed, batch_size=256, epoch=0, negatives=True):
    """Stream of :class:`TripletBatch` covering every anchor of ``split`` once."""
    sampler = TripletSampler(data, split, k, seed, k_neg=k if negatives else 0)
    yield from sampler.batches(epoch, batch_size)
