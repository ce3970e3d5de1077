import math
from dataclasses import replace

import numpy as np
import pytest

from confsets.geometry import Generalized, SingleNorm, diff_distances
from confsets.simdata import SimConfig, TripletSampler, generate_mixed3d
from confsets.training import (Objective, ProjectionHead, TrainConfig, TrainingError, TripletBatch, clip_norm,
                               infonce_loss_and_grads, objective_and_grads, sigmoid_surrogate, train)

from _oracles import central_diff, random_generalized, random_single, rel_err


def _batch(rng, n=8, d=3, k=2, scale=1.0):
    return TripletBatch(rng.normal(size=(n, d)), rng.normal(size=(n, k, d)) * scale,
                        rng.normal(size=(n, k, d)) * 2.0 * scale)


def test_sigmoid_examples():
    assert sigmoid_surrogate(3.0, 3.0, 0.1) == 0.5
    assert sigmoid_surrogate(3.0, 3.0, 70.0) == 0.5
    assert sigmoid_surrogate(1.0, 0.0, 7.0) == pytest.approx(1.0 / (1.0 + math.exp(-7.0)), rel=1e-15)
    assert sigmoid_surrogate(1.0, 0.0, 7.0) == pytest.approx(0.9990889, abs=5e-8)
    v = sigmoid_surrogate(-750.0, 0.0, 1.0)
    assert 0.0 < v <= 1e-300
    with pytest.raises(TrainingError):
        sigmoid_surrogate(0.0, 0.0, 0.0)


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.epochs, c.lr, c.batch_size, c.grad_clip, c.lam, c.k, c.alpha) == (30, 0.01, 256, 1.0, 0.05, 200, 0.05)
    e = TrainConfig.embedding_defaults()
    assert (e.lr, e.momentum, e.weight_decay, e.lr_schedule, e.sigmoid_T, e.k, e.tau, e.lambda_infonce) == \
        (0.1, 0.9, 5e-4, "cosine", 7.0, 20, 0.1, 1.0)
    assert TrainConfig.embedding_defaults(objective="negvol-infonce").epochs == 50
    for kw in (dict(lam=1.5), dict(alpha=0.0), dict(tau=0.0), dict(lr_schedule="step"), dict(epochs=-1)):
        with pytest.raises(TrainingError):
            TrainConfig(**kw)


def test_cosine_schedule():
    c = TrainConfig(lr=0.1, epochs=10, lr_schedule="cosine")
    assert c.lr_at(0) == pytest.approx(0.1)
    assert c.lr_at(5) == pytest.approx(0.05)
    assert TrainConfig(lr=0.1).lr_at(7) == 0.1


@pytest.mark.parametrize("objective", list(Objective))
@pytest.mark.parametrize("kind", ["single", "generalized"])
def test_objective_gradients_match_finite_differences(objective, kind, backend):
    rng = np.random.default_rng(hash((objective.value, kind)) % 2**32)
    for _ in range(5):
        P = random_single(rng, 3) if kind == "single" else random_generalized(rng, 3)
        head = ProjectionHead(np.eye(3) + 0.2 * rng.normal(size=(3, 3)))
        b = _batch(rng)
        # steepness chosen so the surrogate is not saturated; otherwise both
        # gradients sit below finite-difference round-off
        dn = diff_distances(P, b.mapped(head).neg_diffs())
        T = 1.0 / (np.std(dn) + 1e-3)
        cfg = TrainConfig(objective=objective, lam=0.3, sigmoid_T=T, lambda_infonce=0.8, tau=0.5)
        loss, g, q = objective_and_grads(P, head, b, cfg, wrt_head=True)
        f = lambda v: objective_and_grads(P.with_vector(v), head, b, cfg, q_hat=q)[0]
        assert rel_err(g.metric.vector(), central_diff(f, P.vector())) < 1e-4
        fh = lambda w: objective_and_grads(P, ProjectionHead(w.reshape(3, 3)), b, cfg, q_hat=q)[0]
        assert rel_err(g.head, central_diff(fh, head.W.ravel()).reshape(3, 3)) < 1e-4


def test_lambda_one_recovers_vol():
    rng = np.random.default_rng(1)
    P, b = random_generalized(rng, 3), _batch(rng)
    h = ProjectionHead.identity(3)
    l1, g1, _ = objective_and_grads(P, h, b, TrainConfig(objective="negvol", lam=1.0))
    l2, g2, _ = objective_and_grads(P, h, b, TrainConfig(objective="vol"))
    assert l1 == l2
    assert np.array_equal(g1.metric.vector(), g2.metric.vector())


def test_saturated_negatives_give_minus_one():
    rng = np.random.default_rng(2)
    b = TripletBatch(np.zeros((6, 2)), rng.normal(size=(6, 3, 2)) * 0.1, 1e3 + rng.normal(size=(6, 3, 2)))
    loss, _, _ = objective_and_grads(SingleNorm(np.eye(2), 2.0), None, b, TrainConfig(objective="neg"))
    assert loss == pytest.approx(-1.0, abs=1e-12)


def test_objective_batch_mismatch():
    b = TripletBatch(np.zeros((4, 2)), np.ones((4, 2, 2)), None)
    with pytest.raises(TrainingError, match="negative"):
        objective_and_grads(Generalized([1, 1], [2, 2]), None, b, TrainConfig(objective="neg"))
    objective_and_grads(Generalized([1, 1], [2, 2]), None, b, TrainConfig(objective="vol"))


def test_infonce_examples():
    rng = np.random.default_rng(3)
    k = 4
    a = rng.normal(size=(5, 3))
    same = np.repeat(a[:, None, :] * 2.0, k, axis=1)
    b = TripletBatch(a, a[:, None, :] * 3.0, same)
    loss, _ = infonce_loss_and_grads(ProjectionHead.identity(3), b, 0.1)
    assert loss == pytest.approx(math.log(k + 1), rel=1e-12)
    b2 = TripletBatch(np.array([[1.0, 0.0]]), np.array([[[1.0, 0.0]]]), np.array([[[-1.0, 0.0]]]))
    loss2, _ = infonce_loss_and_grads(ProjectionHead.identity(2), b2, 0.005)
    assert 0.0 <= loss2 < 1e-150


def test_infonce_gradient(rng):
    for _ in range(10):
        b = _batch(rng, n=6, d=4, k=3)
        W = np.eye(4) + 0.3 * rng.normal(size=(4, 4))
        tau = float(rng.uniform(0.2, 1.0))
        _, g = infonce_loss_and_grads(ProjectionHead(W), b, tau)
        fd = central_diff(lambda w: infonce_loss_and_grads(ProjectionHead(w.reshape(4, 4)), b, tau)[0], W.ravel())
        assert rel_err(g, fd.reshape(4, 4)) < 1e-4


def test_infonce_zero_norm():
    b = TripletBatch(np.zeros((2, 2)), np.ones((2, 1, 2)), np.ones((2, 1, 2)))
    with pytest.raises(TrainingError, match="zero-norm"):
        infonce_loss_and_grads(ProjectionHead.identity(2), b, 0.1)


def test_clip_norm(rng):
    for _ in range(50):
        g = rng.normal(size=7) * rng.uniform(0.01, 100)
        c = clip_norm(g, 1.0)
        if np.linalg.norm(g) > 1.0:
            assert np.linalg.norm(c) <= 1.0 + 1e-9
            np.testing.assert_allclose(c / np.linalg.norm(c), g / np.linalg.norm(g))
        else:
            assert c is g


@pytest.fixture(scope="module")
def tiny():
    return generate_mixed3d(SimConfig(points_per_class=120, seed=4))


def _sampler(data, k=10, k_neg=None, seed=0):
    return TripletSampler(data, "train", k, seed, k_neg=k_neg)


def test_zero_epochs_passthrough(tiny):
    P0 = Generalized([1.0, 2.0, 1.0], [2.0, 1.0, 3.0])
    m = train(_sampler(tiny), TrainConfig(epochs=0, k=10), params=P0)
    assert m.params is P0 and m.history == [] and m.best_epoch == 0


def test_training_is_deterministic(tiny):
    cfg = TrainConfig(objective="negvol", epochs=3, k=10, batch_size=64, lr=0.05, momentum=0.5, eval_anchors=200)
    a = train(_sampler(tiny), cfg, "single")
    b = train(_sampler(tiny), cfg, "single")
    assert np.array_equal(a.params.vector(), b.params.vector())
    assert a.history == b.history or all(
        (x == y) or (isinstance(x, float) and math.isnan(x) and math.isnan(y))
        for ra, rb in zip(a.history, b.history) for x, y in zip(ra.values(), rb.values()))


def test_vol_and_lambda_one_same_trajectory(tiny):
    base = dict(epochs=3, k=10, batch_size=64, lr=0.05, eval_anchors=200)
    a = train(_sampler(tiny, k_neg=0), TrainConfig(objective="vol", **base), "generalized", positive_only=True)
    s = _sampler(tiny)
    b = train(s, TrainConfig(objective="negvol", lam=1.0, **base), "generalized")
    # same positives are drawn whether or not negatives are sampled
    assert [r["train_logvol"] for r in a.history] == [r["train_logvol"] for r in b.history]


def test_head_isolation(tiny):
    cfg = TrainConfig(objective="negvol-infonce", lambda_infonce=0.0, epochs=2, k=10, batch_size=64, eval_anchors=200)
    m = train(_sampler(tiny), cfg, "generalized")
    assert m.head.is_identity and np.array_equal(m.head.W, np.eye(3))


def test_infonce_alternates_metric_first(tiny):
    cfg = TrainConfig(objective="negvol-infonce", epochs=4, k=10, batch_size=64, lr=0.05, eval_anchors=200)
    m = train(_sampler(tiny), cfg, "single")
    assert [r["phase"] for r in m.history] == ["init", "metric", "head", "metric", "head"]


def test_best_checkpoint_not_worse_than_init(tiny):
    cfg = TrainConfig(objective="neg", epochs=4, k=10, batch_size=64, lr=0.05, eval_anchors=300)
    m = train(_sampler(tiny), cfg, "single")
    exc = {r["epoch"]: r["train_exclusion"] for r in m.history}
    assert exc[m.best_epoch] >= exc[0]
    assert exc[m.best_epoch] == max(exc.values())


def test_positive_only_selects_lowest_log_volume(tiny):
    cfg = TrainConfig(objective="vol", epochs=4, k=10, batch_size=64, lr=0.05, eval_anchors=300)
    m = train(_sampler(tiny, k_neg=0), cfg, "single", positive_only=True)
    lv = {r["epoch"]: r["train_logvol"] for r in m.history}
    assert m.selection == "log_volume" and lv[m.best_epoch] == min(lv.values())
    with pytest.raises(TrainingError):
        train(_sampler(tiny, k_neg=0), replace(cfg, objective=Objective.NEG), "single", positive_only=True)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(tiny):
    cfg = TrainConfig(objective="vol", epochs=3, k=10, batch_size=64, lr=1e300, grad_clip=1e300, eval_anchors=200)
    with pytest.raises(TrainingError, match=r"epoch \d+"):
        train(_sampler(tiny, k_neg=0), cfg, "single", positive_only=True)
    m = train(_sampler(tiny, k_neg=0), cfg, "single", positive_only=True, on_divergence="stop")
    assert "epoch" in m.diverged


def test_weight_decay_skips_exponents(tiny):
    cfg = TrainConfig(objective="neg", epochs=1, k=10, batch_size=64, lr=1e-12, weight_decay=1e6, eval_anchors=200)
    P0 = Generalized([1.0, 1.0, 1.0], [2.0, 2.0, 2.0])
    from confsets.training import _Momentum
    opt = _Momentum(6, cfg, P0.decay_mask())
    x = opt.step(P0.vector(), np.zeros(6), 1.0)
    assert np.array_equal(x[3:], P0.p) and np.all(x[:3] < 1.0)
