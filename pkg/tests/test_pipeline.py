import numpy as np
import pytest

from monoref.losses import LossConfig
from monoref.pipeline import (
    _clip_grads,
    TrainConfig,
    evaluate_scene,
    evaluate_scenes,
    lr_at,
    prepare_views,
    scene_loss,
    train_toy,
)
from monoref.refinement import RefineConfig, init_weights
from monoref.synth import NoiseSpec, make_scene, make_scenes
from monoref.tensor import Tensor

SMALL = RefineConfig(hidden=6, cond=6)


@pytest.fixture(scope="module")
def scenes():
    return make_scenes(range(8), 16, 16)


@pytest.fixture(scope="module")
def trained(scenes):
    return train_toy(scenes, TrainConfig(epochs=20, lr=3e-3, refine=SMALL))


def test_prepare_views(scenes):
    fx = scenes[0]
    views = prepare_views(fx)
    assert len(views) == 2
    for v, vi in enumerate(views):
        assert vi.P0.shape == (1, 3, 16, 16)
        # aligned prior, both feature maps, confidence and colour
        assert vi.cond.shape[1] == 3 + 64 + 128 + 1 + 3
        np.testing.assert_array_equal(vi.valid, fx.pair[v].valid)
        # the aligned prior sits closer to ground truth than the raw monocular map
        err = np.linalg.norm(vi.aligned_mono.points - fx.gt_world[v].points, axis=-1)[vi.valid].mean()
        raw = np.linalg.norm(fx.mono[v].points - fx.gt_world[v].points, axis=-1)[vi.valid].mean()
        assert err < raw


def test_untrained_weights_leave_pointmaps_unchanged(scenes):
    # the final decoder layer starts at zero, so refinement is the identity at init
    ev = evaluate_scene(scenes[1], init_weights(SMALL, seed=0), 3)
    assert ev.error_refined == ev.error_initial
    assert ev.maa_refined == ev.maa_initial
    assert ev.cloud_refined == ev.cloud_initial


def test_training_reduces_loss(trained):
    curve = trained.loss_curve
    assert len(curve) == 20 and all(np.isfinite(curve))
    assert curve[-1] < 0.8 * curve[0]


def test_trained_weights_improve_fixture(trained, scenes):
    for fx in scenes[:3]:
        ev = evaluate_scene(fx, trained.weights, SMALL.iters)
        assert ev.error_refined < ev.error_initial


def test_training_deterministic(scenes):
    cfg = TrainConfig(epochs=1, refine=SMALL, seed=3)
    a = train_toy(scenes[:2], cfg)
    b = train_toy(scenes[:2], cfg)
    assert a.loss_curve == b.loss_curve
    for (_, x), (_, y) in zip(a.weights.named(), b.weights.named()):
        np.testing.assert_array_equal(x.data, y.data)
    c = train_toy(scenes[:2], TrainConfig(epochs=1, refine=SMALL, seed=4))
    assert not np.array_equal(c.weights.enc.w1.data, a.weights.enc.w1.data)


def test_training_leaves_input_weights_alone(scenes):
    w0 = init_weights(SMALL, seed=1)
    before = [t.data.copy() for _, t in w0.named()]
    train_toy(scenes[:2], TrainConfig(epochs=1, refine=SMALL), w0)
    for b, (_, t) in zip(before, w0.named()):
        np.testing.assert_array_equal(b, t.data)


def test_plain_gradient_descent(scenes):
    res = train_toy(scenes[:2], TrainConfig(epochs=2, lr=1e-2, optimizer="gd", refine=SMALL))
    assert all(np.isfinite(res.loss_curve))
    with pytest.raises(ValueError):
        train_toy(scenes[:1], TrainConfig(epochs=1, optimizer="sgdx", refine=SMALL))


def test_scene_loss_zero_for_perfect_pair():
    fx = make_scene(5, 16, 16, NoiseSpec.zero())
    loss = scene_loss(fx, prepare_views(fx), init_weights(SMALL), 2, LossConfig())
    assert loss.item() == 0.0


def test_perfect_inputs_give_perfect_poses():
    fx = make_scene(6, 16, 16, NoiseSpec.zero())
    ev = evaluate_scene(fx, init_weights(SMALL), 2)
    assert ev.maa_initial == 1.0 and ev.maa_refined == 1.0
    assert ev.error_initial == 0.0
    assert ev.cloud_initial["acc_mean"] <= 1e-9


def test_eval_fields(trained, scenes):
    ev = evaluate_scene(scenes[2], trained.weights, 2)
    assert set(ev.pose_refined) == {f"{m}@{t}" for m in ("RRA", "RTA") for t in (5, 10, 15)}
    assert 0.0 <= ev.maa_refined <= 1.0
    outs, poses0, poses1 = ev.refined
    assert len(outs) == 2 and len(poses0) == len(poses1) == 2
    np.testing.assert_array_equal(poses0[0].R, np.eye(3))


def test_threaded_evaluation_matches_serial(trained, scenes):
    a = evaluate_scenes(scenes[:3], trained.weights, 2, threads=1)
    b = evaluate_scenes(scenes[:3], trained.weights, 2, threads=3)
    for x, y in zip(a, b):
        assert x.seed == y.seed
        assert x.error_refined == y.error_refined and x.maa_refined == y.maa_refined


def test_constant_schedule():
    cfg = TrainConfig(lr=0.01)
    assert [lr_at(cfg, k, 10) for k in range(10)] == [0.01] * 10


def test_onecycle_schedule_shape():
    cfg = TrainConfig(lr=1e-3, schedule="onecycle", warmup=0.1)
    lrs = [lr_at(cfg, k, 100) for k in range(100)]
    peak = int(np.argmax(lrs))
    assert peak == 9 and lrs[peak] == pytest.approx(1e-3)
    assert all(a < b for a, b in zip(lrs[:peak], lrs[1 : peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1 :]))
    assert 0.0 < lrs[-1] <= 1e-3 / 90
    assert lrs[0] == pytest.approx(1e-4)


def test_unknown_schedule(scenes):
    with pytest.raises(ValueError):
        train_toy(scenes[:1], TrainConfig(epochs=1, schedule="cosine", refine=SMALL))


def test_trainable_scope_freezes_other_groups(scenes):
    w0 = init_weights(SMALL, seed=2)
    res = train_toy(scenes[:2], TrainConfig(epochs=3, refine=SMALL, trainable=("gru", "dec")), w0)
    for (name, before), (_, after) in zip(w0.named(), res.weights.named()):
        changed = not np.array_equal(before.data, after.data)
        assert changed == name.startswith(("gru.", "dec.")), name


def test_trainable_scope_validation(scenes):
    with pytest.raises(ValueError):
        train_toy(scenes[:1], TrainConfig(epochs=1, refine=SMALL, trainable=()))
    with pytest.raises(ValueError):
        train_toy(scenes[:1], TrainConfig(epochs=1, refine=SMALL, trainable=("head",)))


def test_clip_grads_rescales_to_max_norm():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(3), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([0.0, 4.0, 0.0])
    assert _clip_grads([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0, 0, 0.8, 0], atol=1e-15)


@pytest.mark.parametrize("max_norm", [None, 10.0])
def test_clip_grads_leaves_small_or_disabled(max_norm):
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    _clip_grads([a, Tensor(np.zeros(1), requires_grad=True)], max_norm)
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])
