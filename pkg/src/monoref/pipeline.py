"""End-to-end use of the refinement module on synthetic fixtures: inputs, training, evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import RigidPose, recover_relative_pose
from .losses import LossConfig, loss_refine
from .metrics import cloud_accuracy_completeness, maa30, pose_accuracy
from .pointmap import Pointmap, align_mono_to_pair, mean_point_error
from .refinement import PARAM_GROUPS, RefineConfig, RefineWeights, condition_input, init_weights, refine_tensors
from .synth import SceneFixture, swap_views
from .tensor import Tensor

__all__ = [
    "ViewInputs",
    "prepare_views",
    "refine_scene",
    "scene_loss",
    "TrainConfig",
    "TrainResult",
    "lr_at",
    "train_toy",
    "SceneEval",
    "evaluate_scene",
    "evaluate_scenes",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViewInputs:
    """Everything the refinement loop needs for one view, as constant tensors."""

    P0: Tensor
    valid: np.ndarray
    cond: Tensor
    F_mono: Tensor
    aligned_mono: Pointmap


def prepare_views(fx: SceneFixture) -> tuple[ViewInputs, ViewInputs]:
    """Align each monocular map to its pairwise map and stack the condition input."""
    out = []
    for v in range(2):
        M, _ = align_mono_to_pair(fx.mono[v], fx.pair[v], fx.conf[v])
        cond = condition_input(M, fx.feat_mono[v], fx.feat_pair[v], fx.conf[v], fx.images[v])
        out.append(ViewInputs(fx.pair[v].to_tensor(), fx.pair[v].valid, cond, Tensor(fx.feat_mono[v]), M))
    return tuple(out)


def refine_scene(views, weights: RefineWeights, iters: int) -> list[list[Tensor]]:
    return [refine_tensors(vi.P0, vi.valid, vi.cond, vi.F_mono, weights, iters) for vi in views]


def scene_loss(fx: SceneFixture, views, weights: RefineWeights, iters: int, loss_cfg: LossConfig) -> Tensor:
    return loss_refine(refine_scene(views, weights, iters), fx.gt_world, loss_cfg)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    batch: int = 2
    seed: int = 0
    optimizer: str = "adam"
    schedule: str = "constant"
    warmup: float = 0.05
    trainable: tuple = PARAM_GROUPS
    clip: float | None = 1.0
    refine: RefineConfig = field(default_factory=RefineConfig)
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass
class TrainResult:
    weights: RefineWeights
    loss_curve: list[float]


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Step size for 0-based ``step`` of ``total``.

    "onecycle" ramps linearly from zero to ``lr`` over the first ``warmup``
    fraction of steps, then decays linearly back towards zero.
    """
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "onecycle":
        peak = max(1, int(round(cfg.warmup * total)))
        if step < peak:
            return cfg.lr * (step + 1) / peak
        return cfg.lr * max(total - step, 1) / max(total - peak + 1, 1)
    raise ValueError(f"train: unknown schedule {cfg.schedule!r}")


def _make_step(cfg: TrainConfig, params: list[Tensor], total: int):
    count = [0]
    if cfg.optimizer == "gd":
        def step():
            lr = lr_at(cfg, count[0], total)
            count[0] += 1
            for p in params:
                if p.grad is not None:
                    p.data = np.asarray(p.data - lr * p.grad)
        return step
    if cfg.optimizer == "adam":
        m = [np.zeros(p.shape) for p in params]
        v = [np.zeros(p.shape) for p in params]
        b1, b2 = 0.9, 0.999

        def step():
            lr = lr_at(cfg, count[0], total)
            count[0] += 1
            c1 = 1 - b1 ** count[0]
            c2 = 1 - b2 ** count[0]
            for k, p in enumerate(params):
                if p.grad is None:
                    continue
                m[k] = b1 * m[k] + (1 - b1) * p.grad
                v[k] = b2 * v[k] + (1 - b2) * p.grad * p.grad
                p.data = np.asarray(p.data - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + 1e-8))
        return step
    raise ValueError(f"train: unknown optimizer {cfg.optimizer!r}")


def _clip_grads(params: list[Tensor], max_norm: float | None) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if max_norm and norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def train_toy(fixtures: list[SceneFixture], cfg: TrainConfig, weights: RefineWeights | None = None) -> TrainResult:
    """Minibatch training of the refinement weights on the refinement loss.

    ``optimizer`` is "adam" or "gd" (plain descent); ``schedule`` sets the
    step size per update (see :func:`lr_at`). Only the parameter groups named
    in ``trainable`` are updated, the rest keep their initial values. Gradients
    are clipped to global norm ``clip`` before each update (None disables). One loss
    value per epoch (mean over scenes) is recorded.
    """
    if not cfg.trainable:
        raise ValueError("train: no parameter groups to train")
    rng = np.random.default_rng([cfg.seed, 7])
    weights = (weights or init_weights(cfg.refine, seed=cfg.seed)).trainable(cfg.trainable)
    prepared = [prepare_views(fx) for fx in fixtures]
    params = [t for _, t in weights.named() if t.requires_grad]
    step = _make_step(cfg, params, cfg.epochs * -(-len(fixtures) // cfg.batch))
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(fixtures))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch):
            batch = order[start : start + cfg.batch]
            for p in params:
                p.zero_grad()
            for k in batch:
                loss = scene_loss(fixtures[k], prepared[k], weights, cfg.refine.iters, cfg.loss)
                T.backward(T.div(loss, float(len(batch))))
                epoch_loss += loss.item()
            _clip_grads(params, cfg.clip)
            step()
        curve.append(epoch_loss / len(fixtures))
        log.info("epoch %d loss %.6f", epoch, curve[-1])
    return TrainResult(weights.frozen(), curve)


@dataclass
class SceneEval:
    seed: int
    error_initial: float
    error_refined: float
    pose_initial: dict
    pose_refined: dict
    maa_initial: float
    maa_refined: float
    cloud_initial: dict
    cloud_refined: dict
    refined: tuple = ()


def _scene_pose(world_2: Pointmap, local_2: Pointmap, conf) -> list[RigidPose]:
    return [RigidPose.identity(), recover_relative_pose(world_2.points, local_2.points, conf, world_2.valid & local_2.valid)]


def _cloud(pms, gts):
    pred = np.concatenate([p.points[p.valid & g.valid] for p, g in zip(pms, gts)])
    gt = np.concatenate([g.points[p.valid & g.valid] for p, g in zip(pms, gts)])
    return cloud_accuracy_completeness(pred, gt, prealign=True).as_dict()


def evaluate_scene(fx: SceneFixture, weights: RefineWeights, iters: int) -> SceneEval:
    """Pointmap error, relative pose and cloud metrics before and after refinement.

    The pose of view 2 comes from registering its own-frame pointmap (the
    reference view of the swapped pair) onto its pointmap in the view-1 frame.
    """
    weights = weights.frozen()
    sw = swap_views(fx)
    outs, outs_sw = [], []
    for fixture, sink in ((fx, outs), (sw, outs_sw)):
        views = prepare_views(fixture)
        for vi, it in zip(views, refine_scene(views, weights, iters)):
            sink.append(Pointmap.from_tensor(it[-1], vi.valid))
    gts = fx.gt_world
    err0 = float(np.mean([mean_point_error(fx.pair[v], gts[v]) for v in range(2)]))
    err1 = float(np.mean([mean_point_error(outs[v], gts[v]) for v in range(2)]))
    conf = fx.conf[1].weights * sw.conf[0].weights
    poses0 = _scene_pose(fx.pair[1], sw.pair[0], conf)
    poses1 = _scene_pose(outs[1], outs_sw[0], conf)
    return SceneEval(
        seed=fx.seed,
        error_initial=err0,
        error_refined=err1,
        pose_initial=pose_accuracy(poses0, list(fx.poses)),
        pose_refined=pose_accuracy(poses1, list(fx.poses)),
        maa_initial=maa30(poses0, list(fx.poses)),
        maa_refined=maa30(poses1, list(fx.poses)),
        cloud_initial=_cloud(fx.pair, gts),
        cloud_refined=_cloud(outs, gts),
        refined=(tuple(outs), poses0, poses1),
    )


def evaluate_scenes(fixtures, weights: RefineWeights, iters: int, threads: int = 1) -> list[SceneEval]:
    """Evaluate scenes, optionally in a thread pool; results keep fixture order."""
    weights = weights.frozen()
    if threads <= 1:
        return [evaluate_scene(fx, weights, iters) for fx in fixtures]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda fx: evaluate_scene(fx, weights, iters), fixtures))
