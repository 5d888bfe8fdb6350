"""Fast oracle checks run by ``monoref selftest``.

Each check compares a library routine against an independent slow
implementation or a known closed form and reports pass/fail with a detail
string. The whole suite runs in a few seconds.
"""

from __future__ import annotations

import itertools
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import RigidPose, Sim3, apply_sim3, random_rotation, umeyama, weighted_sim3_objective
from .io import decode_container, encode_container
from .losses import iteration_weights
from .metrics import MAA_THRESHOLDS, maa30, nearest_distances, relative_pose_errors
from .pointmap import align_mono_to_pair, rms_error
from .refinement import GruWeights, gru_step
from .synth import NoiseSpec, make_scene
from .tensor import Tensor

__all__ = ["CheckResult", "CHECKS", "run_selftest"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _conv_loops(x, k, pad):
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((n, co, ho, wo))
    for b, o, i, j, ci, di, dj in itertools.product(
        range(n), range(co), range(ho), range(wo), range(c), range(kh), range(kw)
    ):
        out[b, o, i, j] += xp[b, ci, i + di, j + dj] * k[o, ci, di, dj]
    return out


def check_conv2d():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    err = np.abs(T.conv2d(Tensor(x), Tensor(k), pad=1).data - _conv_loops(x, k, 1)).max()
    return err <= 1e-12, f"max abs diff {err:.2e}"


def check_bilinear():
    x = Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
    got = T.bilinear_resize(x, 3, 3).data[0, 0]
    want = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    return np.array_equal(got, want), f"max abs diff {np.abs(got - want).max():.2e}"


def _sq(t):
    return T.mul(t, t)


def check_gradients():
    rng = np.random.default_rng(2)
    worst = 0.0
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 3, 3)))
    funcs = [
        lambda t: T.tsum(T.mul(T.tanh(t), T.sigmoid(t))),
        lambda t: T.tsum(_sq(T.conv2d(t, k, pad=1))),
        lambda t: T.tsum(_sq(T.bilinear_resize(t, 7, 5))),
        lambda t: T.tsum(T.channel_norm(t)),
        lambda t: T.tsum(T.log(T.add(T.exp(t), 1.0))),
    ]
    for f in funcs:
        worst = max(worst, T.grad_check(f, x))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def check_umeyama():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        src = rng.normal(size=(30, 3))
        true = Sim3(float(np.exp(rng.normal())), random_rotation(rng), rng.normal(size=3))
        est = umeyama(src, apply_sim3(true, src))
        worst = max(worst, weighted_sim3_objective(est, src, apply_sim3(true, src)))
    return worst <= 1e-9, f"max residual {worst:.2e}"


def check_alignment():
    fx = make_scene(5, 16, 16, NoiseSpec.pure_sim3())
    worst = 0.0
    for v in range(2):
        aligned, _ = align_mono_to_pair(fx.mono[v], fx.pair[v], fx.conf[v])
        worst = max(worst, rms_error(aligned, fx.pair[v]))
    return worst <= 1e-9, f"post-alignment RMS {worst:.2e}"


def check_gru_bounds():
    rng = np.random.default_rng(4)
    c, ci = 3, 2

    def w(*shape):
        return Tensor(rng.normal(scale=3.0, size=shape))

    wts = GruWeights(w(c, c + ci, 3, 3), w(c, c + ci, 3, 3), w(c, c + ci, 3, 3), w(c), w(c), w(c))
    ok = True
    for _ in range(50):
        h = Tensor(np.tanh(rng.normal(scale=3.0, size=(1, c, 5, 5))))
        x = Tensor(rng.normal(scale=5.0, size=(1, ci, 5, 5)))
        h2, (z, r, _) = gru_step(h, x, wts, return_gates=True)
        ok &= bool(np.all(np.abs(h2.data) < 1))
        ok &= bool(np.all((z.data > 0) & (z.data < 1) & (r.data > 0) & (r.data < 1)))
    return ok, "state in (-1, 1), gates in (0, 1)"


def check_iteration_weights():
    got = iteration_weights(2, 0.9)
    return got == [0.9, 1.0], f"weights {got}"


def _maa_oracle(pred, gt):
    e = relative_pose_errors(pred, gt)
    total = 0
    for tau in MAA_THRESHOLDS:
        for a, b in zip(e.rotation_deg, e.translation_deg):
            total += int(a < tau and b < tau)
    return total / (len(MAA_THRESHOLDS) * len(e))


def check_maa():
    rng = np.random.default_rng(6)
    ok = True
    for _ in range(10):
        gt = [RigidPose(random_rotation(rng), rng.normal(size=3)) for _ in range(4)]
        pred = [RigidPose(random_rotation(rng), rng.normal(size=3)) for _ in range(4)]
        ok &= maa30(pred, gt) == _maa_oracle(pred, gt)
    ok &= maa30(gt, gt) == 1.0
    return ok, "matches enumeration"


def check_kdtree():
    rng = np.random.default_rng(7)
    q, r = rng.normal(size=(80, 3)), rng.normal(size=(90, 3))
    d = q[:, None, :] - r[None, :, :]
    brute = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]).min(axis=1)
    same = np.array_equal(nearest_distances(q, r), brute)
    return same, "exact match with brute force"


def check_container():
    rng = np.random.default_rng(8)
    recs = {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=5).astype(np.float32),
        "c": rng.integers(0, 256, size=(2, 2, 2)).astype(np.uint8),
    }
    back = decode_container(encode_container(recs))
    ok = all(back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes() for k, v in recs.items())
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "x.pmz"
        p.write_bytes(encode_container(recs))
        ok &= p.read_bytes() == encode_container(decode_container(p.read_bytes()))
    return ok, "bitwise round trip"


CHECKS = {
    "conv2d-vs-loops": check_conv2d,
    "bilinear-example": check_bilinear,
    "gradient-check": check_gradients,
    "umeyama-recovery": check_umeyama,
    "mono-alignment": check_alignment,
    "gru-bounds": check_gru_bounds,
    "iteration-weights": check_iteration_weights,
    "maa30-oracle": check_maa,
    "kdtree-vs-brute": check_kdtree,
    "container-roundtrip": check_container,
}


def run_selftest() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
