"""Seeded two-view synthetic scenes with emulated pairwise and monocular predictions.

A camera pair looks at a smooth height-field. Ground truth comes from ray
casting; the "pairwise" prediction is ground truth plus Gaussian noise and a
large structured error on one contiguous patch (with low confidence there),
and the "monocular" prediction is the camera-frame ground truth with a smooth
depth warp and a random similarity applied. Feature maps are fixed functions
of these quantities so that learning a refinement is possible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import RigidPose, Sim3, axis_angle, rotation_about
from .pointmap import ConfidenceMap, ImageGrid, Pointmap, norm_factor
from .tensor import Tensor, bilinear_resize

__all__ = [
    "NoiseSpec",
    "SceneFixture",
    "make_scene",
    "make_scenes",
    "corrupt_pair",
    "corrupt_mono",
    "outlier_patch",
    "swap_views",
    "with_noise",
    "unproject",
    "pixel_rays",
    "CONF_BASE",
    "MONO_CHANNELS",
    "PAIR_CHANNELS",
]

MONO_CHANNELS = 64
PAIR_CHANNELS = 128
# raw confidence score on clean pixels; confidence is 1 + exp(raw)
CONF_BASE = 2.0
# raw score lost per scene unit of injected structured error
CONF_SLOPE = 30.0
SKY_COLOR = (0.55, 0.7, 0.9)
_FEATURE_SEED = 20240917

_TAG_GEOMETRY = 0
_TAG_PAIR_NOISE = 11
_TAG_PATCH = 12
_TAG_MONO = 21
_TAG_FEATURES = 31


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption magnitudes; every field is nonnegative."""

    pair_sigma: float = 0.004
    outlier_fraction: float = 0.2
    outlier_magnitude: float = 0.15
    mono_scale_log_sigma: float = 0.3
    mono_rot_deg: float = 10.0
    mono_trans: float = 0.3
    mono_warp: float = 0.015

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"NoiseSpec: {name} must be finite and nonnegative, got {value}")
        if self.outlier_fraction > 1:
            raise ValueError("NoiseSpec: outlier_fraction must be <= 1")

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def pure_sim3(cls) -> "NoiseSpec":
        """Noise-free pairwise maps; monocular maps only globally misaligned."""
        base = cls()
        return replace(cls.zero(), mono_scale_log_sigma=base.mono_scale_log_sigma,
                       mono_rot_deg=base.mono_rot_deg, mono_trans=base.mono_trans)


@dataclass(frozen=True)
class SceneFixture:
    seed: int
    height: int
    width: int
    images: tuple
    gt_world: tuple
    gt_local: tuple
    gt_depth: tuple
    poses: tuple
    focals: tuple
    pair: tuple
    conf: tuple
    mono: tuple
    feat_pair: tuple
    feat_mono: tuple
    noise: NoiseSpec
    swapped: bool = False


class _HeightField:
    def __init__(self, rng: np.random.Generator):
        self.d0 = rng.uniform(1.8, 2.2)
        k = 4
        self.amp = rng.uniform(-0.12, 0.12, k)
        self.sig = rng.uniform(0.25, 0.5, k)
        self.cx = rng.uniform(-0.9, 0.9, k)
        self.cy = rng.uniform(-0.9, 0.9, k)
        self.tilt = rng.uniform(-0.1, 0.1, 2)

    def height(self, X, Y):
        z = self.d0 + self.tilt[0] * X + self.tilt[1] * Y
        for a, s, cx, cy in zip(self.amp, self.sig, self.cx, self.cy):
            z = z + a * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))
        return z

    def gradient(self, X, Y):
        gx = np.full_like(X, self.tilt[0])
        gy = np.full_like(Y, self.tilt[1])
        for a, s, cx, cy in zip(self.amp, self.sig, self.cx, self.cy):
            e = a * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))
            gx = gx - e * (X - cx) / (s * s)
            gy = gy - e * (Y - cy) / (s * s)
        return gx, gy


def pixel_rays(h: int, w: int, focal: float) -> np.ndarray:
    """Camera-frame rays (x/z, y/z, 1) per pixel; pixel (i, j) sits at u=j, v=i."""
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([(u - (w - 1) / 2.0) / focal, (v - (h - 1) / 2.0) / focal, np.ones((h, w))], axis=-1)


def unproject(depth, focal: float, valid=None) -> np.ndarray:
    """Camera-frame points from a z-depth map (principal point at the image center)."""
    depth = np.asarray(depth, dtype=np.float64)
    pts = pixel_rays(*depth.shape, focal) * depth[..., None]
    if valid is not None:
        pts = np.where(np.asarray(valid)[..., None], pts, 0.0)
    return pts


def _look_at(center, target, roll_deg: float) -> np.ndarray:
    fwd = target - center
    fwd /= np.linalg.norm(fwd)
    x = np.cross(np.array([0.0, 1.0, 0.0]), fwd)
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd], axis=1)
    return R @ rotation_about("z", roll_deg)


def _cast(surface: _HeightField, pose: RigidPose, focal: float, h: int, w: int):
    """Ray cast the height-field; returns z-depth and a convergence mask."""
    rays = pixel_rays(h, w, focal)
    d = rays @ pose.R.T
    C = pose.t
    lam = (surface.d0 - C[2]) / d[..., 2]
    for _ in range(200):
        X = C[0] + lam * d[..., 0]
        Y = C[1] + lam * d[..., 1]
        new = (surface.height(X, Y) - C[2]) / d[..., 2]
        step = np.abs(new - lam).max()
        lam = new
        if step < 1e-15:
            break
    X = C[0] + lam * d[..., 0]
    Y = C[1] + lam * d[..., 1]
    resid = np.abs(C[2] + lam * d[..., 2] - surface.height(X, Y))
    ok = (resid < 1e-12) & (lam > 0.3) & (lam < 10.0)
    return lam, ok


def _render_image(surface: _HeightField, world: np.ndarray, valid: np.ndarray, rng) -> np.ndarray:
    X, Y = world[..., 0], world[..., 1]
    gx, gy = surface.gradient(X, Y)
    n = np.stack([gx, gy, -np.ones_like(gx)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    light = np.array([0.3, -0.5, -1.0])
    light /= np.linalg.norm(light)
    shade = 0.6 + 0.4 * np.clip(n @ light, 0.0, 1.0)
    k = rng.uniform(3.0, 9.0, (3, 2))
    ph = rng.uniform(0, 2 * np.pi, (3, 2))
    albedo = np.stack(
        [0.5 + 0.25 * np.sin(k[c, 0] * X + ph[c, 0]) + 0.15 * np.sin(k[c, 1] * Y + ph[c, 1]) for c in range(3)],
        axis=-1,
    )
    img = albedo * shade[..., None]
    img[~valid] = SKY_COLOR
    return np.clip(img, 0.0, 1.0)


def _geometry(seed: int, h: int, w: int) -> dict:
    rng = np.random.default_rng([seed, _TAG_GEOMETRY])
    surface = _HeightField(rng)
    focals = tuple(float((w / 2.0) / np.tan(np.deg2rad(rng.uniform(50.0, 65.0)) / 2.0)) for _ in range(2))
    phi = rng.uniform(0, 2 * np.pi)
    b = rng.uniform(0.25, 0.45)
    C2 = np.array([b * np.cos(phi), b * np.sin(phi), rng.uniform(-0.1, 0.1)])
    target = np.array([0.0, 0.0, surface.height(np.array(0.0), np.array(0.0))])
    poses = (RigidPose.identity(), RigidPose(_look_at(C2, target, rng.uniform(-5.0, 5.0)), C2))
    sky = [int(rng.integers(0, h // 8 + 1)) for _ in range(2)]

    depth, local, world, images = [], [], [], []
    for v in range(2):
        lam, ok = _cast(surface, poses[v], focals[v], h, w)
        ok[: sky[v]] = False
        dmap = np.where(ok, lam, 0.0)
        loc = unproject(dmap, focals[v], ok)
        wld = np.where(ok[..., None], poses[v].apply(loc), 0.0)
        depth.append(dmap)
        local.append(Pointmap(loc, ok))
        world.append(Pointmap(wld, ok))
        images.append(ImageGrid(_render_image(surface, wld, ok, rng)))
    return dict(
        images=tuple(images),
        gt_world=tuple(world),
        gt_local=tuple(local),
        gt_depth=tuple(depth),
        poses=poses,
        focals=focals,
    )


def outlier_patch(h: int, w: int, spec: NoiseSpec, seed: int, view: int, swapped: bool = False) -> np.ndarray:
    """Contiguous rectangle covering about ``outlier_fraction`` of the pixels."""
    mask = np.zeros((h, w), dtype=bool)
    if spec.outlier_fraction <= 0 or spec.outlier_magnitude <= 0:
        return mask
    rng = np.random.default_rng([seed, _TAG_PATCH, int(swapped), view])
    area = spec.outlier_fraction * h * w
    aspect = rng.uniform(0.6, 1.6)
    ph = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
    pw = int(np.clip(round(area / ph), 1, w))
    i0 = int(rng.integers(0, h - ph + 1))
    j0 = int(rng.integers(0, w - pw + 1))
    mask[i0 : i0 + ph, j0 : j0 + pw] = True
    return mask


def _structured_error(fx_world: Pointmap, center, patch, spec: NoiseSpec, rng) -> np.ndarray:
    """Depth-like error along viewing rays on the patch, smooth inside with a step at the border."""
    err = np.zeros(fx_world.points.shape)
    if not patch.any():
        return err
    rows, cols = np.nonzero(patch)
    i0, i1, j0, j1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    ii, jj = np.mgrid[i0:i1, j0:j1].astype(np.float64)
    py = (ii - i0 + 0.5) / (i1 - i0)
    px = (jj - j0 + 0.5) / (j1 - j0)
    profile = 0.5 + 0.5 * np.sin(np.pi * py) * np.sin(np.pi * px)
    mag = spec.outlier_magnitude * rng.uniform(0.7, 1.3) * rng.choice([-1.0, 1.0])
    ray = fx_world.points[i0:i1, j0:j1] - center
    ray /= np.maximum(np.linalg.norm(ray, axis=-1, keepdims=True), 1e-12)
    err[i0:i1, j0:j1] = mag * profile[..., None] * ray
    err[~fx_world.valid] = 0.0
    return err


def corrupt_pair(fixture: SceneFixture, spec: NoiseSpec) -> tuple:
    """Emulated pairwise predictions ``((P0_1, w0_1), (P0_2, w0_2))``.

    Confidence is ``1 + exp(CONF_BASE - CONF_SLOPE * |structured error|)``, so
    it is uniform without outliers and drops where the patch error is large.
    """
    out = []
    h, w = fixture.height, fixture.width
    for v in range(2):
        gt = fixture.gt_world[v]
        rng = np.random.default_rng([fixture.seed, _TAG_PAIR_NOISE, int(fixture.swapped), v])
        noise = rng.normal(0.0, 1.0, gt.points.shape) * spec.pair_sigma
        patch = outlier_patch(h, w, spec, fixture.seed, v, fixture.swapped)
        err = _structured_error(gt, fixture.poses[v].t, patch, spec, rng)
        P0 = Pointmap(np.where(gt.valid[..., None], gt.points + noise + err, 0.0), gt.valid)
        raw = CONF_BASE - CONF_SLOPE * np.linalg.norm(err, axis=-1)
        out.append((P0, ConfidenceMap(1.0 + np.exp(raw))))
    return tuple(out)


def _smooth_field(rng, h: int, w: int, n_terms: int = 3) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    g = np.zeros((h, w))
    for _ in range(n_terms):
        fu, fv = rng.uniform(0.3, 1.2, 2) * rng.choice([-1.0, 1.0], 2)
        g += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fu * u / w + fv * v / h) + rng.uniform(0, 2 * np.pi))
    return g / max(np.abs(g).max(), 1e-12)


def corrupt_mono(fixture: SceneFixture, spec: NoiseSpec) -> tuple:
    """Emulated monocular pointmaps: smooth depth warp, then a random similarity, per view."""
    out = []
    for v in range(2):
        loc = fixture.gt_local[v]
        rng = np.random.default_rng([fixture.seed, _TAG_MONO, int(fixture.swapped), v])
        warp = _smooth_field(rng, fixture.height, fixture.width)
        pts = loc.points * (1.0 + spec.mono_warp * warp)[..., None]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        tdir = rng.normal(size=3)
        tdir /= np.linalg.norm(tdir)
        T = Sim3(
            float(np.exp(rng.normal() * spec.mono_scale_log_sigma)),
            axis_angle(axis * np.deg2rad(spec.mono_rot_deg)),
            tdir * spec.mono_trans,
        )
        out.append(Pointmap(pts, loc.valid).transformed(T))
    return tuple(out)


def _grid_normals(points: np.ndarray) -> np.ndarray:
    du = np.gradient(points, axis=1)
    dv = np.gradient(points, axis=0)
    n = np.cross(du, dv)
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def _smooth_noise(rng, channels: int, h: int, w: int) -> np.ndarray:
    lo = rng.normal(size=(1, channels, max(h // 4, 1), max(w // 4, 1)))
    return bilinear_resize(Tensor(lo), h, w).data[0]


def _mix(base: np.ndarray, n_out: int, tag: int) -> np.ndarray:
    """Fixed random nonlinear mixing shared by every scene."""
    rng = np.random.default_rng([_FEATURE_SEED, tag])
    A = rng.normal(size=(n_out, base.shape[0])) / np.sqrt(base.shape[0])
    b = rng.normal(size=(n_out, 1, 1)) * 0.1
    return np.tanh(np.tensordot(A, base, axes=1) + b)


def _features(fixture: SceneFixture, pair) -> tuple[tuple, tuple]:
    h, w = fixture.height, fixture.width
    v_idx, u_idx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([u_idx / (w - 1) * 2 - 1, v_idx / (h - 1) * 2 - 1])
    feat_mono, feat_pair = [], []
    for v in range(2):
        rng = np.random.default_rng([fixture.seed, _TAG_FEATURES, int(fixture.swapped), v])
        loc = fixture.gt_local[v]
        valid = loc.valid
        depth = fixture.gt_depth[v]
        d = np.where(valid, depth / depth[valid].mean() - 1.0, 0.0)
        n = np.where(valid[..., None], _grid_normals(loc.points), 0.0).transpose(2, 0, 1)
        base = np.concatenate([d[None], n])
        n_noise = 8
        mixed = _mix(np.concatenate([base, base[:1] ** 2, coords]), MONO_CHANNELS - 4 - n_noise, 1)
        feat_mono.append(np.concatenate([base, mixed, _smooth_noise(rng, n_noise, h, w)])[None])

        P0, w0 = pair[v]
        p = P0.points / norm_factor(P0)
        c = np.log(np.maximum(w0.weights - 1.0, 1e-12)) / CONF_BASE
        pn = np.where(P0.valid[..., None], _grid_normals(P0.points), 0.0)
        base = np.concatenate([p.transpose(2, 0, 1), c[None], pn.transpose(2, 0, 1)])
        n_noise = 16
        mixed = _mix(np.concatenate([base, coords]), PAIR_CHANNELS - 7 - n_noise, 2)
        feat_pair.append(np.concatenate([base, mixed, _smooth_noise(rng, n_noise, h, w)])[None])
    return tuple(feat_pair), tuple(feat_mono)


def _assemble(seed: int, h: int, w: int, geo: dict, noise: NoiseSpec, swapped: bool) -> SceneFixture:
    empty = (None, None)
    fx = SceneFixture(seed=seed, height=h, width=w, pair=empty, conf=empty, mono=empty,
                      feat_pair=empty, feat_mono=empty, noise=noise, swapped=swapped, **geo)
    pair = corrupt_pair(fx, noise)
    mono = corrupt_mono(fx, noise)
    feat_pair, feat_mono = _features(fx, pair)
    return replace(
        fx,
        pair=tuple(p for p, _ in pair),
        conf=tuple(c for _, c in pair),
        mono=mono,
        feat_pair=feat_pair,
        feat_mono=feat_mono,
    )


def make_scene(seed: int, H: int = 32, W: int = 32, noise: NoiseSpec | None = None) -> SceneFixture:
    """Fully seeded two-view fixture; view 1 defines the world frame."""
    if H < 8 or W < 8:
        raise ValueError(f"make_scene: image must be at least 8×8, got {H}×{W}")
    return _assemble(int(seed), H, W, _geometry(int(seed), H, W), noise or NoiseSpec(), False)


def make_scenes(seeds, H: int = 32, W: int = 32, noise: NoiseSpec | None = None) -> list[SceneFixture]:
    return [make_scene(s, H, W, noise) for s in seeds]


def with_noise(fixture: SceneFixture, noise: NoiseSpec) -> SceneFixture:
    """Same geometry, corruptions redrawn with ``noise``."""
    geo = {k: getattr(fixture, k) for k in ("images", "gt_world", "gt_local", "gt_depth", "poses", "focals")}
    return _assemble(fixture.seed, fixture.height, fixture.width, geo, noise, fixture.swapped)


def swap_views(fixture: SceneFixture) -> SceneFixture:
    """The same scene seen as the pair (2, 1): view 2 becomes the reference frame.

    Corruptions are drawn independently of the original ordering.
    """
    to_ref = fixture.poses[1].inverse()
    order = (1, 0)
    world = tuple(
        Pointmap(np.where(fixture.gt_world[v].valid[..., None], to_ref.apply(fixture.gt_world[v].points), 0.0),
                 fixture.gt_world[v].valid)
        for v in order
    )
    geo = dict(
        images=tuple(fixture.images[v] for v in order),
        gt_world=world,
        gt_local=tuple(fixture.gt_local[v] for v in order),
        gt_depth=tuple(fixture.gt_depth[v] for v in order),
        poses=(RigidPose.identity(), to_ref),
        focals=tuple(fixture.focals[v] for v in order),
    )
    return _assemble(fixture.seed, fixture.height, fixture.width, geo, fixture.noise, not fixture.swapped)
