"""Pointmap, confidence and image grids, plus the monocular-to-pairwise alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Sim3, apply_sim3, umeyama
from .tensor import Tensor

__all__ = [
    "Pointmap",
    "ConfidenceMap",
    "ImageGrid",
    "mask_invalid",
    "norm_factor",
    "align_mono_to_pair",
    "rms_error",
    "mean_point_error",
]


@dataclass(frozen=True)
class Pointmap:
    """H×W grid of 3-d points with a validity mask; invalid pixels are exactly zero."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError(f"Pointmap: points must be H×W×3, got {pts.shape}")
        if valid.shape != pts.shape[:2]:
            raise ValueError(f"Pointmap: valid mask {valid.shape} does not match points {pts.shape[:2]}")
        if not np.isfinite(pts[valid]).all():
            raise ValueError("Pointmap: non-finite valid entries")
        pts[~valid] = 0.0
        pts.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_points(cls, points, valid=None) -> "Pointmap":
        points = np.asarray(points, dtype=np.float64)
        if valid is None:
            valid = np.isfinite(points).all(axis=2)
            points = np.where(valid[..., None], points, 0.0)
        return cls(points, valid)

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def to_tensor(self, requires_grad: bool = False) -> Tensor:
        """1×3×H×W tensor view of the points."""
        return Tensor(self.points.transpose(2, 0, 1)[None], requires_grad=requires_grad)

    @classmethod
    def from_tensor(cls, t, valid) -> "Pointmap":
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        return cls(data[0].transpose(1, 2, 0), valid)

    def transformed(self, T: Sim3) -> "Pointmap":
        return Pointmap(np.where(self.valid[..., None], apply_sim3(T, self.points), 0.0), self.valid)

    def scaled(self, k: float) -> "Pointmap":
        return Pointmap(self.points * k, self.valid)


@dataclass(frozen=True)
class ConfidenceMap:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"ConfidenceMap: weights must be H×W, got {w.shape}")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("ConfidenceMap: weights must be finite and nonnegative")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, h: int, w: int, value: float = 1.0) -> "ConfidenceMap":
        return cls(np.full((h, w), float(value)))

    def to_tensor(self) -> Tensor:
        return Tensor(self.weights[None, None])


@dataclass(frozen=True)
class ImageGrid:
    colors: np.ndarray

    def __post_init__(self):
        c = np.array(self.colors, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ValueError(f"ImageGrid: colors must be H×W×3, got {c.shape}")
        if not np.isfinite(c).all() or c.min() < 0.0 or c.max() > 1.0:
            raise ValueError("ImageGrid: colors must lie in [0, 1]")
        c.flags.writeable = False
        object.__setattr__(self, "colors", c)

    def to_tensor(self) -> Tensor:
        return Tensor(self.colors.transpose(2, 0, 1)[None])


def mask_invalid(pm: Pointmap, validity) -> Pointmap:
    """Zero the points outside ``validity`` and intersect the masks."""
    validity = np.asarray(validity, dtype=bool)
    if validity.shape != pm.shape:
        raise ValueError(f"mask_invalid: mask {validity.shape} does not match pointmap {pm.shape}")
    return Pointmap(pm.points, pm.valid & validity)


def norm_factor(pm: Pointmap) -> float:
    """Mean distance of the valid points to the origin."""
    if pm.n_valid == 0:
        raise ValueError("norm_factor: pointmap has no valid pixels")
    z = float(np.linalg.norm(pm.valid_points(), axis=1).mean())
    if z == 0.0:
        raise ValueError("norm_factor: all valid points are at the origin")
    return z


def align_mono_to_pair(mono: Pointmap, pair: Pointmap, conf: ConfidenceMap) -> tuple[Pointmap, Sim3]:
    """Fit one confidence-weighted similarity from the monocular map onto the pairwise map.

    Only pixels valid in both maps take part. Returns the transformed
    monocular map (its own invalid pixels stay zero) and the transform.
    """
    if mono.shape != pair.shape or conf.weights.shape != pair.shape:
        raise ValueError(
            f"align_mono_to_pair: shapes differ (mono {mono.shape}, pair {pair.shape}, conf {conf.weights.shape})"
        )
    joint = mono.valid & pair.valid & (conf.weights > 0)
    if joint.sum() < 3:
        raise ValueError(f"align_mono_to_pair: only {int(joint.sum())} jointly valid weighted pixels")
    T = umeyama(mono.points[joint], pair.points[joint], conf.weights[joint], mode="similarity")
    return mono.transformed(T), T


def rms_error(a: Pointmap, b: Pointmap, mask=None) -> float:
    """Root mean square coordinate difference over pixels valid in both maps."""
    m = a.valid & b.valid if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("rms_error: no jointly valid pixels")
    d = a.points[m] - b.points[m]
    return float(np.sqrt(np.mean(d * d)))


def mean_point_error(a: Pointmap, b: Pointmap, mask=None) -> float:
    """Mean Euclidean distance between corresponding valid points."""
    m = a.valid & b.valid if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("mean_point_error: no jointly valid pixels")
    return float(np.linalg.norm(a.points[m] - b.points[m], axis=1).mean())
