"""Rotations, similarity transforms and pose recovery from pointmaps.

Similarity transforms use the canonical order ``p' = s * R @ p + t``. The
form ``s * (R @ p + t_alt)`` describes the same map with ``t_alt = t / s``;
see :meth:`Sim3.shift_inside_scale`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateError",
    "Sim3",
    "RigidPose",
    "rotation_about",
    "axis_angle",
    "random_rotation",
    "umeyama",
    "weighted_sim3_objective",
    "apply_sim3",
    "sim3_compose",
    "sim3_inverse",
    "rotation_geodesic_deg",
    "translation_angle_deg",
    "recover_focal",
    "recover_relative_pose",
]

_ORTHO_TOL = 1e-9
_RANK_TOL = 1e-12


class DegenerateError(ValueError):
    """Point configuration does not determine a unique transform."""


def _check_rotation(R: np.ndarray, what: str) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"{what}: rotation must be 3×3, got {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
        raise ValueError(f"{what}: matrix is not in SO(3)")
    return R


@dataclass(frozen=True)
class Sim3:
    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.s) and self.s > 0):
            raise ValueError(f"Sim3: scale must be positive, got {self.s}")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "R", _check_rotation(self.R, "Sim3"))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.s * self.R
        m[:3, 3] = self.t
        return m

    def shift_inside_scale(self) -> np.ndarray:
        """Translation for the ``s * (R p + t')`` parameterization."""
        return self.t / self.s

    def __call__(self, pts) -> np.ndarray:
        return apply_sim3(self, pts)


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world rotation and translation."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _check_rotation(self.R, "RigidPose"))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidPose":
        return RigidPose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.t

    def as_sim3(self) -> Sim3:
        return Sim3(1.0, self.R, self.t)


def rotation_about(axis, angle_deg: float) -> np.ndarray:
    """Rotation by ``angle_deg`` about ``axis`` ('x', 'y', 'z' or a 3-vector)."""
    if isinstance(axis, str):
        axis = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}[axis]
    axis = np.asarray(axis, dtype=np.float64)
    return axis_angle(axis / np.linalg.norm(axis) * np.deg2rad(angle_deg))


def axis_angle(rotvec) -> np.ndarray:
    """Rodrigues formula; ``rotvec`` is axis times angle in radians."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec)
    if theta < 1e-300:
        return np.eye(3)
    k = rotvec / theta
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def umeyama(src, dst, weights=None, mode: str = "similarity") -> Sim3:
    """Weighted least-squares similarity (or rigid) transform taking ``src`` onto ``dst``.

    Minimizes ``sum_k w_k ||s R src_k + t - dst_k||^2`` in closed form from the
    weighted centroids and cross-covariance. ``mode='rigid'`` fixes ``s = 1``.

    Raises
    ------
    DegenerateError
        If fewer than two independent directions are present in the weighted
        cross-covariance (e.g. all weighted points collinear) or the total
        weight is zero.
    ValueError
        On mismatched lengths, fewer than 3 points, or a negative weight.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"umeyama: {len(src)} source points but {len(dst)} target points")
    if len(src) < 3:
        raise ValueError(f"umeyama: need at least 3 point pairs, got {len(src)}")
    if mode not in ("similarity", "rigid"):
        raise ValueError(f"umeyama: unknown mode {mode!r}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (len(src),):
        raise ValueError(f"umeyama: {len(w)} weights for {len(src)} points")
    if (w < 0).any():
        raise ValueError("umeyama: negative weight")
    total = w.sum()
    if not total > 0:
        raise DegenerateError("umeyama: total weight is zero")
    w = w / total

    mu_src = w @ src
    mu_dst = w @ dst
    xs = src - mu_src
    xd = dst - mu_dst
    cov = (xd * w[:, None]).T @ xs
    U, D, Vt = np.linalg.svd(cov)
    if D[1] < _RANK_TOL * D[0] or D[0] == 0.0:
        raise DegenerateError(
            f"umeyama: weighted cross-covariance has rank < 2 "
            f"(singular values {D[0]:.3e}, {D[1]:.3e}, {D[2]:.3e})"
        )
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    if mode == "similarity":
        var_src = w @ (xs * xs).sum(axis=1)
        s = float((D * S).sum() / var_src)
    else:
        s = 1.0
    t = mu_dst - s * R @ mu_src
    return Sim3(s, R, t)


def weighted_sim3_objective(T: Sim3, src, dst, weights=None) -> float:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    r = apply_sim3(T, src) - dst
    return float(w @ (r * r).sum(axis=1))


def apply_sim3(T: Sim3, pts) -> np.ndarray:
    """Map points (…×3) through ``p -> s R p + t``."""
    pts = np.asarray(pts, dtype=np.float64)
    return T.s * (pts @ T.R.T) + T.t


def sim3_compose(A: Sim3, B: Sim3) -> Sim3:
    """Transform applying ``B`` first, then ``A``."""
    return Sim3(A.s * B.s, A.R @ B.R, A.s * (A.R @ B.t) + A.t)


def sim3_inverse(T: Sim3) -> Sim3:
    Rinv = T.R.T
    return Sim3(1.0 / T.s, Rinv, -(Rinv @ T.t) / T.s)


def rotation_geodesic_deg(R1, R2) -> float:
    """Angle of R1^T R2, i.e. arccos((trace - 1) / 2), in degrees within [0, 180].

    Evaluated through the half angle so small angles keep full precision.
    """
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    half_sin = np.linalg.norm(R1 - R2) / (2.0 * np.sqrt(2.0))
    half_cos = np.sqrt(max((np.trace(R1.T @ R2) + 1.0) / 4.0, 0.0))
    return float(np.clip(np.degrees(2.0 * np.arctan2(half_sin, half_cos)), 0.0, 180.0))


def translation_angle_deg(t1, t2, eps: float = 1e-9) -> float:
    """Angle between translation directions.

    A near-zero vector has no direction: two of them agree (0°), one against a
    proper direction is counted as fully wrong (180°).
    """
    t1 = np.asarray(t1, dtype=np.float64).reshape(3)
    t2 = np.asarray(t2, dtype=np.float64).reshape(3)
    n1, n2 = np.linalg.norm(t1), np.linalg.norm(t2)
    if n1 < eps and n2 < eps:
        return 0.0
    if n1 < eps or n2 < eps:
        return 180.0
    c = np.dot(t1 / n1, t2 / n2)
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def recover_focal(
    points,
    weights,
    valid=None,
    max_rounds: int = 100,
    tol: float = 1e-6,
) -> float:
    """Focal length (pixels) of a camera-frame pointmap, principal point at the image center.

    Iteratively reweighted minimizer of ``sum w ||(u - cx, v - cy) - f (x/z, y/z)||``
    (Weiszfeld-style updates on the 1-d focal), started from the weighted
    least-squares solution. Pixel ``(row i, col j)`` has ``u = j``, ``v = i`` and
    the center is ``((W-1)/2, (H-1)/2)``.
    """
    points = np.asarray(points, dtype=np.float64)
    h, w_ = points.shape[:2]
    weights = np.asarray(weights, dtype=np.float64)
    mask = points[..., 2] > 0
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    mask &= weights > 0
    if mask.sum() < 10:
        raise DegenerateError(f"recover_focal: only {int(mask.sum())} usable pixels, need 10")
    v, u = np.nonzero(mask)
    pix = np.stack([u - (w_ - 1) / 2.0, v - (h - 1) / 2.0], axis=1)
    p = points[mask]
    q = p[:, :2] / p[:, 2:3]
    wk = weights[mask]

    a = wk
    f = float((a * (pix * q).sum(1)).sum() / (a * (q * q).sum(1)).sum())
    for _ in range(max_rounds):
        r = np.linalg.norm(pix - f * q, axis=1)
        a = wk / np.maximum(r, 1e-12)
        f_new = float((a * (pix * q).sum(1)).sum() / (a * (q * q).sum(1)).sum())
        done = abs(f_new - f) <= tol * abs(f)
        f = f_new
        if done:
            break
    return f


def recover_relative_pose(world_points, local_points, weights, valid=None) -> RigidPose:
    """Rigid pose mapping a view's own-frame pointmap onto its reference-frame pointmap.

    ``world_points`` and ``local_points`` are H×W×3 grids of the same view;
    pixels participate when valid in both (nonzero, or per ``valid``) and with
    positive weight. The result maps camera coordinates into the reference frame.
    """
    world_points = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
    local_points = np.asarray(local_points, dtype=np.float64).reshape(-1, 3)
    wk = np.asarray(weights, dtype=np.float64).reshape(-1)
    if valid is None:
        mask = (np.abs(world_points).sum(1) > 0) & (np.abs(local_points).sum(1) > 0)
    else:
        mask = np.asarray(valid, dtype=bool).reshape(-1)
    mask = mask & (wk > 0)
    if mask.sum() < 3:
        raise DegenerateError(f"recover_relative_pose: only {int(mask.sum())} jointly valid pixels")
    T = umeyama(local_points[mask], world_points[mask], wk[mask], mode="rigid")
    return RigidPose(T.R, T.t)
