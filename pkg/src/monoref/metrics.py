"""Relative pose accuracy (RRA/RTA, mAA30) and point-cloud accuracy/completeness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidPose, apply_sim3, rotation_geodesic_deg, translation_angle_deg, umeyama

__all__ = [
    "PoseErrors",
    "CloudStats",
    "relative_pose_errors",
    "pose_accuracy",
    "maa30",
    "maa_from_errors",
    "nearest_distances",
    "cloud_accuracy_completeness",
]

MAA_THRESHOLDS = tuple(range(1, 31))


@dataclass(frozen=True)
class PoseErrors:
    rotation_deg: np.ndarray
    translation_deg: np.ndarray

    def __len__(self) -> int:
        return len(self.rotation_deg)


@dataclass(frozen=True)
class CloudStats:
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float

    def as_dict(self) -> dict[str, float]:
        return {
            "acc_mean": self.acc_mean,
            "acc_median": self.acc_median,
            "comp_mean": self.comp_mean,
            "comp_median": self.comp_median,
        }


def _extrinsic(p: RigidPose) -> tuple[np.ndarray, np.ndarray]:
    # world-to-camera
    return p.R.T, -p.R.T @ p.t


def _relative(pi: RigidPose, pj: RigidPose) -> tuple[np.ndarray, np.ndarray]:
    """Extrinsic of view j composed with the inverse extrinsic of view i."""
    Ri, ti = _extrinsic(pi)
    Rj, tj = _extrinsic(pj)
    R = Rj @ Ri.T
    return R, tj - R @ ti


def relative_pose_errors(pred: Sequence[RigidPose], gt: Sequence[RigidPose]) -> PoseErrors:
    """Rotation and translation-direction errors for every pair i < j.

    Poses are camera-to-world; the relative motion of a pair is taken between
    the world-to-camera extrinsics, which makes the errors independent of the
    world frame and of the global scale of the camera centers.
    """
    if len(pred) != len(gt):
        raise ValueError(f"pose metrics: {len(pred)} predicted poses but {len(gt)} ground-truth poses")
    if len(pred) < 2:
        raise ValueError("pose metrics: need at least two poses")
    rot, trans = [], []
    n = len(pred)
    for i in range(n):
        for j in range(i + 1, n):
            Rp, tp = _relative(pred[i], pred[j])
            Rg, tg = _relative(gt[i], gt[j])
            rot.append(rotation_geodesic_deg(Rp, Rg))
            trans.append(translation_angle_deg(tp, tg))
    return PoseErrors(np.array(rot), np.array(trans))


def pose_accuracy(pred, gt, thresholds=(5, 10, 15)) -> dict[str, float]:
    """RRA@tau and RTA@tau: fraction of pairs whose error is strictly below tau."""
    e = relative_pose_errors(pred, gt)
    out = {}
    for tau in thresholds:
        out[f"RRA@{tau:g}"] = float(np.count_nonzero(e.rotation_deg < tau) / len(e))
    for tau in thresholds:
        out[f"RTA@{tau:g}"] = float(np.count_nonzero(e.translation_deg < tau) / len(e))
    return out


def maa_from_errors(errors: PoseErrors) -> float:
    worst = np.maximum(errors.rotation_deg, errors.translation_deg)
    hits = sum(int(np.count_nonzero(worst < tau)) for tau in MAA_THRESHOLDS)
    return hits / (len(MAA_THRESHOLDS) * len(worst))


def maa30(pred, gt) -> float:
    """Mean over integer thresholds 1..30 deg of the fraction of pairs with max(rot, trans) error < threshold."""
    return maa_from_errors(relative_pose_errors(pred, gt))


def _dist_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


def nearest_distances(query, ref) -> np.ndarray:
    """Distance from each query point to its nearest reference point (KD-tree search)."""
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    _, idx = cKDTree(ref).query(query, k=1)
    return _dist_rows(query, ref[idx])


def cloud_accuracy_completeness(pred, gt, prealign: bool = False, pairs=None) -> CloudStats:
    """Accuracy (pred -> gt) and completeness (gt -> pred) nearest-neighbour distances.

    With ``prealign``, ``pred`` is first mapped onto ``gt`` by a similarity
    fitted on corresponding points: ``pairs=(pred_idx, gt_idx)`` when given,
    otherwise index order (the clouds must then be the same size).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("cloud metrics: empty point cloud")
    if prealign:
        if pairs is None:
            if len(pred) != len(gt):
                raise ValueError("cloud metrics: prealign without pairs needs equal-size clouds")
            src, dst = pred, gt
        else:
            src, dst = pred[pairs[0]], gt[pairs[1]]
        pred = apply_sim3(umeyama(src, dst, mode="similarity"), pred)
    acc = nearest_distances(pred, gt)
    comp = nearest_distances(gt, pred)
    return CloudStats(
        acc_mean=float(acc.mean()),
        acc_median=float(np.median(acc)),
        comp_mean=float(comp.mean()),
        comp_median=float(np.median(comp)),
    )
