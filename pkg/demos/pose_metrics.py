"""
Relative pose accuracy and mAA
==============================

Pose metrics compare every pair of cameras: the rotation error is the
geodesic angle between predicted and true relative rotations, and the
translation error is the angle between the relative translation directions,
so a global scale on the prediction costs nothing.
"""

import numpy as np

from monoref.geometry import RigidPose, random_rotation, rotation_about
from monoref.metrics import maa30, pose_accuracy, relative_pose_errors

rng = np.random.default_rng(0)
gt = [RigidPose(random_rotation(rng), rng.normal(size=3)) for _ in range(4)]

# perturb each camera by a small random rotation and a translation offset
pred = [RigidPose(rotation_about(rng.normal(size=3), 4.0) @ p.R, p.t + rng.normal(scale=0.05, size=3)) for p in gt]

errors = relative_pose_errors(pred, gt)
for k, (r, t) in enumerate(zip(errors.rotation_deg, errors.translation_deg)):
    print(f"pair {k}: rotation {r:6.2f} deg   translation direction {t:6.2f} deg")

print(pose_accuracy(pred, gt))
print(f"mAA30 = {maa30(pred, gt):.4f}")

# scaling every camera center leaves all angles unchanged
scaled = [RigidPose(p.R, 3.0 * p.t) for p in pred]
print(f"after scaling centers by 3: mAA30 = {maa30(scaled, gt):.4f}")

# a single 12 degree rotation error on one camera
bad = list(gt)
bad[1] = RigidPose(gt[1].R @ rotation_about([0, 0, 1], 12.0), gt[1].t)
print(pose_accuracy(bad, gt))
