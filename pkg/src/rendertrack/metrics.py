"""Segmentation and pose error metrics."""
from __future__ import annotations

import numpy as np

from .geometry import Pose, normalize_quaternion, quat_angle_deg, quat_conjugate, quat_multiply


def iou_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    """Binary intersection over union; two empty masks score 1."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def pose_error(pred: Pose, gt: Pose) -> tuple[float, float]:
    """Translation distance and rotation angle in degrees."""
    dt = float(np.linalg.norm(np.asarray(pred.translation) - gt.translation))
    return dt, quat_angle_deg(pred.rotation, gt.rotation)


def relative_rotation_errors(pred: list[Pose], gt: list[Pose], reference: int = 0) -> np.ndarray:
    """Rotation error of each frame after aligning both tracks at ``reference``.

    The tracker's object frame is arbitrary, so what can be compared is the
    rotation accumulated since the reference frame: ``R_n R_ref^-1``.
    """
    p0 = quat_conjugate(normalize_quaternion(pred[reference].rotation))
    g0 = quat_conjugate(normalize_quaternion(gt[reference].rotation))
    errs = []
    for p, g in zip(pred, gt, strict=True):
        rp = quat_multiply(normalize_quaternion(p.rotation), p0)
        rg = quat_multiply(normalize_quaternion(g.rotation), g0)
        errs.append(quat_angle_deg(rp, rg))
    return np.array(errs)
