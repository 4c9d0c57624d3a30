"""Keyframe bookkeeping: admission, re-evaluation and eviction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, quat_angle_deg


@dataclass(frozen=True)
class KeyframeCriteria:
    max_silhouette_loss: float = 0.3
    tau_f: float = 0.2
    min_rotation_deg: float = 45.0
    # translation threshold as a fraction of the object size
    min_translation_ratio: float = 0.5


@dataclass(frozen=True, eq=False)
class Keyframe:
    index: int
    features: np.ndarray
    mask: np.ndarray
    dt: np.ndarray
    pose: Pose  # at admission
    loss_s: float
    loss_f: float

    def __post_init__(self):
        for name in ("features", "mask", "dt"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def rescored(self, loss_s: float, loss_f: float) -> "Keyframe":
        return Keyframe(self.index, self.features, self.mask, self.dt, self.pose, loss_s, loss_f)


@dataclass
class KeyframeSet:
    capacity: int = 6
    frames: list[Keyframe] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("keyframe capacity must be at least 1")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def indices(self) -> list[int]:
        return [k.index for k in self.frames]

    @property
    def last(self) -> Keyframe | None:
        return self.frames[-1] if self.frames else None


@dataclass(frozen=True)
class Admission:
    admit: bool
    reasons: tuple[str, ...] = ()


def object_size(vertices: np.ndarray) -> float:
    """Diameter of a bounding sphere centered on the axis-aligned box center."""
    center = 0.5 * (vertices.min(axis=0) + vertices.max(axis=0))
    return 2.0 * float(np.linalg.norm(vertices - center, axis=1).max())


def admission_check(loss_s: float, loss_f: float, pose: Pose, last_pose: Pose | None,
                    size: float, criteria: KeyframeCriteria = KeyframeCriteria()) -> Admission:
    """Apply the alignment, appearance and viewpoint-change criteria.

    ``last_pose`` is the current estimate for the most recent keyframe, or
    None when the set is empty (the viewpoint criterion then holds).
    """
    reasons = []
    if not loss_s < criteria.max_silhouette_loss:
        reasons.append("silhouette misalignment")
    if not loss_f < criteria.tau_f:
        reasons.append("appearance mismatch")
    if last_pose is not None:
        moved = np.linalg.norm(np.asarray(pose.translation) - last_pose.translation)
        turned = quat_angle_deg(pose.rotation, last_pose.rotation)
        if not (moved > criteria.min_translation_ratio * size or turned > criteria.min_rotation_deg):
            reasons.append("insufficient viewpoint change")
    return Admission(not reasons, tuple(reasons))


def evict_failing(kfs: KeyframeSet, scores: dict[int, tuple[float, float]],
                  criteria: KeyframeCriteria = KeyframeCriteria()) -> tuple[KeyframeSet, list[int]]:
    """Rescore keyframes with ``{index: (loss_s, loss_f)}`` and drop violators."""
    kept, dropped = [], []
    for kf in kfs:
        loss_s, loss_f = scores.get(kf.index, (kf.loss_s, kf.loss_f))
        if loss_s < criteria.max_silhouette_loss and loss_f < criteria.tau_f:
            kept.append(kf.rescored(loss_s, loss_f))
        else:
            dropped.append(kf.index)
    return KeyframeSet(kfs.capacity, kept), dropped


def add_keyframe(kfs: KeyframeSet, kf: Keyframe) -> KeyframeSet:
    """Append and keep only the most recent ``capacity`` keyframes."""
    if kfs.frames and kf.index <= kfs.frames[-1].index:
        raise ValueError("keyframe indices must increase")
    frames = (kfs.frames + [kf])[-kfs.capacity:]
    return KeyframeSet(kfs.capacity, frames)


def reevaluate_and_evict(kfs: KeyframeSet, scores: dict[int, tuple[float, float]],
                         candidate: Keyframe | None = None,
                         criteria: KeyframeCriteria = KeyframeCriteria()) -> KeyframeSet:
    """Drop keyframes that fail re-evaluation, then admit ``candidate`` if given."""
    kfs, _ = evict_failing(kfs, scores, criteria)
    if candidate is not None:
        kfs = add_keyframe(kfs, candidate)
    return kfs
