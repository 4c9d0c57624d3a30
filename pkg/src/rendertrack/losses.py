"""Loss terms and their gradients.

Buffer losses (appearance, silhouette) return gradients w.r.t. the rendered
buffers; ``raster.render_backward`` carries them on to the scene parameters.
Losses over several frames are averaged with ``mu = 1 / n_frames``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import DeformableMesh, Pose, deformed_vertices, normalize_quaternion, tangent_gradient, uniform_laplacian

CAUCHY_SCALE = 0.25
EPS = 1e-8


class LossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    appearance: float = 1.0
    silhouette: float = 1.0
    motion: float = 1.0
    laplacian: float = 1000.0
    tv: float = 0.001

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")

    def as_dict(self) -> dict[str, float]:
        return {"appearance": self.appearance, "silhouette": self.silhouette, "motion": self.motion,
                "laplacian": self.laplacian, "tv": self.tv}


@dataclass(frozen=True)
class MotionThresholds:
    translation: float = 0.1  # world units per frame
    rotation_deg: float = 30.0  # degrees per frame

    def __post_init__(self):
        if self.translation < 0 or self.rotation_deg < 0:
            raise ValueError("motion thresholds must be nonnegative")


@dataclass
class Term:
    """A scalar loss with gradients keyed by parameter name."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class BufferLoss:
    value: float
    per_frame: list[float]
    grad_feature: list[np.ndarray | None]
    grad_silhouette: list[np.ndarray]
    degenerate: bool = False


# --------------------------------------------------------------------------

def cauchy(residual, scale: float = CAUCHY_SCALE):
    r = np.asarray(residual, dtype=np.float64) / scale
    return np.log1p(r * r)


def cauchy_grad(residual, scale: float = CAUCHY_SCALE):
    r = np.asarray(residual, dtype=np.float64)
    return 2.0 * r / (scale * scale + r * r)


def appearance_frame(rendered: np.ndarray, silhouette: np.ndarray, observed: np.ndarray,
                     scale: float = CAUCHY_SCALE):
    """Silhouette-weighted mean Cauchy residual for one frame.

    Returns ``(value, d/d rendered, d/d silhouette, degenerate)``. The mean
    runs over channels and silhouette-weighted pixels, so the value does not
    depend on image resolution.
    """
    if rendered.shape != observed.shape or rendered.shape[:2] != silhouette.shape:
        raise ValueError("appearance buffers disagree in shape")
    mass = float(silhouette.sum())
    n_ch = rendered.shape[2]
    if mass <= 0.0:
        return 0.0, np.zeros_like(rendered), np.zeros_like(silhouette), True
    diff = rendered - observed
    res = silhouette[..., None] * diff
    num = float(cauchy(res, scale).sum())
    denom = n_ch * max(mass, EPS)
    g_res = cauchy_grad(res, scale)
    g_rendered = g_res * silhouette[..., None] / denom
    g_sil = (g_res * diff).sum(axis=2) / denom
    if mass > EPS:
        g_sil -= num * n_ch / denom**2
    return num / denom, g_rendered, g_sil, False


def appearance_loss(rendered: list[np.ndarray], silhouettes: list[np.ndarray],
                    observed: list[np.ndarray], scale: float = CAUCHY_SCALE) -> BufferLoss:
    mu = 1.0 / len(rendered)
    per_frame, g_f, g_s = [], [], []
    degenerate = True
    for r, s, o in zip(rendered, silhouettes, observed, strict=True):
        v, gr, gs, deg = appearance_frame(r, s, o, scale)
        degenerate &= deg
        per_frame.append(v)
        g_f.append(mu * gr)
        g_s.append(mu * gs)
    return BufferLoss(mu * sum(per_frame), per_frame, g_f, g_s, degenerate)


def soft_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError("soft_iou needs equal shapes")
    inter = float((a * b).sum())
    union = float((a + b - a * b).sum())
    if union <= 0.0:
        return 1.0
    return inter / union


def distance_transform(mask: np.ndarray) -> tuple[np.ndarray, bool]:
    """Exact Euclidean distance to the nearest foreground pixel, over the diagonal.

    Returns ``(dt, empty)``; an all-background mask gives all ones and
    ``empty = True``.
    """
    m = np.asarray(mask).astype(bool)
    diag = math.hypot(*m.shape)
    if not m.any():
        return np.ones(m.shape), True
    return ndimage.distance_transform_edt(~m) / diag, False


def silhouette_frame(mask: np.ndarray, silhouette: np.ndarray, dt: np.ndarray):
    """``(1 - IoU) + mean DT under the silhouette`` and its silhouette gradient."""
    if mask.shape != silhouette.shape or dt.shape != silhouette.shape:
        raise ValueError("silhouette buffers disagree in shape")
    m = mask.astype(np.float64)
    inter = float((m * silhouette).sum())
    union = float((m + silhouette - m * silhouette).sum())
    if union > 0.0:
        iou = inter / union
        g_iou = (m * union - inter * (1.0 - m)) / union**2
    else:
        iou, g_iou = 1.0, np.zeros_like(silhouette)
    mass = float(silhouette.sum())
    denom = max(mass, EPS)
    dt_sum = float((dt * silhouette).sum())
    g_dt = dt / denom
    if mass > EPS:
        g_dt = g_dt - dt_sum / denom**2
    return (1.0 - iou) + dt_sum / denom, -g_iou + g_dt


def silhouette_loss(masks: list[np.ndarray], silhouettes: list[np.ndarray],
                    dts: list[np.ndarray]) -> BufferLoss:
    mu = 1.0 / len(masks)
    per_frame, g_s = [], []
    for m, s, d in zip(masks, silhouettes, dts, strict=True):
        v, g = silhouette_frame(m, s, d)
        per_frame.append(v)
        g_s.append(mu * g)
    return BufferLoss(mu * sum(per_frame), per_frame, [None] * len(masks), g_s)


# --------------------------------------------------------------------------

def _angle_and_grad(q_ref, q_cur):
    """Angle in degrees between two quaternions and its gradient w.r.t. each."""
    a = normalize_quaternion(q_ref)
    b = normalize_quaternion(q_cur)
    c = float(a @ b)
    sign = 1.0 if c >= 0 else -1.0
    ac = min(abs(c), 1.0)
    angle = math.degrees(2.0 * math.acos(ac))
    if ac >= 1.0 - 1e-15:
        return angle, np.zeros(4), np.zeros(4)
    dang_dc = -2.0 * sign / math.sqrt(1.0 - ac * ac) * (180.0 / math.pi)
    return angle, tangent_gradient(q_ref, dang_dc * b), tangent_gradient(q_cur, dang_dc * a)


def motion_loss(current: Pose, keyframe: Pose, frame_gap: int,
                thresholds: MotionThresholds = MotionThresholds()) -> Term:
    """Hinge on per-frame translation and rotation rates since the last keyframe.

    Gradients are returned for both poses under the keys ``translation``,
    ``rotation``, ``kf_translation`` and ``kf_rotation``.
    """
    if frame_gap < 1:
        raise ValueError("frame_gap must be >= 1")
    value = 0.0
    g_t = np.zeros(3)
    g_q = np.zeros(4)
    g_qk = np.zeros(4)
    delta = np.asarray(current.translation) - np.asarray(keyframe.translation)
    dist = float(np.linalg.norm(delta))
    if dist / frame_gap > thresholds.translation:
        value += dist / frame_gap - thresholds.translation
        g_t = delta / (dist * frame_gap)
    angle, g_ref, g_cur = _angle_and_grad(keyframe.rotation, current.rotation)
    if angle / frame_gap > thresholds.rotation_deg:
        value += angle / frame_gap - thresholds.rotation_deg
        g_q = g_cur / frame_gap
        g_qk = g_ref / frame_gap
    return Term(value, {"translation": g_t, "rotation": g_q, "kf_translation": -g_t, "kf_rotation": g_qk})


def laplacian_loss(mesh: DeformableMesh, vertices: np.ndarray | None = None) -> Term:
    """Mean squared norm of the uniform Laplacian; gradient w.r.t. offsets."""
    if vertices is None:
        vertices = deformed_vertices(mesh)
    delta = uniform_laplacian(mesh, vertices)
    n = len(vertices)
    # gradient is (2 / n) L^T delta with L = I - D^-1 A
    grad = delta - mesh.adjacency.T @ (delta / mesh.degrees[:, None])
    return Term(float((delta * delta).sum()) / n, {"offsets": (2.0 / n) * grad})


def tv_loss(texture: np.ndarray, scale: float = CAUCHY_SCALE) -> Term:
    """Mean Cauchy penalty on feature differences between 4-neighbour texels."""
    t = np.asarray(texture, dtype=np.float64)
    dx = t[:, 1:] - t[:, :-1]
    dy = t[1:] - t[:-1]
    n_pairs = dx.shape[0] * dx.shape[1] + dy.shape[0] * dy.shape[1]
    nx = np.sqrt((dx * dx).sum(axis=2))
    ny = np.sqrt((dy * dy).sum(axis=2))
    value = (float(cauchy(nx, scale).sum()) + float(cauchy(ny, scale).sum())) / n_pairs
    # d gamma(|d|) / d d = 2 d / (c^2 + |d|^2), smooth at d = 0
    gx = 2.0 * dx / (scale * scale + nx * nx)[..., None] / n_pairs
    gy = 2.0 * dy / (scale * scale + ny * ny)[..., None] / n_pairs
    grad = np.zeros_like(t)
    grad[:, 1:] += gx
    grad[:, :-1] -= gx
    grad[1:] += gy
    grad[:-1] -= gy
    return Term(value, {"texture": grad})


def total_loss(terms: dict[str, Term], weights: LossWeights = LossWeights()) -> Term:
    """Weighted sum of named terms; gradients with the same key add up."""
    w = weights.as_dict()
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, term in terms.items():
        if name not in w:
            raise KeyError(f"unknown loss term {name!r}")
        if not math.isfinite(term.value):
            raise LossError(name, term.value)
        value += w[name] * term.value
        for key, g in term.grads.items():
            if not np.all(np.isfinite(g)):
                raise LossError(name, "non-finite gradient")
            if key in grads:
                grads[key] = grads[key] + w[name] * g
            else:
                grads[key] = w[name] * np.asarray(g, dtype=np.float64)
    return Term(value, grads)
