"""Per-frame ADAM minimization of the total loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, DeformableMesh, Pose, normalize_quaternion
from .losses import (
    LossError,
    LossWeights,
    MotionThresholds,
    Term,
    appearance_frame,
    laplacian_loss,
    motion_loss,
    silhouette_frame,
    total_loss,
    tv_loss,
)
from .raster import RenderConfig, RenderOutput, render, render_backward

log = logging.getLogger(__name__)

MAX_ITERATIONS = 500
# a current-frame render with less silhouette mass than one pixel cannot
# converge: its appearance loss tends to zero as the object vanishes
MIN_SILHOUETTE_MASS = 1.0


@dataclass
class AdamState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr_scale: dict[str, float] | None = None):
    """Bias-corrected ADAM update, in place; returns ``(params, state)``.

    Keys starting with ``q:`` are quaternions and are renormalized after the
    update.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        lr = state.lr * (lr_scale.get(_group(k), 1.0) if lr_scale else 1.0)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        if k.startswith("q:"):
            p[:] = normalize_quaternion(p)
    return params, state


def _group(key: str) -> str:
    if key.startswith("t:"):
        return "translation"
    if key.startswith("q:"):
        return "rotation"
    return key


# --------------------------------------------------------------------------


@dataclass(eq=False)
class FrameView:
    """Observations of one frame as seen by the objective."""

    index: int
    features: np.ndarray
    mask: np.ndarray
    dt: np.ndarray


@dataclass
class Evaluation:
    total: Term
    terms: dict[str, float]
    loss_f: dict[int, float]
    loss_s: dict[int, float]
    renders: dict[int, RenderOutput]


@dataclass(eq=False)
class FrameProblem:
    """Everything the objective needs besides the free parameters.

    ``views`` lists the keyframes followed by the current frame. The motion
    term anchors the current pose to ``anchor`` (a view index whose pose may
    itself be free, or a fixed pose in ``fixed_poses``) over ``gap`` frames.
    """

    template: DeformableMesh
    camera: Camera
    views: list[FrameView]
    current: int
    anchor: int | None
    gap: int
    fixed_poses: dict[int, Pose] = field(default_factory=dict)
    weights: LossWeights = LossWeights()
    thresholds: MotionThresholds = MotionThresholds()
    render_cfg: RenderConfig = RenderConfig()

    def pose(self, params, index) -> Pose:
        if f"t:{index}" in params:
            return Pose(params[f"t:{index}"], params[f"q:{index}"])
        return self.fixed_poses[index]


def evaluate(problem: FrameProblem, params: dict[str, np.ndarray], with_grad: bool = True) -> Evaluation:
    mesh = problem.template.with_offsets(params["offsets"])
    tex = params["texture"]
    mu = 1.0 / len(problem.views)
    grads: dict[str, np.ndarray] = {"offsets": np.zeros_like(params["offsets"]),
                                    "texture": np.zeros_like(tex)}
    loss_f, loss_s, renders = {}, {}, {}
    app_total = 0.0
    sil_total = 0.0
    for view in problem.views:
        pose = problem.pose(params, view.index)
        out = render(mesh, tex, pose, problem.camera, problem.render_cfg)
        renders[view.index] = out
        vf, gF, gSf, _ = appearance_frame(out.feature_image, out.soft_silhouette, view.features)
        vs, gSs = silhouette_frame(view.mask, out.soft_silhouette, view.dt)
        loss_f[view.index] = vf
        loss_s[view.index] = vs
        app_total += mu * vf
        sil_total += mu * vs
        if not with_grad:
            continue
        w = problem.weights
        g = render_backward(out, mesh, tex, pose, problem.camera, problem.render_cfg,
                            mu * w.appearance * gF, mu * (w.appearance * gSf + w.silhouette * gSs))
        grads["offsets"] += g.offsets
        grads["texture"] += g.texture
        if f"t:{view.index}" in params:
            grads[f"t:{view.index}"] = g.translation
            grads[f"q:{view.index}"] = g.rotation

    terms = {"appearance": Term(app_total), "silhouette": Term(sil_total)}
    if problem.anchor is not None:
        cur = problem.pose(params, problem.current)
        ref = problem.pose(params, problem.anchor)
        m = motion_loss(cur, ref, problem.gap, problem.thresholds)
        mg = {f"t:{problem.current}": m.grads["translation"], f"q:{problem.current}": m.grads["rotation"]}
        if f"t:{problem.anchor}" in params:
            mg[f"t:{problem.anchor}"] = m.grads["kf_translation"]
            mg[f"q:{problem.anchor}"] = m.grads["kf_rotation"]
        terms["motion"] = Term(m.value, mg if with_grad else {})
    lap = laplacian_loss(mesh)
    tv = tv_loss(tex)
    terms["laplacian"] = Term(lap.value, lap.grads if with_grad else {})
    terms["tv"] = Term(tv.value, tv.grads if with_grad else {})
    # buffer-loss gradients were already weighted inside render_backward
    total = total_loss(terms, problem.weights)
    if with_grad:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise LossError("render", "non-finite gradient")
            total.grads[k] = total.grads[k] + g if k in total.grads else g
    return Evaluation(total, {k: t.value for k, t in terms.items()}, loss_f, loss_s, renders)


# --------------------------------------------------------------------------


@dataclass
class FrameResult:
    converged: bool
    iterations: int
    loss_f: float
    loss_s: float
    loss_total: float
    failed: bool
    diagnostic: str = ""
    keyframe_scores: dict[int, tuple[float, float]] = field(default_factory=dict)
    history: list[dict[str, float]] = field(default_factory=list)


def project_to_best_plane(vertices: np.ndarray) -> np.ndarray:
    """Orthogonally project points onto their least-squares plane."""
    center = vertices.mean(axis=0)
    centered = vertices - center
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size < 3 or s[1] <= 1e-12 * max(s[0], 1e-300):
        raise ValueError("degenerate vertex set: rank < 2")
    normal = vt[2]
    return vertices - np.outer(centered @ normal, normal)


def optimize_frame(problem: FrameProblem, params: dict[str, np.ndarray], tau_f: float,
                   max_iterations: int = MAX_ITERATIONS, lr: float = 0.1,
                   lr_scale: dict[str, float] | None = None, flat_prior: bool = False,
                   record_history: bool = False) -> tuple[FrameResult, Evaluation | None]:
    """Run ADAM on ``params`` in place until the current frame's L_F < tau_f.

    A render whose silhouette mass is below ``MIN_SILHOUETTE_MASS`` pixels
    never counts as converged.

    Returns the result and the evaluation that ended the loop (parameters
    are left exactly at that evaluation's point).
    """
    state = AdamState(lr=lr)
    history = []
    ev = None
    for it in range(1, max_iterations + 1):
        try:
            ev = evaluate(problem, params)
        except (LossError, FloatingPointError, ValueError) as exc:
            log.warning("frame %d: %s", problem.current, exc)
            return FrameResult(False, it, math.inf, math.inf, math.inf, True, str(exc), history=history), None
        lf = ev.loss_f[problem.current]
        if record_history:
            history.append({"iteration": it, "loss": ev.total.value, **ev.terms,
                            "loss_f_current": lf, "loss_s_current": ev.loss_s[problem.current]})
        mass = float(ev.renders[problem.current].soft_silhouette.sum())
        if lf < tau_f and mass >= MIN_SILHOUETTE_MASS:
            return _result(True, it, ev, problem, history), ev
        if it == max_iterations:
            break
        try:
            adam_step(state, params, ev.total.grads, lr_scale)
        except FloatingPointError as exc:
            return FrameResult(False, it, lf, ev.loss_s[problem.current], ev.total.value, True,
                               str(exc), history=history), ev
        if flat_prior:
            verts = problem.template.prototype_vertices + params["offsets"]
            params["offsets"][:] = project_to_best_plane(verts) - problem.template.prototype_vertices
    return _result(False, max_iterations, ev, problem, history), ev


def _result(converged, it, ev: Evaluation, problem: FrameProblem, history) -> FrameResult:
    scores = {i: (ev.loss_s[i], ev.loss_f[i]) for i in ev.loss_f if i != problem.current}
    return FrameResult(converged, it, ev.loss_f[problem.current], ev.loss_s[problem.current],
                       ev.total.value, not converged,
                       "" if converged else "appearance loss above threshold after max iterations",
                       scores, history)
