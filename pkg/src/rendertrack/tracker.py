"""Causal per-frame tracking loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, DeformableMesh, FeatureTexture, Pose, deformed_vertices, make_prototype_sphere, unproject
from .keyframes import (
    Keyframe,
    KeyframeCriteria,
    KeyframeSet,
    add_keyframe,
    admission_check,
    evict_failing,
    object_size,
)
from .losses import LossWeights, MotionThresholds, distance_transform
from .optimizer import MAX_ITERATIONS, FrameProblem, FrameResult, FrameView, optimize_frame, project_to_best_plane
from .raster import RenderConfig, render

log = logging.getLogger(__name__)

TAU_F_RGB = 0.2
TAU_F_DEEP = 0.05


class TrackerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    features: str = "rgb"  # "rgb" or "file"
    tau_f: float | None = None
    max_iterations: int = MAX_ITERATIONS
    learning_rate: float = 0.1
    lr_scale: tuple[tuple[str, float], ...] = ()
    weights: LossWeights = LossWeights()
    motion: MotionThresholds = MotionThresholds()
    render: RenderConfig = RenderConfig()
    keyframes: int = 6
    keyframe_silhouette: float = 0.3
    keyframe_rotation_deg: float = 45.0
    optimize_keyframe_poses: bool = True
    flat_prior: bool = False
    sphere_segments: int = 55
    sphere_rings: int = 23
    texture_size: int = 300
    init_lateral: str = "center"  # or "mask_centroid"
    output_threshold: float = 0.5
    seed: int = 0
    record_history: bool = False

    @property
    def convergence_threshold(self) -> float:
        if self.tau_f is not None:
            return self.tau_f
        return TAU_F_RGB if self.features == "rgb" else TAU_F_DEEP

    @property
    def criteria(self) -> KeyframeCriteria:
        return KeyframeCriteria(max_silhouette_loss=self.keyframe_silhouette, tau_f=self.convergence_threshold,
                                min_rotation_deg=self.keyframe_rotation_deg)


@dataclass(eq=False)
class TrackOutput:
    index: int
    segmentation: np.ndarray
    pose: Pose
    failed: bool
    keyframes: tuple[int, ...]
    result: FrameResult


@dataclass(eq=False)
class TrackerState:
    camera: Camera
    config: TrackerConfig
    template: DeformableMesh
    offsets: np.ndarray
    texture: np.ndarray
    poses: list[Pose] = field(default_factory=list)
    keyframes: KeyframeSet = field(default_factory=KeyframeSet)
    outputs: list[TrackOutput] = field(default_factory=list)

    @property
    def mesh(self) -> DeformableMesh:
        return self.template.with_offsets(self.offsets)

    @property
    def n_frames(self) -> int:
        return len(self.poses)


def initial_depth(camera: Camera, diameter: float = 1.0) -> float:
    """Depth at which a sphere of this diameter spans the image height."""
    return 0.5 * diameter / math.tan(math.radians(camera.fov_deg) / 2.0)


def apply_flat_prior(mesh: DeformableMesh) -> DeformableMesh:
    """Project every deformed vertex onto the best-fit plane."""
    flat = project_to_best_plane(deformed_vertices(mesh))
    return mesh.with_offsets(flat - mesh.prototype_vertices)


def _check_inputs(camera: Camera, features: np.ndarray, mask: np.ndarray, channels: int | None):
    if features.ndim != 3 or features.shape[:2] != (camera.height, camera.width):
        raise ValueError(f"features {features.shape[:2]} do not match camera {(camera.height, camera.width)}")
    if mask.shape != (camera.height, camera.width):
        raise ValueError(f"mask {mask.shape} does not match camera {(camera.height, camera.width)}")
    if channels is not None and features.shape[2] != channels:
        raise ValueError(f"feature channels changed within the sequence ({features.shape[2]} != {channels})")


def init_tracker(features, mask, camera: Camera, config: TrackerConfig = TrackerConfig()) -> TrackerState:
    """Set up the prototype, zero texture and first pose, then fit frame 0."""
    features = np.asarray(getattr(features, "data", features), dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    _check_inputs(camera, features, mask, None)
    if not mask.any():
        raise TrackerError("initial mask is empty")
    template = make_prototype_sphere(config.sphere_segments, config.sphere_rings)
    offsets = np.zeros_like(template.prototype_vertices)
    if config.flat_prior:
        # flatten onto the plane facing the camera; a sphere has no preferred best-fit plane
        offsets[:, 2] = -template.prototype_vertices[:, 2]
    depth = initial_depth(camera)
    if config.init_lateral == "center":
        t0 = np.array([0.0, 0.0, -depth])
    elif config.init_lateral == "mask_centroid":
        rows, cols = np.nonzero(mask)
        t0 = unproject(camera, cols.mean() + 0.5, rows.mean() + 0.5, depth)
    else:
        raise ValueError(f"unknown init_lateral {config.init_lateral!r}")
    state = TrackerState(
        camera=camera, config=config, template=template, offsets=offsets,
        texture=FeatureTexture.zeros(features.shape[2], config.texture_size).data,
        keyframes=KeyframeSet(config.keyframes),
    )
    _run_frame(state, features, mask, Pose(t0, [1.0, 0.0, 0.0, 0.0]))
    return state


def track_frame(state: TrackerState, features, mask) -> TrackOutput:
    if state is None or not state.poses:
        raise TrackerError("tracker is not initialized")
    features = np.asarray(getattr(features, "data", features), dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    _check_inputs(state.camera, features, mask, state.texture.shape[2])
    return _run_frame(state, features, mask, state.poses[-1])


def _run_frame(state: TrackerState, features: np.ndarray, mask: np.ndarray, init_pose: Pose) -> TrackOutput:
    cfg = state.config
    n = state.n_frames
    dt, _ = distance_transform(mask)
    current = FrameView(n, features, mask, dt)
    views = [FrameView(k.index, k.features, k.mask, k.dt) for k in state.keyframes] + [current]

    params = {"offsets": state.offsets.copy(), "texture": state.texture.copy(),
              f"t:{n}": np.array(init_pose.translation), f"q:{n}": np.array(init_pose.rotation)}
    fixed = {}
    for k in state.keyframes:
        p = state.poses[k.index]
        if cfg.optimize_keyframe_poses:
            params[f"t:{k.index}"] = np.array(p.translation)
            params[f"q:{k.index}"] = np.array(p.rotation)
        else:
            fixed[k.index] = p
    if state.keyframes.last is not None:
        anchor = state.keyframes.last.index
    elif n > 0:
        anchor = n - 1
        fixed[anchor] = state.poses[anchor]
    else:
        anchor = None
    problem = FrameProblem(
        template=state.template, camera=state.camera, views=views, current=n,
        anchor=anchor, gap=(n - anchor) if anchor is not None else 1, fixed_poses=fixed,
        weights=cfg.weights, thresholds=cfg.motion, render_cfg=cfg.render,
    )
    result, ev = optimize_frame(
        problem, params, cfg.convergence_threshold, cfg.max_iterations, cfg.learning_rate,
        dict(cfg.lr_scale) or None, cfg.flat_prior, cfg.record_history,
    )

    first = n == 0
    if result.failed and not first:
        state.poses.append(Pose(init_pose.translation, init_pose.rotation))
        segmentation = mask.copy()
    else:
        state.offsets = params["offsets"]
        state.texture = params["texture"]
        for k in state.keyframes:
            if f"t:{k.index}" in params:
                state.poses[k.index] = Pose(params[f"t:{k.index}"], params[f"q:{k.index}"])
        pose = Pose(params[f"t:{n}"], params[f"q:{n}"])
        state.poses.append(pose)
        if result.failed or ev is None:
            segmentation = mask.copy()
        else:
            segmentation = ev.renders[n].soft_silhouette > cfg.output_threshold
        _update_keyframes(state, result, current, pose, first)

    out = TrackOutput(n, segmentation, state.poses[n], result.failed, tuple(state.keyframes.indices), result)
    state.outputs.append(out)
    log.info("frame %d: %s after %d iterations (L_F=%.4f, L_S=%.4f), keyframes %s", n,
             "FAILED" if result.failed else "converged", result.iterations, result.loss_f, result.loss_s,
             list(out.keyframes))
    return out


def _update_keyframes(state: TrackerState, result: FrameResult, view: FrameView, pose: Pose, first: bool):
    criteria = state.config.criteria
    kfs, dropped = evict_failing(state.keyframes, result.keyframe_scores, criteria)
    if dropped:
        log.info("frame %d: evicted keyframes %s", view.index, dropped)
    last = kfs.last
    if first:
        admit = True
    else:
        size = object_size(deformed_vertices(state.mesh))
        adm = admission_check(result.loss_s, result.loss_f, pose,
                              state.poses[last.index] if last is not None else None, size, criteria)
        admit = adm.admit
    if admit:
        kfs = add_keyframe(kfs, Keyframe(view.index, view.features, view.mask, view.dt, pose,
                                         result.loss_s, result.loss_f))
    state.keyframes = kfs


def track_sequence(frames, camera: Camera, config: TrackerConfig = TrackerConfig()):
    """Track an iterable of ``(features, mask)`` pairs; returns the final state."""
    it = iter(frames)
    try:
        feats, mask = next(it)
    except StopIteration:
        raise TrackerError("empty sequence") from None
    state = init_tracker(feats, mask, camera, config)
    for feats, mask in it:
        track_frame(state, feats, mask)
    return state


def render_state(state: TrackerState, index: int):
    return render(state.mesh, state.texture, state.poses[index], state.camera, state.config.render)


def backproject_rgb(state: TrackerState, rgb_frames: dict[int, np.ndarray],
                    size: int | None = None) -> tuple[FeatureTexture, np.ndarray]:
    """Average keyframe colours into texels through the current geometry.

    Each visible pixel spreads its RGB value over the four texels of its
    bilinear footprint with the bilinear weights. Returns the texture and a
    boolean map of observed texels; unobserved texels are zero.
    """
    size = size or state.texture.shape[0]
    mesh = state.mesh
    acc = np.zeros((size, size, 3))
    wsum = np.zeros((size, size))
    dummy = np.zeros((2, 2, 1))
    for idx, rgb in sorted(rgb_frames.items()):
        rgb = np.asarray(rgb)
        rgb = rgb.astype(np.float64) / 255.0 if np.issubdtype(rgb.dtype, np.integer) else rgb.astype(np.float64)
        out = render(mesh, dummy, state.poses[idx], state.camera, state.config.render)
        rows, cols = np.nonzero(out.face_index >= 0)
        f = out.face_index[rows, cols]
        b = out.barycentrics[rows, cols]
        uv = np.einsum("nk,nkc->nc", b, mesh.face_uv[f])
        x = np.clip(uv[:, 0], 0, 1) * (size - 1)
        y = (1.0 - np.clip(uv[:, 1], 0, 1)) * (size - 1)
        x0 = np.minimum(np.floor(x).astype(int), size - 2)
        y0 = np.minimum(np.floor(y).astype(int), size - 2)
        fx, fy = x - x0, y - y0
        colour = rgb[rows, cols, :3]
        for dy, dx, w in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                          (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            np.add.at(wsum, (y0 + dy, x0 + dx), w)
            np.add.at(acc, (y0 + dy, x0 + dx), w[:, None] * colour)
    observed = wsum > 0
    tex = np.zeros_like(acc)
    tex[observed] = acc[observed] / wsum[observed][:, None]
    return FeatureTexture(tex), observed

