"""Synthetic sequences with exact ground truth, rendered by our own rasterizer."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Camera, DeformableMesh, Pose, make_prototype_sphere, quat_from_axis_angle, quat_multiply
from .raster import RenderConfig, render


def make_box(size=(0.5, 0.5, 0.5), subdivisions: int = 4) -> DeformableMesh:
    """Axis-aligned box centered at the origin, each side on its own atlas tile.

    The texture atlas is a 3 x 2 grid of tiles, one per side, in the order
    +x, -x, +y, -y, +z, -z. Sides do not share vertices.
    """
    hx, hy, hz = (s / 2.0 for s in size)
    n = subdivisions
    # (origin corner, u axis, v axis) per side, wound outward
    sides = [
        ((hx, -hy, hz), (0, 0, -2 * hz), (0, 2 * hy, 0)),
        ((-hx, -hy, -hz), (0, 0, 2 * hz), (0, 2 * hy, 0)),
        ((-hx, hy, hz), (2 * hx, 0, 0), (0, 0, -2 * hz)),
        ((-hx, -hy, -hz), (2 * hx, 0, 0), (0, 0, 2 * hz)),
        ((-hx, -hy, hz), (2 * hx, 0, 0), (0, 2 * hy, 0)),
        ((hx, -hy, -hz), (-2 * hx, 0, 0), (0, 2 * hy, 0)),
    ]
    verts, uvs, faces, face_uv = [], [], [], []
    pad = 0.02
    for s, (o, du, dv) in enumerate(sides):
        o, du, dv = map(np.asarray, (o, du, dv))
        tile_u, tile_v = (s % 3) / 3.0, (s // 3) / 2.0
        base = len(verts)
        for b in range(n + 1):
            for a in range(n + 1):
                verts.append(o + du * a / n + dv * b / n)
                uvs.append((tile_u + (pad + (1 - 2 * pad) * a / n) / 3.0,
                            tile_v + (pad + (1 - 2 * pad) * b / n) / 2.0))
        for b in range(n):
            for a in range(n):
                i00 = base + b * (n + 1) + a
                i10, i01, i11 = i00 + 1, i00 + n + 1, i00 + n + 2
                for tri in ((i00, i10, i11), (i00, i11, i01)):
                    faces.append(tri)
                    face_uv.append([uvs[t] for t in tri])
    verts = np.array(verts)
    return DeformableMesh(verts, np.zeros_like(verts), np.array(faces), np.array(uvs), np.array(face_uv))


def make_card(size=(0.8, 0.5), thickness: float = 0.01, subdivisions: int = 4) -> DeformableMesh:
    return make_box((size[0], size[1], thickness), subdivisions)


def atlas_texture(size: int = 256, seed: int = 0, cells: int = 4) -> np.ndarray:
    """Colourful texture: one hue per atlas tile, overlaid with a coarse pattern."""
    rng = np.random.default_rng(seed)
    tex = np.zeros((size, size, 3))
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
    v = 1.0 - ys  # texture row 0 is v = 1
    tile = np.minimum((xs * 3).astype(int), 2) + 3 * np.minimum((v * 2).astype(int), 1)
    hues = rng.permutation(6) / 6.0
    for s in range(6):
        sel = tile == s
        base = np.array(colorsys.hsv_to_rgb(hues[s], 0.8, 0.9))
        dark = np.array(colorsys.hsv_to_rgb((hues[s] + 0.5) % 1.0, 0.7, 0.35))
        lu = (xs * 3) % 1.0
        lv = (v * 2) % 1.0
        pattern = ((np.floor(lu * cells) + np.floor(lv * cells)) % 2 == 0) & sel
        tex[sel] = base
        tex[pattern] = dark
    return tex


def checkerboard(height: int, width: int, square: int = 8,
                 colors=((0.25, 0.25, 0.25), (0.6, 0.6, 0.6))) -> np.ndarray:
    ii, jj = np.mgrid[0:height, 0:width]
    sel = ((ii // square + jj // square) % 2).astype(bool)
    out = np.empty((height, width, 3))
    out[~sel] = colors[0]
    out[sel] = colors[1]
    return out


@dataclass(frozen=True)
class MotionScript:
    """Turntable about ``axis`` (object space) after a fixed ``tilt``.

    Frame ``n`` has rotation ``tilt * axis_rotation(start + n * step)`` and
    translation ``translation + n * velocity``. ``wobble`` switches the spin
    to a sinusoid of amplitude ``step`` degrees with period ``period``.
    """

    step_deg: float = 6.0
    axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    start_deg: float = 0.0
    tilt_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    tilt_deg: float = 20.0
    translation: tuple[float, float, float] = (0.0, 0.0, -1.5)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    wobble: bool = False
    period: float = 40.0

    def angle(self, n: int) -> float:
        if self.wobble:
            return self.start_deg + self.step_deg * np.sin(2 * np.pi * n / self.period)
        return self.start_deg + n * self.step_deg

    def pose(self, n: int) -> Pose:
        if not np.isfinite(self.step_deg) or np.linalg.norm(self.axis) == 0:
            raise ValueError("invalid pose script")
        tilt = quat_from_axis_angle(self.tilt_axis, self.tilt_deg)
        spin = quat_from_axis_angle(self.axis, self.angle(n))
        t = np.asarray(self.translation) + n * np.asarray(self.velocity)
        if t[2] >= 0:
            raise ValueError("pose script moves the object behind the camera")
        return Pose(t, quat_multiply(tilt, spin))


@dataclass(frozen=True)
class SyntheticSpec:
    object: str = "box"  # "box", "card", "sphere" or "ellipsoid"
    object_size: tuple[float, ...] = (0.5, 0.5, 0.5)
    frames: int = 60
    width: int = 64
    height: int = 64
    motion: MotionScript = MotionScript()
    mask_noise_px: int = 0  # > 0 dilates, < 0 erodes
    background: str = "checker"  # or "constant"
    background_color: tuple[float, float, float] = (0.4, 0.4, 0.4)
    texture_size: int = 256
    seed: int = 0


@dataclass(eq=False)
class SyntheticSequence:
    spec: SyntheticSpec
    camera: Camera
    mesh: DeformableMesh
    texture: np.ndarray
    frames: list[np.ndarray] = field(default_factory=list)  # float RGB in [0, 1]
    gt_masks: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)  # tracker input
    poses: list[Pose] = field(default_factory=list)


def make_object(spec: SyntheticSpec) -> DeformableMesh:
    if spec.object == "box":
        return make_box(spec.object_size)
    if spec.object == "card":
        sx, sy = spec.object_size[:2]
        thick = spec.object_size[2] if len(spec.object_size) > 2 else 0.01
        return make_card((sx, sy), thick)
    if spec.object in ("sphere", "ellipsoid"):
        m = make_prototype_sphere(40, 20)
        diam = spec.object_size[0] if spec.object == "sphere" else np.asarray(spec.object_size[:3], dtype=float)
        return m.with_offsets(m.prototype_vertices * (diam - 1.0))
    raise ValueError(f"unknown synthetic object {spec.object!r}")


def disk(radius: int) -> np.ndarray:
    r = abs(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def perturb_mask(mask: np.ndarray, noise_px: int) -> np.ndarray:
    if noise_px > 0:
        return ndimage.binary_dilation(mask, structure=disk(noise_px))
    if noise_px < 0:
        return ndimage.binary_erosion(mask, structure=disk(noise_px))
    return mask.copy()


def generate_synthetic_sequence(spec: SyntheticSpec, render_cfg: RenderConfig = RenderConfig()) -> SyntheticSequence:
    camera = Camera(spec.width, spec.height)
    mesh = make_object(spec)
    texture = atlas_texture(spec.texture_size, spec.seed)
    if spec.background == "checker":
        bg = checkerboard(spec.height, spec.width)
    elif spec.background == "constant":
        bg = np.broadcast_to(np.asarray(spec.background_color, dtype=np.float64), (spec.height, spec.width, 3)).copy()
    else:
        raise ValueError(f"unknown background {spec.background!r}")
    seq = SyntheticSequence(spec, camera, mesh, texture)
    for n in range(spec.frames):
        pose = spec.motion.pose(n)
        out = render(mesh, texture, pose, camera, render_cfg)
        cover = out.face_index >= 0
        frame = np.where(cover[..., None], out.feature_image, bg)
        # quantize the way a PNG round trip would
        frame = np.rint(np.clip(frame, 0, 1) * 255.0) / 255.0
        seq.frames.append(frame)
        seq.gt_masks.append(cover)
        seq.masks.append(perturb_mask(cover, spec.mask_noise_px))
        seq.poses.append(pose)
    return seq


def spec_from_dict(doc: dict) -> SyntheticSpec:
    """Build a spec from parsed JSON; ``motion`` is a nested object."""
    doc = dict(doc)
    motion = doc.pop("motion", {}) or {}
    known = set(SyntheticSpec.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
    for k in ("object_size", "background_color"):
        if k in doc:
            doc[k] = tuple(doc[k])
    m_unknown = set(motion) - set(MotionScript.__dataclass_fields__)
    if m_unknown:
        raise ValueError(f"unknown motion fields: {sorted(m_unknown)}")
    motion = {k: tuple(v) if isinstance(v, list) else v for k, v in motion.items()}
    return SyntheticSpec(motion=MotionScript(**motion), **doc)
