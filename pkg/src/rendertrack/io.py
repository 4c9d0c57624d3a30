"""Sequence manifests, trajectories and exported artifacts.

A manifest is JSON::

    {"sequence": "name", "fov_deg": 45.0,
     "frames": [{"image": "frames/0000.png", "mask": "masks/0000.png",
                 "features": "features/0000.ften"}, ...]}

Paths are relative to the manifest. ``features`` is optional.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .features import FeatureImage, encode_identity, load_feature_map, save_feature_map
from .geometry import Camera, Pose, write_obj

TRAJECTORY_FIELDS = ("index", "tx", "ty", "tz", "qw", "qx", "qy", "qz", "failed", "keyframes", "loss_F", "loss_S")


class SequenceError(ValueError):
    pass


# --------------------------------------------------------------------------
# images


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    """Grayscale mask binarized at 128."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def write_rgb(path, image) -> None:
    img = np.asarray(image)
    if not np.issubdtype(img.dtype, np.integer):
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0)
    Image.fromarray(img.astype(np.uint8)).save(path)


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# sequences


@dataclass(frozen=True)
class FrameRecord:
    image: Path
    mask: Path
    features: Path | None = None


@dataclass(frozen=True)
class Sequence:
    name: str
    camera: Camera
    frames: tuple[FrameRecord, ...]

    def __len__(self) -> int:
        return len(self.frames)

    def mask(self, n: int) -> np.ndarray:
        return read_mask(self.frames[n].mask)

    def image(self, n: int) -> np.ndarray:
        return read_rgb(self.frames[n].image)

    def features(self, n: int, kind: str = "rgb") -> FeatureImage:
        rec = self.frames[n]
        if kind == "rgb":
            return encode_identity(self.image(n))
        if kind == "file":
            if rec.features is None:
                raise SequenceError(f"frame {n} has no feature map")
            return load_feature_map(rec.features, self.camera.height, self.camera.width)
        raise ValueError(f"unknown feature kind {kind!r}")


def _size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.height, im.width


def load_sequence(manifest) -> Sequence:
    """Parse and validate a manifest; every referenced file must exist."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(manifest)
    doc = json.loads(manifest.read_text())
    root = manifest.parent
    entries = doc.get("frames", [])
    if not entries:
        raise SequenceError(f"{manifest}: empty sequence")
    records = []
    for n, e in enumerate(entries):
        try:
            img, msk = root / e["image"], root / e["mask"]
        except KeyError as exc:
            raise SequenceError(f"{manifest}: frame {n} lacks {exc.args[0]!r}") from None
        feat = root / e["features"] if e.get("features") else None
        for p in (img, msk, feat):
            if p is not None and not p.exists():
                raise FileNotFoundError(p)
        records.append(FrameRecord(img, msk, feat))
    shape = _size(records[0].image)
    for n, r in enumerate(records):
        for p in (r.image, r.mask):
            if _size(p) != shape:
                raise SequenceError(f"resolution mismatch at frame {n}: {p} is {_size(p)}, expected {shape}")
    camera = Camera(shape[1], shape[0], float(doc.get("fov_deg", 45.0)))
    return Sequence(str(doc.get("sequence", manifest.parent.name)), camera, tuple(records))


def write_manifest(path, frames: list[dict], name: str = "sequence", fov_deg: float = 45.0) -> None:
    Path(path).write_text(json.dumps({"sequence": name, "fov_deg": fov_deg, "frames": frames}, indent=1) + "\n")


# --------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    index: int
    tx: float
    ty: float
    tz: float
    qw: float
    qx: float
    qy: float
    qz: float
    failed: bool = False
    keyframes: list[int] = field(default_factory=list)
    loss_F: float | None = None
    loss_S: float | None = None

    @property
    def pose(self) -> Pose:
        return Pose([self.tx, self.ty, self.tz], [self.qw, self.qx, self.qy, self.qz])

    @classmethod
    def from_pose(cls, index: int, pose: Pose, **extra) -> "TrajectoryRecord":
        t, q = np.asarray(pose.translation, float), np.asarray(pose.rotation, float)
        return cls(index, *map(float, t), *map(float, q), **extra)


def _finite_or_none(x):
    return float(x) if x is not None and np.isfinite(x) else None


def trajectory_from_state(state) -> list[TrajectoryRecord]:
    recs = []
    for out in state.outputs:
        recs.append(TrajectoryRecord.from_pose(
            out.index, out.pose, failed=bool(out.failed), keyframes=list(out.keyframes),
            loss_F=_finite_or_none(out.result.loss_f), loss_S=_finite_or_none(out.result.loss_s)))
    return recs


def write_trajectory(path, records: list[TrajectoryRecord]) -> None:
    # json writes floats with repr, so values round-trip exactly
    doc = {"fields": list(TRAJECTORY_FIELDS), "frames": [asdict(r) for r in records]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_trajectory(path) -> list[TrajectoryRecord]:
    doc = json.loads(Path(path).read_text())
    return [TrajectoryRecord(**r) for r in doc["frames"]]


# --------------------------------------------------------------------------
# exports


def overlay(image: np.ndarray, mask: np.ndarray, colour=(255, 0, 0), alpha: float = 0.45) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.max() <= 1.0 and not np.issubdtype(np.asarray(image).dtype, np.integer):
        img = img * 255.0
    out = img.copy()
    out[mask] = (1 - alpha) * img[mask] + alpha * np.asarray(colour, dtype=np.float64)
    return np.rint(out).astype(np.uint8)


def export_outputs(state, out_dir, rgb_frames: dict[int, np.ndarray] | None = None) -> dict[str, Path]:
    """Write trajectory, mesh, silhouettes, texture and overlays under ``out_dir``.

    ``rgb_frames`` maps frame index to RGB; it feeds the texture
    back-projection (keyframes only) and the overlays.
    """
    from .tracker import backproject_rgb

    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    paths = {"trajectory": out / "trajectory.json", "mesh": out / "mesh.obj", "masks": out / "masks"}
    write_trajectory(paths["trajectory"], trajectory_from_state(state))
    if state.outputs:
        write_obj(paths["mesh"], state.mesh)
    for o in state.outputs:
        write_mask(out / "masks" / f"{o.index:04d}.png", o.segmentation)
    if rgb_frames and state.outputs:
        kf = [i for i in state.keyframes.indices if i in rgb_frames] or sorted(rgb_frames)
        tex, _ = backproject_rgb(state, {i: rgb_frames[i] for i in kf})
        paths["texture"] = out / "texture_rgb.png"
        write_rgb(paths["texture"], tex.data)
        (out / "overlays").mkdir(exist_ok=True)
        paths["overlays"] = out / "overlays"
        for o in state.outputs:
            if o.index in rgb_frames:
                write_rgb(out / "overlays" / f"{o.index:04d}.png", overlay(rgb_frames[o.index], o.segmentation))
    return paths


def write_synthetic(seq, out_dir) -> Path:
    """Write a generated sequence as a manifest plus ground truth; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("frames", "masks", "gt_masks", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for n, (frame, mask, gt) in enumerate(zip(seq.frames, seq.masks, seq.gt_masks)):
        name = f"{n:04d}"
        write_rgb(out / "frames" / f"{name}.png", frame)
        write_mask(out / "masks" / f"{name}.png", mask)
        write_mask(out / "gt_masks" / f"{name}.png", gt)
        save_feature_map(out / "features" / f"{name}.ften", frame)
        entries.append({"image": f"frames/{name}.png", "mask": f"masks/{name}.png",
                        "features": f"features/{name}.ften", "gt_mask": f"gt_masks/{name}.png"})
    manifest = out / "manifest.json"
    write_manifest(manifest, entries, name=f"synthetic-{seq.spec.object}", fov_deg=seq.camera.fov_deg)
    write_trajectory(out / "gt_trajectory.json", [TrajectoryRecord.from_pose(n, p) for n, p in enumerate(seq.poses)])
    return manifest
