"""Per-frame appearance features.

The identity encoding just rescales RGB to [0, 1]. Deep features are
computed elsewhere and read from ``.ften`` files:

    b"FTEN" | uint32 height | uint32 width | uint32 channels | float32 data

all little-endian, data row-major with the channel index fastest.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FTEN"
_HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    pass


@dataclass(eq=False)
class FeatureImage:
    data: np.ndarray  # H x W x D

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("feature image must be (H, W, D)")
        if not np.isfinite(self.data).all():
            raise ValueError("feature image contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def encode_identity(image) -> FeatureImage:
    """RGB image (uint8 or float in [0, 1]) to a 3-channel feature image."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3]
    if np.issubdtype(img.dtype, np.integer):
        return FeatureImage(img.astype(np.float64) / 255.0)
    return FeatureImage(np.clip(img.astype(np.float64), 0.0, 1.0))


def decode_identity(features: FeatureImage) -> np.ndarray:
    return np.clip(np.rint(features.data * 255.0), 0, 255).astype(np.uint8)


def save_feature_map(path, data) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError("feature map must be (H, W, D)")
    h, w, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, h, w, d))
        fh.write(arr.tobytes())


def read_feature_array(path) -> np.ndarray:
    """Raw float32 payload of a ``.ften`` file, shape (H, W, D)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: file shorter than the header")
    magic, h, w, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    expected = h * w * d * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FeatureFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    if not np.isfinite(arr).all():
        raise FeatureFormatError(f"{path}: non-finite values")
    return arr


def resize_bilinear(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    h, w = data.shape[:2]
    if (h, w) == (height, width):
        return data
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), max(h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(int), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = data[y0][:, x0] * (1 - fx) + data[y0][:, x1] * fx
    bot = data[y1][:, x0] * (1 - fx) + data[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def load_feature_map(path, height: int | None = None, width: int | None = None) -> FeatureImage:
    """Load a ``.ften`` file, optionally upsampling to (height, width)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    arr = read_feature_array(path).astype(np.float64)
    if height is not None and width is not None:
        arr = resize_bilinear(arr, height, width)
    return FeatureImage(arr)
