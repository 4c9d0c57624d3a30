"""Mesh, pose, camera and texture types.

Coordinate convention: right-handed, y up. The camera sits at the world
origin looking down -z, so visible points have negative z and positive depth
``d = -z``. Pixel coordinates put (0, 0) at the top-left corner of the image;
pixel ``(row i, col j)`` has its center at ``(u, v) = (j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DeformableMesh:
    """Prototype mesh plus per-vertex offsets; topology and UVs never change.

    ``uv`` holds one texture coordinate per vertex. ``face_uv`` holds the
    per-corner coordinates actually used for texturing, which differ from
    ``uv`` only across the longitude seam where corners are duplicated.
    """

    prototype_vertices: np.ndarray
    offsets: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    face_uv: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "prototype_vertices", _frozen(self.prototype_vertices))
        object.__setattr__(self, "offsets", _frozen(self.offsets))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64))
        object.__setattr__(self, "uv", _frozen(self.uv))
        object.__setattr__(self, "face_uv", _frozen(self.face_uv))
        n = len(self.prototype_vertices)
        if self.prototype_vertices.shape != (n, 3) or self.offsets.shape != (n, 3):
            raise ValueError("vertices and offsets must both be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face references an invalid vertex index")
        if self.uv.shape != (n, 2):
            raise ValueError("uv must be (V, 2)")
        if self.face_uv.shape != (len(self.faces), 3, 2):
            raise ValueError("face_uv must be (F, 3, 2)")
        used = np.zeros(n, dtype=bool)
        used[self.faces.ravel()] = True
        if not used.all():
            raise ValueError(f"{int((~used).sum())} vertices belong to no face")

    @property
    def n_vertices(self) -> int:
        return len(self.prototype_vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_offsets(self, offsets) -> "DeformableMesh":
        return DeformableMesh(self.prototype_vertices, offsets, self.faces, self.uv, self.face_uv)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 vertex adjacency built from face edges."""
        f = self.faces
        rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
        cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_vertices,) * 2)
        a.data[:] = 1.0
        return a

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.asarray(self.adjacency.sum(axis=1)).ravel()
        if (deg == 0).any():
            raise ValueError("mesh has an isolated vertex")
        return deg

    @cached_property
    def laplacian_operator(self) -> sp.csr_matrix:
        """Sparse ``I - D^-1 A`` so that ``L @ v`` gives the uniform Laplacian."""
        inv = sp.diags(1.0 / self.degrees)
        return (sp.identity(self.n_vertices, format="csr") - inv @ self.adjacency).tocsr()


def deformed_vertices(mesh: DeformableMesh) -> np.ndarray:
    return mesh.prototype_vertices + mesh.offsets


def make_prototype_sphere(segments: int = 55, rings: int = 23) -> DeformableMesh:
    """Latitude/longitude sphere of unit diameter centered at the origin.

    Has ``(rings - 1) * segments + 2`` vertices; the default 55 x 23 gives
    1212. Poles lie on the y axis. Faces are wound counter-clockwise seen
    from outside.
    """
    if segments < 3 or rings < 3:
        raise ValueError(f"need segments >= 3 and rings >= 3, got {segments}, {rings}")
    r = 0.5
    verts = [(0.0, r, 0.0)]
    uv = [(0.5, 1.0)]
    for k in range(1, rings):
        theta = math.pi * k / rings
        for j in range(segments):
            phi = 2.0 * math.pi * j / segments
            verts.append((r * math.sin(theta) * math.cos(phi), r * math.cos(theta),
                          -r * math.sin(theta) * math.sin(phi)))
            uv.append((j / segments, 1.0 - k / rings))
    verts.append((0.0, -r, 0.0))
    uv.append((0.5, 0.0))
    south = len(verts) - 1

    def ring(k, j):
        return 1 + (k - 1) * segments + (j % segments)

    def ring_uv(k, j):
        return (j / segments, 1.0 - k / rings)

    faces, face_uv = [], []
    for j in range(segments):
        faces.append((0, ring(1, j), ring(1, j + 1)))
        face_uv.append(((0.5, 1.0), ring_uv(1, j), ring_uv(1, j + 1)))
    for k in range(1, rings - 1):
        for j in range(segments):
            a, b = ring(k, j), ring(k, j + 1)
            c, d = ring(k + 1, j), ring(k + 1, j + 1)
            faces.append((a, c, d))
            face_uv.append((ring_uv(k, j), ring_uv(k + 1, j), ring_uv(k + 1, j + 1)))
            faces.append((a, d, b))
            face_uv.append((ring_uv(k, j), ring_uv(k + 1, j + 1), ring_uv(k, j + 1)))
    for j in range(segments):
        faces.append((south, ring(rings - 1, j + 1), ring(rings - 1, j)))
        face_uv.append(((0.5, 0.0), ring_uv(rings - 1, j + 1), ring_uv(rings - 1, j)))

    verts = np.array(verts)
    return DeformableMesh(verts, np.zeros_like(verts), np.array(faces), np.array(uv), np.array(face_uv))


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def uniform_laplacian(mesh: DeformableMesh, vertices: np.ndarray | None = None) -> np.ndarray:
    """Per-vertex ``v_i - mean(1-ring neighbours of i)``."""
    if vertices is None:
        vertices = deformed_vertices(mesh)
    # sum first, then divide: exact zero on regular grids with integer coordinates
    return vertices - (mesh.adjacency @ vertices) / mesh.degrees[:, None]


# --------------------------------------------------------------------------
# quaternions, (w, x, y, z) order

def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not n > 0.0:
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = normalize_quaternion(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_matrix_jacobian(qn) -> np.ndarray:
    """d R / d q for a unit quaternion, shape (4, 3, 3)."""
    w, x, y, z = qn
    return 2.0 * np.array([
        [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
    ])


def tangent_gradient(q, grad_unit) -> np.ndarray:
    """Pull a gradient w.r.t. the normalized quaternion back to the raw one.

    This is the projection onto the tangent space of the unit sphere, scaled
    by ``1 / |q|``.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    qn = q / n
    return (grad_unit - qn * (qn @ grad_unit)) / n


def quat_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_from_axis_angle(axis, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = math.radians(degrees) / 2.0
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_angle_deg(q1, q2) -> float:
    """Rotation angle between two quaternions; q and -q are the same rotation."""
    c = abs(float(normalize_quaternion(q1) @ normalize_quaternion(q2)))
    return math.degrees(2.0 * math.acos(min(c, 1.0)))


@dataclass(frozen=True, eq=False)
class Pose:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen(self.translation))
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        if self.translation.shape != (3,) or self.rotation.shape != (4,):
            raise ValueError("pose needs a 3-vector translation and a 4-vector quaternion")

    def normalized(self) -> "Pose":
        return Pose(self.translation, normalize_quaternion(self.rotation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        return points @ quat_to_matrix(self.rotation).T + self.translation


def pose_to_matrix(pose: Pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = quat_to_matrix(pose.rotation)
    m[:3, 3] = pose.translation
    return m


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Fixed pinhole camera with square pixels and a centered principal point."""

    width: int
    height: int
    fov_deg: float = 45.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("vertical field of view must lie in (0, 180)")

    @property
    def focal(self) -> float:
        """Focal length in pixels, from the vertical field of view."""
        return (self.height / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def center(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0


def project(camera: Camera, points) -> np.ndarray:
    """Camera-space points (..., 3) to ``(u, v, depth)`` (..., 3).

    Raises ValueError if any point is at or behind the camera plane.
    """
    p = np.asarray(points, dtype=np.float64)
    depth = -p[..., 2]
    if np.any(depth <= 0.0):
        raise ValueError("point at or behind the camera plane")
    f = camera.focal
    cx, cy = camera.center
    return np.stack([cx + f * p[..., 0] / depth, cy - f * p[..., 1] / depth, depth], axis=-1)


def unproject(camera: Camera, u, v, depth) -> np.ndarray:
    f = camera.focal
    cx, cy = camera.center
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    return np.stack([(u - cx) * depth / f, -(v - cy) * depth / f, -depth], axis=-1)


# --------------------------------------------------------------------------

@dataclass(eq=False)
class FeatureTexture:
    """H x W x D grid of appearance features sampled through the UV map."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] < 2 or self.data.shape[1] < 2:
            raise ValueError("texture must be (H, W, D) with H, W >= 2")
        if not np.isfinite(self.data).all():
            raise ValueError("texture contains non-finite values")

    @classmethod
    def zeros(cls, channels: int, size: int = 300) -> "FeatureTexture":
        return cls(np.zeros((size, size, channels)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


# --------------------------------------------------------------------------
# Wavefront OBJ

OBJ_HEADER = (
    "# rendertrack mesh\n"
    "# axes: right-handed, +y up; camera looks down -z; object-space coordinates\n"
)


def write_obj(path, mesh: DeformableMesh) -> None:
    verts = deformed_vertices(mesh)
    uvs, inverse = np.unique(mesh.face_uv.reshape(-1, 2), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1, 3)
    lines = [OBJ_HEADER]
    lines += [f"v {x!r} {y!r} {z!r}\n" for x, y, z in verts.tolist()]
    lines += [f"vt {u!r} {v!r}\n" for u, v in uvs.tolist()]
    for (a, b, c), (ta, tb, tc) in zip(mesh.faces.tolist(), inverse.tolist()):
        lines.append(f"f {a + 1}/{ta + 1} {b + 1}/{tb + 1} {c + 1}/{tc + 1}\n")
    Path(path).write_text("".join(lines))


def read_obj(path) -> DeformableMesh:
    """Read an OBJ with ``v``/``vt``/``f`` records into a zero-offset mesh."""
    verts, uvs, faces, face_uv_idx = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError("only triangle faces are supported")
            corners = [p.split("/") for p in parts[1:]]
            faces.append([int(c[0]) - 1 for c in corners])
            face_uv_idx.append([int(c[1]) - 1 if len(c) > 1 and c[1] else -1 for c in corners])
    verts = np.array(verts, dtype=np.float64)
    faces = np.array(faces, dtype=np.int64)
    uvs = np.array(uvs, dtype=np.float64).reshape(-1, 2)
    face_uv_idx = np.array(face_uv_idx, dtype=np.int64)
    if (face_uv_idx < 0).any():
        face_uv = np.zeros((len(faces), 3, 2))
    else:
        face_uv = uvs[face_uv_idx]
    vert_uv = np.zeros((len(verts), 2))
    # first corner referencing a vertex defines its per-vertex uv
    for fi in range(len(faces) - 1, -1, -1):
        vert_uv[faces[fi]] = face_uv[fi]
    return DeformableMesh(verts, np.zeros_like(verts), faces, vert_uv, face_uv)
