"""Differentiable triangle rasterizer.

Foreground pixels get a hard z-buffered face with screen-space barycentrics
and a bilinear texture lookup; gradients reach the vertices only through the
barycentric interpolation. Pixels outside every face get a soft silhouette

    S(p) = 1 - prod_f (1 - exp(-d(p, f)^2 / sigma))

where ``d`` is the 2D distance from the pixel center to triangle ``f`` in
normalized device units (image height spans 2 units). Covered pixels have
S = 1. Faces only contribute to pixels inside their screen bounding box
inflated by ``bbox_inflation * sqrt(sigma)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import (
    Camera,
    DeformableMesh,
    FeatureTexture,
    Pose,
    deformed_vertices,
    normalize_quaternion,
    quat_matrix_jacobian,
    quat_to_matrix,
    tangent_gradient,
)

_SATURATED = 1e-6


@dataclass(frozen=True)
class RenderConfig:
    sigma: float = 1e-4
    bbox_inflation: float = 3.0
    near: float = 1e-3
    texture_filter: str = "bilinear"
    cull_backfaces: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.texture_filter != "bilinear":
            raise ValueError("only bilinear texture filtering is implemented")


@dataclass(eq=False)
class RenderOutput:
    feature_image: np.ndarray  # H x W x D
    soft_silhouette: np.ndarray  # H x W
    depth: np.ndarray  # H x W, inf on background
    face_index: np.ndarray  # H x W, -1 on background
    barycentrics: np.ndarray  # H x W x 3
    n_soft_faces: np.ndarray  # H x W, faces feeding the soft silhouette
    screen: np.ndarray  # V x 3 projected (u, v, depth)
    camera_vertices: np.ndarray  # V x 3

    @property
    def coverage(self) -> np.ndarray:
        return self.face_index >= 0


@dataclass
class RenderGradients:
    offsets: np.ndarray
    texture: np.ndarray
    translation: np.ndarray
    rotation: np.ndarray


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _project(cam_verts, focal, cx, cy):
    n = cam_verts.shape[0]
    out = np.empty((n, 3))
    for i in range(n):
        z = cam_verts[i, 2]
        d = -z
        if d > 0.0:
            out[i, 0] = cx + focal * cam_verts[i, 0] / d
            out[i, 1] = cy - focal * cam_verts[i, 1] / d
        else:
            out[i, 0] = 0.0
            out[i, 1] = 0.0
        out[i, 2] = d
    return out


@njit(cache=True)
def _face_valid(screen, faces, near, cull):
    nf = faces.shape[0]
    valid = np.zeros(nf, dtype=np.bool_)
    for f in range(nf):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        if screen[a, 2] < near or screen[b, 2] < near or screen[c, 2] < near:
            continue
        x0, y0 = screen[a, 0], screen[a, 1]
        x1, y1 = screen[b, 0], screen[b, 1]
        x2, y2 = screen[c, 0], screen[c, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        # counter-clockwise in object space shows up clockwise on screen (v points down)
        if cull and area > 0.0:
            continue
        valid[f] = True
    return valid


@njit(cache=True)
def _sample(tex, tu, tv, out):
    """Bilinear lookup at uv in [0, 1]^2; v = 1 is texture row 0."""
    ht, wt, nc = tex.shape
    x = min(max(tu, 0.0), 1.0) * (wt - 1)
    y = (1.0 - min(max(tv, 0.0), 1.0)) * (ht - 1)
    x0 = min(int(math.floor(x)), wt - 2)
    y0 = min(int(math.floor(y)), ht - 2)
    fx = x - x0
    fy = y - y0
    for c in range(nc):
        out[c] = ((1 - fx) * (1 - fy) * tex[y0, x0, c] + fx * (1 - fy) * tex[y0, x0 + 1, c]
                  + (1 - fx) * fy * tex[y0 + 1, x0, c] + fx * fy * tex[y0 + 1, x0 + 1, c])
    return x0, y0, fx, fy


@njit(cache=True)
def _point_triangle_dist2(px, py, xs, ys):
    """Squared distance to a triangle's boundary and the argmin edge/param."""
    best = 1e300
    best_e = 0
    best_t = 0.0
    for e in range(3):
        ax, ay = xs[e], ys[e]
        bx, by = xs[(e + 1) % 3], ys[(e + 1) % 3]
        ex, ey = bx - ax, by - ay
        ll = ex * ex + ey * ey
        t = 0.0
        if ll > 0.0:
            t = ((px - ax) * ex + (py - ay) * ey) / ll
            t = min(max(t, 0.0), 1.0)
        qx = px - ax - t * ex
        qy = py - ay - t * ey
        d2 = qx * qx + qy * qy
        if d2 < best:
            best = d2
            best_e = e
            best_t = t
    return best, best_e, best_t


@njit(cache=True)
def _rasterize(screen, faces, face_uv, valid, tex, height, width, sigma_px2, inflate_px):
    nf = faces.shape[0]
    nc = tex.shape[2]
    face_index = -np.ones((height, width), dtype=np.int64)
    depth = np.full((height, width), np.inf)
    bary = np.zeros((height, width, 3))
    xs = np.empty(3)
    ys = np.empty(3)
    ds = np.empty(3)

    for f in range(nf):
        if not valid[f]:
            continue
        for k in range(3):
            xs[k] = screen[faces[f, k], 0]
            ys[k] = screen[faces[f, k], 1]
            ds[k] = screen[faces[f, k], 2]
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        j0 = max(int(math.ceil(min(xs[0], xs[1], xs[2]) - 0.5)), 0)
        j1 = min(int(math.floor(max(xs[0], xs[1], xs[2]) - 0.5)), width - 1)
        i0 = max(int(math.ceil(min(ys[0], ys[1], ys[2]) - 0.5)), 0)
        i1 = min(int(math.floor(max(ys[0], ys[1], ys[2]) - 0.5)), height - 1)
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                px = j + 0.5
                w0 = ((xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py)) / area
                w1 = ((xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py)) / area
                w2 = ((xs[0] - px) * (ys[1] - py) - (xs[1] - px) * (ys[0] - py)) / area
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = 1.0 / (w0 / ds[0] + w1 / ds[1] + w2 / ds[2])
                if z < depth[i, j]:
                    depth[i, j] = z
                    face_index[i, j] = f
                    bary[i, j, 0] = w0
                    bary[i, j, 1] = w1
                    bary[i, j, 2] = w2

    feat = np.zeros((height, width, nc))
    buf = np.empty(nc)
    for i in range(height):
        for j in range(width):
            f = face_index[i, j]
            if f < 0:
                continue
            tu = 0.0
            tv = 0.0
            for k in range(3):
                tu += bary[i, j, k] * face_uv[f, k, 0]
                tv += bary[i, j, k] * face_uv[f, k, 1]
            _sample(tex, tu, tv, buf)
            for c in range(nc):
                feat[i, j, c] = buf[c]

    prod = np.ones((height, width))
    nsoft = np.zeros((height, width), dtype=np.int64)
    for f in range(nf):
        if not valid[f]:
            continue
        for k in range(3):
            xs[k] = screen[faces[f, k], 0]
            ys[k] = screen[faces[f, k], 1]
        j0 = max(int(math.ceil(min(xs[0], xs[1], xs[2]) - inflate_px - 0.5)), 0)
        j1 = min(int(math.floor(max(xs[0], xs[1], xs[2]) + inflate_px - 0.5)), width - 1)
        i0 = max(int(math.ceil(min(ys[0], ys[1], ys[2]) - inflate_px - 0.5)), 0)
        i1 = min(int(math.floor(max(ys[0], ys[1], ys[2]) + inflate_px - 0.5)), height - 1)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                if face_index[i, j] >= 0:
                    continue
                d2, _, _ = _point_triangle_dist2(j + 0.5, i + 0.5, xs, ys)
                prod[i, j] *= 1.0 - math.exp(-d2 / sigma_px2)
                nsoft[i, j] += 1
    sil = 1.0 - prod
    for i in range(height):
        for j in range(width):
            if face_index[i, j] >= 0:
                sil[i, j] = 1.0
    return feat, sil, depth, face_index, bary, nsoft


@njit(cache=True)
def _backward(screen, faces, face_uv, valid, tex, face_index, bary, sil,
              g_feat, g_sil, sigma_px2, inflate_px):
    height, width = face_index.shape
    ht, wt, nc = tex.shape
    nv = screen.shape[0]
    g_screen = np.zeros((nv, 2))
    g_tex = np.zeros_like(tex)
    xs = np.empty(3)
    ys = np.empty(3)
    buf = np.empty(nc)
    gb = np.empty(3)

    # foreground: texture weights and barycentric interpolation
    for i in range(height):
        py = i + 0.5
        for j in range(width):
            f = face_index[i, j]
            if f < 0:
                continue
            px = j + 0.5
            tu = 0.0
            tv = 0.0
            for k in range(3):
                tu += bary[i, j, k] * face_uv[f, k, 0]
                tv += bary[i, j, k] * face_uv[f, k, 1]
            x0, y0, fx, fy = _sample(tex, tu, tv, buf)
            dfdx = 0.0
            dfdy = 0.0
            for c in range(nc):
                g = g_feat[i, j, c]
                if g == 0.0:
                    continue
                g_tex[y0, x0, c] += g * (1 - fx) * (1 - fy)
                g_tex[y0, x0 + 1, c] += g * fx * (1 - fy)
                g_tex[y0 + 1, x0, c] += g * (1 - fx) * fy
                g_tex[y0 + 1, x0 + 1, c] += g * fx * fy
                ddx = (1 - fy) * (tex[y0, x0 + 1, c] - tex[y0, x0, c]) + fy * (tex[y0 + 1, x0 + 1, c] - tex[y0 + 1, x0, c])
                ddy = (1 - fx) * (tex[y0 + 1, x0, c] - tex[y0, x0, c]) + fx * (tex[y0 + 1, x0 + 1, c] - tex[y0, x0 + 1, c])
                dfdx += g * ddx
                dfdy += g * ddy
            # clamp-to-edge kills the derivative outside [0, 1]
            g_tu = dfdx * (wt - 1) if 0.0 < tu < 1.0 else 0.0
            g_tv = -dfdy * (ht - 1) if 0.0 < tv < 1.0 else 0.0
            if g_tu == 0.0 and g_tv == 0.0:
                continue
            for k in range(3):
                gb[k] = g_tu * face_uv[f, k, 0] + g_tv * face_uv[f, k, 1]
            for k in range(3):
                xs[k] = screen[faces[f, k], 0]
                ys[k] = screen[faces[f, k], 1]
            area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
            # dA/d(x_k, y_k)
            for m in range(3):
                m1 = (m + 1) % 3
                m2 = (m + 2) % 3
                dadx = ys[m1] - ys[m2]
                dady = xs[m2] - xs[m1]
                gx = 0.0
                gy = 0.0
                for k in range(3):
                    # numerator E_k depends on vertices k+1, k+2
                    k1 = (k + 1) % 3
                    k2 = (k + 2) % 3
                    dex = 0.0
                    dey = 0.0
                    if m == k1:
                        dex = ys[k2] - py
                        dey = -(xs[k2] - px)
                    elif m == k2:
                        dex = -(ys[k1] - py)
                        dey = xs[k1] - px
                    gx += gb[k] * (dex - bary[i, j, k] * dadx) / area
                    gy += gb[k] * (dey - bary[i, j, k] * dady) / area
                vi = faces[f, m]
                g_screen[vi, 0] += gx
                g_screen[vi, 1] += gy

    # exterior soft silhouette
    for f in range(faces.shape[0]):
        if not valid[f]:
            continue
        for k in range(3):
            xs[k] = screen[faces[f, k], 0]
            ys[k] = screen[faces[f, k], 1]
        j0 = max(int(math.ceil(min(xs[0], xs[1], xs[2]) - inflate_px - 0.5)), 0)
        j1 = min(int(math.floor(max(xs[0], xs[1], xs[2]) + inflate_px - 0.5)), width - 1)
        i0 = max(int(math.ceil(min(ys[0], ys[1], ys[2]) - inflate_px - 0.5)), 0)
        i1 = min(int(math.floor(max(ys[0], ys[1], ys[2]) + inflate_px - 0.5)), height - 1)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                if face_index[i, j] >= 0 or g_sil[i, j] == 0.0:
                    continue
                px = j + 0.5
                py = i + 0.5
                d2, e, t = _point_triangle_dist2(px, py, xs, ys)
                ef = math.exp(-d2 / sigma_px2)
                one_minus = 1.0 - ef
                if one_minus > _SATURATED:
                    others = (1.0 - sil[i, j]) / one_minus
                else:
                    others = _others_product(screen, faces, valid, f, px, py, sigma_px2, inflate_px)
                g_d2 = g_sil[i, j] * others * (-ef / sigma_px2)
                a = e
                b = (e + 1) % 3
                wx = px - xs[a] - t * (xs[b] - xs[a])
                wy = py - ys[a] - t * (ys[b] - ys[a])
                va = faces[f, a]
                vb = faces[f, b]
                g_screen[va, 0] += g_d2 * (-2.0 * wx * (1.0 - t))
                g_screen[va, 1] += g_d2 * (-2.0 * wy * (1.0 - t))
                g_screen[vb, 0] += g_d2 * (-2.0 * wx * t)
                g_screen[vb, 1] += g_d2 * (-2.0 * wy * t)
    return g_screen, g_tex


@njit(cache=True)
def _others_product(screen, faces, valid, skip, px, py, sigma_px2, inflate_px):
    """Product of (1 - e_g) over candidate faces g != skip at one pixel."""
    xs = np.empty(3)
    ys = np.empty(3)
    p = 1.0
    for f in range(faces.shape[0]):
        if f == skip or not valid[f]:
            continue
        for k in range(3):
            xs[k] = screen[faces[f, k], 0]
            ys[k] = screen[faces[f, k], 1]
        lo_x = math.ceil(min(xs[0], xs[1], xs[2]) - inflate_px - 0.5) + 0.5
        hi_x = math.floor(max(xs[0], xs[1], xs[2]) + inflate_px - 0.5) + 0.5
        lo_y = math.ceil(min(ys[0], ys[1], ys[2]) - inflate_px - 0.5) + 0.5
        hi_y = math.floor(max(ys[0], ys[1], ys[2]) + inflate_px - 0.5) + 0.5
        if px < lo_x or px > hi_x or py < lo_y or py > hi_y:
            continue
        d2, _, _ = _point_triangle_dist2(px, py, xs, ys)
        p *= 1.0 - math.exp(-d2 / sigma_px2)
    return p


# --------------------------------------------------------------------------


def _sigma_px2(camera: Camera, cfg: RenderConfig) -> float:
    # NDC spans the image height with 2 units
    return cfg.sigma * (camera.height / 2.0) ** 2


def _inflate_px(camera: Camera, cfg: RenderConfig) -> float:
    return cfg.bbox_inflation * math.sqrt(cfg.sigma) * camera.height / 2.0


def render(mesh: DeformableMesh, texture: FeatureTexture | np.ndarray, pose: Pose,
           camera: Camera, cfg: RenderConfig = RenderConfig()) -> RenderOutput:
    """Render features, soft silhouette, depth, face index and barycentrics."""
    tex = texture.data if isinstance(texture, FeatureTexture) else np.asarray(texture, dtype=np.float64)
    rot = quat_to_matrix(pose.rotation)
    cam_verts = deformed_vertices(mesh) @ rot.T + pose.translation
    screen = _project(cam_verts, camera.focal, *camera.center)
    valid = _face_valid(screen, mesh.faces, cfg.near, cfg.cull_backfaces)
    feat, sil, depth, fidx, bary, nsoft = _rasterize(
        screen, mesh.faces, mesh.face_uv, valid, tex, camera.height, camera.width,
        _sigma_px2(camera, cfg), _inflate_px(camera, cfg))
    return RenderOutput(feat, sil, depth, fidx, bary, nsoft, screen, cam_verts)


def render_backward(output: RenderOutput, mesh: DeformableMesh, texture: FeatureTexture | np.ndarray,
                    pose: Pose, camera: Camera, cfg: RenderConfig,
                    grad_feature: np.ndarray | None, grad_silhouette: np.ndarray | None) -> RenderGradients:
    """Gradients of a scalar loss given its gradients w.r.t. the render buffers.

    The rotation gradient is taken w.r.t. the raw quaternion, which amounts to
    projecting onto the tangent of the unit sphere.
    """
    tex = texture.data if isinstance(texture, FeatureTexture) else np.asarray(texture, dtype=np.float64)
    h, w = output.face_index.shape
    if grad_feature is None:
        grad_feature = np.zeros_like(output.feature_image)
    if grad_silhouette is None:
        grad_silhouette = np.zeros((h, w))
    grad_feature = np.ascontiguousarray(grad_feature, dtype=np.float64)
    grad_silhouette = np.ascontiguousarray(grad_silhouette, dtype=np.float64)
    if grad_feature.shape != output.feature_image.shape or grad_silhouette.shape != (h, w):
        raise ValueError("upstream gradient shapes do not match the render buffers")

    screen = output.screen
    valid = _face_valid(screen, mesh.faces, cfg.near, cfg.cull_backfaces)
    g_screen, g_tex = _backward(
        screen, mesh.faces, mesh.face_uv, valid, tex, output.face_index, output.barycentrics,
        output.soft_silhouette, grad_feature, grad_silhouette,
        _sigma_px2(camera, cfg), _inflate_px(camera, cfg))

    # screen (u, v) -> camera space
    cv = output.camera_vertices
    z = cv[:, 2]
    f = camera.focal
    safe = np.where(z < 0, z, -1.0)
    g_cam = np.zeros_like(cv)
    g_cam[:, 0] = g_screen[:, 0] * (-f / safe)
    g_cam[:, 1] = g_screen[:, 1] * (f / safe)
    g_cam[:, 2] = g_screen[:, 0] * (f * cv[:, 0] / safe**2) - g_screen[:, 1] * (f * cv[:, 1] / safe**2)
    g_cam[z >= 0] = 0.0

    rot = quat_to_matrix(pose.rotation)
    obj = deformed_vertices(mesh)
    g_offsets = g_cam @ rot
    g_rot_mat = g_cam.T @ obj
    qn = normalize_quaternion(pose.rotation)
    g_qn = np.einsum("kij,ij->k", quat_matrix_jacobian(qn), g_rot_mat)
    return RenderGradients(
        offsets=g_offsets,
        texture=g_tex,
        translation=g_cam.sum(axis=0),
        rotation=tangent_gradient(pose.rotation, g_qn),
    )
