import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rendertrack.geometry import Pose, make_prototype_sphere, quat_from_axis_angle
from rendertrack.losses import (
    LossError,
    LossWeights,
    Term,
    appearance_frame,
    appearance_loss,
    cauchy,
    distance_transform,
    laplacian_loss,
    motion_loss,
    silhouette_frame,
    silhouette_loss,
    soft_iou,
    total_loss,
    tv_loss,
)

IDENT = [1.0, 0.0, 0.0, 0.0]


def brute_dt(mask):
    h, w = mask.shape
    fg = np.argwhere(mask)
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = np.sqrt(((fg - [i, j]) ** 2).sum(axis=1).min())
    return out / math.hypot(h, w)


# -- Cauchy ---------------------------------------------------------------


def test_cauchy_values():
    assert cauchy(0.0) == 0.0
    assert cauchy(0.25) == pytest.approx(math.log(2.0), rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5, allow_nan=False))
def test_cauchy_symmetric_nonnegative(r):
    assert cauchy(r) >= 0 and cauchy(r) == cauchy(-r)


# -- appearance -----------------------------------------------------------


def test_appearance_zero_on_exact_match(rng):
    obs = rng.uniform(size=(4, 4, 3))
    sil = rng.uniform(size=(4, 4))
    assert appearance_frame(obs, sil, obs)[0] == 0.0


def test_appearance_brute_force(rng):
    r, o = rng.uniform(size=(4, 4, 2)), rng.uniform(size=(4, 4, 2))
    s = rng.uniform(size=(4, 4))
    num = 0.0
    for i, j, c in itertools.product(range(4), range(4), range(2)):
        x = s[i, j] * (r[i, j, c] - o[i, j, c]) / 0.25
        num += math.log(1 + x * x)
    assert appearance_frame(r, s, o)[0] == pytest.approx(num / (2 * s.sum()), abs=1e-10)


def test_appearance_empty_silhouette_degenerate(rng):
    v, gR, gS, degenerate = appearance_frame(rng.uniform(size=(4, 4, 3)), np.zeros((4, 4)), rng.uniform(size=(4, 4, 3)))
    assert v == 0.0 and degenerate and not gR.any() and not gS.any()


def test_appearance_multi_frame_mu(rng):
    frames = [(rng.uniform(size=(4, 4, 1)), rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4, 1))) for _ in range(3)]
    out = appearance_loss(*[list(x) for x in zip(*frames)])
    assert out.value == pytest.approx(sum(appearance_frame(*f)[0] for f in frames) / 3, abs=1e-12)


def test_appearance_gradients_fd(rng):
    r, o, s = rng.uniform(size=(4, 4, 2)), rng.uniform(size=(4, 4, 2)), rng.uniform(0.1, 1, size=(4, 4))
    _, gR, gS, _ = appearance_frame(r, s, o)
    h = 1e-7
    for idx in [(0, 0), (2, 3), (3, 1)]:
        sp, sm = s.copy(), s.copy()
        sp[idx] += h
        sm[idx] -= h
        fd = (appearance_frame(r, sp, o)[0] - appearance_frame(r, sm, o)[0]) / (2 * h)
        assert gS[idx] == pytest.approx(fd, rel=1e-6)
        rp, rm = r.copy(), r.copy()
        rp[idx + (1,)] += h
        rm[idx + (1,)] -= h
        fd = (appearance_frame(rp, s, o)[0] - appearance_frame(rm, s, o)[0]) / (2 * h)
        assert gR[idx + (1,)] == pytest.approx(fd, rel=1e-6)


# -- silhouette -----------------------------------------------------------


def test_soft_iou_both_empty():
    assert soft_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_silhouette_zero_on_perfect_match():
    m = np.zeros((4, 4), dtype=bool)
    m[1:3, 1:3] = True
    dt, _ = distance_transform(m)
    assert silhouette_frame(m, m.astype(float), dt)[0] == 0.0


def test_silhouette_brute_force(rng):
    m = rng.uniform(size=(4, 4)) > 0.5
    m[0, 0] = True
    s = rng.uniform(size=(4, 4))
    dt = brute_dt(m)
    inter = sum(float(m[i, j]) * s[i, j] for i in range(4) for j in range(4))
    union = sum(float(m[i, j]) + s[i, j] - float(m[i, j]) * s[i, j] for i in range(4) for j in range(4))
    dt_avg = sum(dt[i, j] * s[i, j] for i in range(4) for j in range(4)) / s.sum()
    assert silhouette_frame(m, s, dt)[0] == pytest.approx(1 - inter / union + dt_avg, abs=1e-10)


def test_silhouette_gradient_fd(rng):
    m = rng.uniform(size=(5, 5)) > 0.6
    m[2, 2] = True
    s = rng.uniform(size=(5, 5))
    dt, _ = distance_transform(m)
    _, g = silhouette_frame(m, s, dt)
    h = 1e-7
    for idx in itertools.product(range(5), repeat=2):
        sp, sm = s.copy(), s.copy()
        sp[idx] += h
        sm[idx] -= h
        fd = (silhouette_frame(m, sp, dt)[0] - silhouette_frame(m, sm, dt)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_silhouette_far_away_gradient_nonzero():
    # disjoint silhouettes: the IoU term is flat but the DT term still pulls
    m = np.zeros((16, 16), dtype=bool)
    m[:4, :4] = True
    s = np.zeros((16, 16))
    s[12:, 12:] = 1.0
    s[11, 12] = 0.5
    dt, _ = distance_transform(m)
    _, g = silhouette_frame(m, s, dt)
    assert np.abs(g).max() > 0


def test_silhouette_loss_mu(rng):
    masks = [rng.uniform(size=(4, 4)) > 0.5 for _ in range(2)]
    for m in masks:
        m[1, 1] = True
    sils = [rng.uniform(size=(4, 4)) for _ in range(2)]
    dts = [distance_transform(m)[0] for m in masks]
    out = silhouette_loss(masks, sils, dts)
    assert out.value == pytest.approx(np.mean([silhouette_frame(*a)[0] for a in zip(masks, sils, dts)]), abs=1e-12)


# -- distance transform ---------------------------------------------------


def test_distance_transform_values():
    m = np.zeros((3, 4), dtype=bool)
    m[0, 0] = True
    dt, empty = distance_transform(m)
    assert not empty
    assert dt[2, 3] * 5.0 == pytest.approx(math.sqrt(13), rel=1e-15)


def test_distance_transform_empty():
    dt, empty = distance_transform(np.zeros((4, 4), dtype=bool))
    assert empty and (dt == 1.0).all()


def test_distance_transform_sample_exact(rng):
    for _ in range(10):
        m = rng.uniform(size=(9, 7)) > 0.85
        if m.any():
            np.testing.assert_array_equal(distance_transform(m)[0], brute_dt(m))


# -- motion ---------------------------------------------------------------


def test_motion_below_thresholds_zero():
    a = Pose([0, 0, -2], IDENT)
    b = Pose([0.05, 0, -2], quat_from_axis_angle([0, 1, 0], 10.0))
    assert motion_loss(b, a, 1).value == 0.0


def test_motion_translation_hinge():
    a = Pose([0, 0, -2], IDENT)
    b = Pose([0.25, 0, -2], IDENT)
    assert motion_loss(b, a, 1).value == pytest.approx(0.15, abs=1e-12)


def test_motion_gap_scales_rate():
    a = Pose([0, 0, -2], IDENT)
    b = Pose([0.5, 0, -2], IDENT)
    assert motion_loss(b, a, 2).value == pytest.approx(0.15, abs=1e-12)


def test_motion_rotation_hinge():
    a = Pose([0, 0, -2], IDENT)
    b = Pose([0, 0, -2], quat_from_axis_angle([0, 0, 1], 50.0))
    assert motion_loss(b, a, 1).value == pytest.approx(20.0, abs=1e-9)


def test_motion_gradients_fd(rng):
    a = Pose([0.0, 0.1, -2.0], quat_from_axis_angle([1, 0, 0], 10.0))
    b = Pose([0.3, -0.2, -2.1], quat_from_axis_angle([0, 1, 1], 80.0))
    term = motion_loss(b, a, 1)
    h = 1e-7
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (motion_loss(Pose(b.translation + e, b.rotation), a, 1).value
              - motion_loss(Pose(b.translation - e, b.rotation), a, 1).value) / (2 * h)
        assert term.grads["translation"][k] == pytest.approx(fd, rel=1e-6, abs=1e-9)
    q = b.rotation
    fd = np.zeros(4)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd[k] = (motion_loss(Pose(b.translation, q + e), a, 1).value
                 - motion_loss(Pose(b.translation, q - e), a, 1).value) / (2 * h)
    np.testing.assert_allclose(term.grads["rotation"], fd - q * (q @ fd), rtol=1e-5, atol=1e-6)


def test_motion_rejects_nonpositive_gap():
    with pytest.raises(ValueError):
        motion_loss(Pose([0, 0, -1], IDENT), Pose([0, 0, -1], IDENT), 0)


# -- regularizers ---------------------------------------------------------


# undeformed default sphere, frozen from the neighbour-set computation below
LAPLACIAN_SPHERE_BASELINE = 3.83604883713827e-05


def test_laplacian_regression_baseline(sphere):
    assert laplacian_loss(sphere).value == pytest.approx(LAPLACIAN_SPHERE_BASELINE, rel=1e-9)


def test_laplacian_matches_neighbour_sets(rng):
    m = make_prototype_sphere(9, 6)
    m = m.with_offsets(rng.normal(0, 0.05, m.prototype_vertices.shape))
    assert laplacian_loss(m).value == pytest.approx(_independent_laplacian(m), abs=1e-12)


def _independent_laplacian(mesh):
    v = mesh.prototype_vertices + mesh.offsets
    nb = [set() for _ in range(len(v))]
    for a, b, c in mesh.faces:
        nb[a] |= {b, c}
        nb[b] |= {a, c}
        nb[c] |= {a, b}
    d = np.array([v[i] - v[list(n)].mean(axis=0) for i, n in enumerate(nb)])
    return float((d * d).sum(axis=1).mean())


def test_laplacian_scales_quadratically():
    m = make_prototype_sphere(12, 8)
    scaled = m.with_offsets(m.prototype_vertices)  # doubles every coordinate
    assert laplacian_loss(scaled).value == pytest.approx(4 * laplacian_loss(m).value, rel=1e-12)


def test_laplacian_translation_invariant(sphere):
    moved = sphere.with_offsets(np.broadcast_to([0.3, -1.0, 2.0], sphere.offsets.shape))
    assert laplacian_loss(moved).value == pytest.approx(laplacian_loss(sphere).value, rel=1e-12)


def test_laplacian_gradient_fd(rng):
    m = make_prototype_sphere(6, 5)
    off = rng.normal(0, 0.05, m.prototype_vertices.shape)
    term = laplacian_loss(m.with_offsets(off))
    d = rng.normal(size=off.shape)
    h = 1e-6
    fd = (laplacian_loss(m.with_offsets(off + h * d)).value - laplacian_loss(m.with_offsets(off - h * d)).value) / (2 * h)
    assert (term.grads["offsets"] * d).sum() == pytest.approx(fd, rel=1e-7)


def test_tv_zero_on_constant():
    assert tv_loss(np.full((5, 5, 3), 0.7)).value == 0.0


def test_tv_brute_force(rng):
    t = rng.uniform(size=(3, 4, 2))
    vals = []
    for i, j in itertools.product(range(3), range(4)):
        for di, dj in ((0, 1), (1, 0)):
            if i + di < 3 and j + dj < 4:
                d = np.linalg.norm(t[i + di, j + dj] - t[i, j])
                vals.append(math.log(1 + (d / 0.25) ** 2))
    assert tv_loss(t).value == pytest.approx(np.mean(vals), abs=1e-10)


def test_tv_gradient_fd(rng):
    t = rng.uniform(size=(4, 5, 2))
    g = tv_loss(t).grads["texture"]
    h = 1e-7
    for idx in [(0, 0, 0), (2, 3, 1), (3, 4, 0)]:
        tp, tm = t.copy(), t.copy()
        tp[idx] += h
        tm[idx] -= h
        assert g[idx] == pytest.approx((tv_loss(tp).value - tv_loss(tm).value) / (2 * h), rel=1e-6)


# -- total ----------------------------------------------------------------


def test_total_unit_terms():
    terms = {k: Term(1.0) for k in ("appearance", "silhouette", "motion", "laplacian", "tv")}
    assert total_loss(terms).value == pytest.approx(1003.001, abs=1e-9)


def test_total_rejects_non_finite():
    with pytest.raises(LossError, match="laplacian"):
        total_loss({"laplacian": Term(float("nan"))})


def test_total_rejects_unknown_term():
    with pytest.raises(KeyError):
        total_loss({"bogus": Term(1.0)})


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(tv=-1.0)
