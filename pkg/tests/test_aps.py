import numpy as np
import pytest

from exposim.aps import (
    REASON_NOT_VISIBLE,
    REASON_TOO_CLOSE,
    avg_jacobian,
    candidate_set,
    heuristic_score,
    point_segment_distance,
    select_position,
)
from exposim.errors import SelectionError
from exposim.exposure import DissectionSegment, init_observation, observe
from exposim.geometry import bind_material_point, gen_wedge_phantom
from exposim.perception import CameraModel, VisibilityMask, render_visibility
from exposim.xpbd import SimConfig, default_constraints, init_sim


def brute_force_svd_score(j, alpha):
    """Independent oracle: SVD of a 2x3 matrix via eigen-decomposition of J J^T."""
    jjt = j @ j.T
    vals, vecs = np.linalg.eigh(jjt)
    order = np.argsort(vals)[::-1]
    sigmas = np.sqrt(np.maximum(vals[order], 0.0))
    u = vecs[:, order]
    cos_w = np.abs(u[0, :])
    cos_s = np.abs(u[1, :])
    iw = 0 if cos_w[0] >= cos_w[1] else 1
    is_ = 0 if cos_s[0] > cos_s[1] else 1
    if is_ == iw:
        is_ = 1 - iw
    return cos_w[iw] * sigmas[iw] - alpha * cos_s[is_] * sigmas[is_]


# ---------------------------------------------------------------------------
# heuristic score
# ---------------------------------------------------------------------------

def test_diagonal_case():
    m, decomp = heuristic_score(np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), alpha=0.1)
    assert m == pytest.approx(1.9, abs=1e-12)
    assert decomp["singular_values"][0] == pytest.approx(2.0)


def test_pure_shear_candidate_penalized():
    m, _ = heuristic_score(np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), alpha=0.1)
    assert m == pytest.approx(-0.1, abs=1e-12)


def test_zero_matrix_scores_zero():
    m, _ = heuristic_score(np.zeros((2, 3)), alpha=0.5)
    assert m == 0.0


def test_heuristic_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        j = rng.normal(0, 1, (2, 3))
        m, _ = heuristic_score(j, alpha=0.1)
        assert m == pytest.approx(brute_force_svd_score(j, 0.1), abs=1e-10)


def test_score_scales_linearly():
    rng = np.random.default_rng(5)
    j = rng.normal(0, 1, (2, 3))
    m1, _ = heuristic_score(j, alpha=0.1)
    m2, _ = heuristic_score(3.0 * j, alpha=0.1)
    assert m2 == pytest.approx(3.0 * m1, rel=1e-12)


def test_svd_orthonormal_and_ordered():
    rng = np.random.default_rng(8)
    for _ in range(50):
        _, d = heuristic_score(rng.normal(0, 1, (2, 3)), alpha=0.1)
        u = d["u"]
        s = d["singular_values"]
        assert np.abs(u.T @ u - np.eye(2)).max() < 1e-10
        assert s[0] >= s[1] >= 0
        assert d["wedge_index"] != d["shear_index"]


# ---------------------------------------------------------------------------
# candidate set
# ---------------------------------------------------------------------------

def wedge_scene():
    mesh = gen_wedge_phantom(45.0, size=(0.06, 0.05, 0.024), resolution=(8, 3, 3),
                             groove_depth=0.014)
    sim = init_sim(mesh, default_constraints(mesh, distance_compliance=1.5,
                                             shape_compliance=30.0), SimConfig())
    state = sim.state()
    q1 = bind_material_point(mesh.surface, [0.0205, 0.0, 0.01], state)
    q2 = bind_material_point(mesh.surface, [0.0405, 0.0, 0.01], state)
    seg = DissectionSegment(q1, q2)
    features = init_observation(mesh.surface, state, seg,
                                ks=(0.0, 0.5, 1.0), radii=(0.003, 0.006), wedge_target=-1.0)
    cam = CameraModel.look_at((0.031, 0.055, 0.081), (0.0305, 0.0, 0.01), up=(1, 0, 0),
                              fov_deg=40, width=128, height=96)
    vis = render_visibility(cam, mesh.surface, state)
    return mesh, sim, state, seg, features, vis


def test_full_visibility_zero_lmin_all_feasible(slab):
    state = slab.rest_state()
    vis = VisibilityMask(visible=np.ones(slab.surface.face_count, dtype=bool), timestamp=0)
    a = np.array([0.02, 0.0, 0.01])
    b = np.array([0.06, 0.0, 0.01])
    cands = candidate_set(slab.surface, state, vis, a, b, l_min=0.0)
    assert all(c.feasible for c in cands)


def test_lmin_excludes_near_faces():
    mesh, sim, state, seg, features, vis = wedge_scene()
    a, b = seg.endpoints(mesh.surface, state)
    cands = candidate_set(mesh.surface, state, vis, a, b, l_min=0.005)
    cents = mesh.surface.centroids(state.positions)
    d = point_segment_distance(cents, a, b)
    for c in cands:
        if vis.visible[c.face] and d[c.face] < 0.005:
            assert not c.feasible
            assert c.reason == REASON_TOO_CLOSE


def test_invisible_faces_infeasible():
    mesh, sim, state, seg, features, vis = wedge_scene()
    a, b = seg.endpoints(mesh.surface, state)
    cands = candidate_set(mesh.surface, state, vis, a, b, l_min=0.0)
    for c in cands:
        if not vis.visible[c.face]:
            assert not c.feasible and c.reason == REASON_NOT_VISIBLE


def test_empty_feasible_set_raises(slab):
    state = slab.rest_state()
    vis = VisibilityMask(visible=np.zeros(slab.surface.face_count, dtype=bool), timestamp=0)
    with pytest.raises(SelectionError):
        candidate_set(slab.surface, state, vis, np.zeros(3), np.ones(3), l_min=0.0)


# ---------------------------------------------------------------------------
# averaged Jacobian
# ---------------------------------------------------------------------------

def test_avg_jacobian_matches_direct_fd():
    mesh, sim, state, seg, features, vis = wedge_scene()
    cents = mesh.surface.centroids(state.positions)
    normals, _ = mesh.surface.normals_areas(state.positions)
    a, b = seg.endpoints(mesh.surface, state)
    d = point_segment_distance(cents, a, b)
    face = int(np.nonzero((normals[:, 2] > 0.9) & (d > 0.008) & (cents[:, 1] > 0))[0][0])
    j_avg = avg_jacobian(sim, face, features)

    # direct FD of the averaged metrics through the solver
    n = features.pair_count
    h = sim.config.fd_delta
    fd = np.zeros((2, 3))
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        vals = []
        for sign in (+1.0, -1.0):
            work = sim.clone()
            c = work.couple_face(face)
            st = work.solve_quasistatic(c.p0 + sign * e)
            obs = observe(features, mesh.surface, st)
            vals.append(np.array([obs[:n].mean(), obs[n:2 * n].mean()]))
        fd[:, axis] = (vals[0] - vals[1]) / (2 * h)
    rel = np.linalg.norm(j_avg - fd) / np.linalg.norm(fd)
    assert rel < 1e-3


def test_avg_jacobian_restores_state():
    mesh, sim, state, seg, features, vis = wedge_scene()
    before = sim.positions.copy()
    avg_jacobian(sim, 10, features)
    assert np.array_equal(sim.positions, before)
    assert sim.coupling is None


def test_symmetric_slab_bisector_shear_row_vanishes(slab):
    # segment along the slab midline; candidate on the perpendicular bisector
    sim = init_sim(slab, default_constraints(slab, distance_compliance=1.5,
                                             shape_compliance=30.0), SimConfig())
    state = sim.state()
    q1 = bind_material_point(slab.surface, [0.02, 0.0, 0.01], state)
    q2 = bind_material_point(slab.surface, [0.06, 0.0, 0.01], state)
    seg = DissectionSegment(q1, q2)
    features = init_observation(slab.surface, state, seg, ks=(0.25, 0.5, 0.75),
                                radii=(0.005, 0.01), wedge_target=-1.0)
    cents = slab.surface.centroids(state.positions)
    normals, _ = slab.surface.normals_areas(state.positions)
    top = normals[:, 2] > 0.99
    # candidate nearest the perpendicular bisector plane of the segment
    score = np.where(top, np.abs(cents[:, 0] - 0.04) + np.abs(np.abs(cents[:, 1]) - 0.02), np.inf)
    face = int(np.argmin(score))
    j_avg = avg_jacobian(sim, face, features)
    wedge_row = np.linalg.norm(j_avg[0])
    shear_row = np.linalg.norm(j_avg[1])
    assert wedge_row > 0
    assert shear_row < 1e-3 * wedge_row


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def test_selection_consistent_with_map():
    mesh, sim, state, seg, features, vis = wedge_scene()
    best, score_map = select_position(sim, mesh.surface, state, vis, features,
                                      alpha=0.1, l_min=0.005, stride=6)
    scored = [c for c in score_map if c.score is not None]
    assert len(scored) >= 2
    assert best.score == max(c.score for c in scored)
    winners = [c for c in scored if c.score == best.score]
    assert best.face == min(w.face for w in winners)


def test_single_feasible_candidate_selected(slab):
    sim = init_sim(slab, default_constraints(slab, shape_compliance=5.0), SimConfig())
    state = sim.state()
    q1 = bind_material_point(slab.surface, [0.02, 0.0, 0.01], state)
    q2 = bind_material_point(slab.surface, [0.06, 0.0, 0.01], state)
    seg = DissectionSegment(q1, q2)
    features = init_observation(slab.surface, state, seg, ks=(0.5,), radii=(0.01,),
                                wedge_target=-1.0)
    vis = VisibilityMask(visible=np.zeros(slab.surface.face_count, dtype=bool), timestamp=0)
    cents = slab.surface.centroids(state.positions)
    a, b = seg.endpoints(slab.surface, state)
    far = np.nonzero(point_segment_distance(cents, a, b) > 0.015)[0]
    vis.visible[far[0]] = True
    best, score_map = select_position(sim, slab.surface, state, vis, features,
                                      alpha=0.1, l_min=0.005)
    assert best.face == far[0]


def test_scaling_invariance_of_argmax():
    rng = np.random.default_rng(3)
    mats = [rng.normal(0, 1, (2, 3)) for _ in range(10)]
    scores = [heuristic_score(j, 0.1)[0] for j in mats]
    scaled = [heuristic_score(4.0 * j, 0.1)[0] for j in mats]
    assert np.argmax(scores) == np.argmax(scaled)
    assert np.allclose(scaled, [4.0 * s for s in scores], rtol=1e-12)
