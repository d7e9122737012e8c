"""Acceptance suite: one test per criterion, each printing a PASS line.

The closed-loop criteria (5 and 6) share one set of paired runs over five
matched seeds; expect the full module to take roughly 15-25 minutes.
Run it with `pytest tests/test_acceptance.py -s` to see the per-criterion
lines as they complete.
"""

import time

import numpy as np
import pytest

from exposim.aps import avg_jacobian, heuristic_score, select_position
from exposim.exposure import observation_jacobian, observe
from exposim.geometry import ParticleState, gen_wedge_phantom
from exposim.harness import Scenario, compare_aps, run_assist_request
from exposim.perception import (
    CameraModel,
    PointCloud,
    chamfer,
    estimate_state,
    render_visibility,
    synth_point_cloud,
)
from exposim.xpbd import SimConfig, default_constraints, init_sim

from conftest import make_wedge_features
from test_aps import brute_force_svd_score, wedge_scene
from test_perception import _zbuffer_oracle, top_camera, visible_vertex_rmse


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def stock_scenario(**overrides) -> Scenario:
    """The reference-parameter wedge scenario used for the closed-loop criteria."""
    sc = Scenario(**overrides)
    # reference values, restated here so drift in the defaults cannot hide
    assert sc.ring_radii == (0.003, 0.006, 0.009)
    assert sc.ring_ks == (0.0, 0.25, 0.5, 0.75, 1.0)
    assert sc.gamma_v == sc.gamma_w == 1.5
    assert sc.kp == 3e-4 and sc.kd == 1e-5
    assert sc.max_step == 8e-4 and sc.steps == 40
    assert sc.l_min == 0.005 and sc.alpha == 0.1
    assert sc.phantom_angle == 45.0
    return sc


FIXED_POINT = (0.0305, -0.008, 0.024)  # ~1.6 cm from the dissection segment


@pytest.fixture(scope="module")
def paired_runs():
    """Five matched seeds, APS vs fixed assistance position (criteria 5 + 6)."""
    t0 = time.perf_counter()
    table = compare_aps(stock_scenario(), FIXED_POINT, n=5)
    table["wall_time"] = time.perf_counter() - t0
    return table


def test_criterion_1_observation_jacobian_oracle(wedge90):
    t0 = time.perf_counter()
    _, features, _ = make_wedge_features(wedge90, apex_z=0.012,
                                         radii=(0.003, 0.006, 0.009))
    assert wedge90.vertex_count <= 500
    surf = wedge90.surface
    rng = np.random.default_rng(17)
    base = wedge90.rest_state()
    h = 1e-7
    worst = 0.0
    for _ in range(20):
        state = ParticleState(base.positions + rng.normal(0, 2e-4, base.positions.shape))
        jac = observation_jacobian(features, surf, state)
        cols = np.nonzero(np.any(jac != 0.0, axis=0))[0]
        fd = np.zeros((features.size, len(cols)))
        for j, col in enumerate(cols):
            vi, axis = divmod(int(col), 3)
            sp = state.copy()
            sp.positions[vi, axis] += h
            sm = state.copy()
            sm.positions[vi, axis] -= h
            fd[:, j] = (observe(features, surf, sp) - observe(features, surf, sm)) / (2 * h)
        rel = np.linalg.norm(jac[:, cols] - fd) / np.linalg.norm(fd)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-4 and elapsed < 30.0,
           f"J_O vs FD worst rel err {worst:.2e} over 20 states "
           f"({wedge90.vertex_count} vertices) in {elapsed:.1f}s")


def test_criterion_2_solver_contract(wedge45, small_free_mesh):
    sim = init_sim(wedge45, default_constraints(wedge45, distance_compliance=1.5,
                                                shape_compliance=30.0), SimConfig())
    x0 = sim.positions.copy()
    rest = sim.solve_quasistatic()
    rest_identity = np.array_equal(rest.positions, x0)

    surf = wedge45.surface
    normals, _ = surf.normals_areas(sim.positions)
    cents = surf.centroids(sim.positions)
    face = int(np.nonzero((normals[:, 2] > 0.9) & (cents[:, 1] > 0.008))[0][0])
    coupling = sim.couple_face(face)
    worst_hard = 0.0
    worst_resid = 0.0
    for axis in range(3):
        for sign in (1.0, -1.0):
            step = np.zeros(3)
            step[axis] = sign * 1e-4
            sim.solve_quasistatic(coupling.p0 + step)
            worst_hard = max(worst_hard, sim.hard_constraint_violation())
            worst_resid = max(worst_resid, sim.constraint_residual())

    free = init_sim(small_free_mesh)
    c = free.couple_face(0)
    free.solve_quasistatic(c.p0)
    jac = free.deformation_jacobian(c.p0)
    jd_err = float(np.abs(jac.reshape(-1, 3, 3) - np.eye(3)).max())

    ok = rest_identity and worst_hard <= 1e-9 and worst_resid <= 1e-4 and jd_err <= 1e-6
    report(2, ok,
           f"rest identity {rest_identity}; hard {worst_hard:.1e} <= 1e-9; "
           f"residual {worst_resid:.2e} <= 1e-4; free-float J_d err {jd_err:.1e} <= 1e-6")


def test_criterion_3_geometry_oracles(slab, wedge90_features):
    from exposim.exposure import DissectionSegment, RingSpec, ring_surface_intersection
    from exposim.geometry import bind_material_point

    state = slab.rest_state()
    q1 = bind_material_point(slab.surface, [0.021, 0.0, 0.01], state)
    q2 = bind_material_point(slab.surface, [0.0585, 0.0, 0.01], state)
    seg = DissectionSegment(q1, q2)
    r = 0.02
    v, w = ring_surface_intersection(slab.surface, state, RingSpec(radius=r, k=0.5), seg)
    c = seg.point(slab.surface, state, 0.5)
    slab_err = max(np.abs(v - (c + [0, r, 0])).max(), np.abs(w - (c - [0, r, 0])).max())

    mesh, _, features, wstate = wedge90_features
    obs = observe(features, mesh.surface, wstate)
    n = features.pair_count
    wedge_err = float(np.abs(obs[:n]).max())
    shear_err = float(np.abs(obs[n:2 * n] - 1.0).max())

    ok = slab_err < 1e-12 and wedge_err < 1e-3 and shear_err < 1e-6
    report(3, ok,
           f"slab ring points err {slab_err:.1e}; 90deg wedge cosine |{wedge_err:.1e}| < 1e-3; "
           f"binding shear err {shear_err:.1e} < 1e-6")


def test_criterion_4_aps_consistency(slab):
    # selected score equals map maximum
    mesh, sim, state, seg, features, vis = wedge_scene()
    best, score_map = select_position(sim, mesh.surface, state, vis, features,
                                      alpha=0.1, l_min=0.005, stride=6)
    scored = [c.score for c in score_map if c.score is not None]
    consistent = best.score == max(scored)

    # brute-force SVD oracle on 1000 random matrices
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        j = rng.normal(0, 1, (2, 3))
        m, _ = heuristic_score(j, alpha=0.1)
        worst = max(worst, abs(m - brute_force_svd_score(j, 0.1)))

    # symmetric flat slab: shear row vanishes at the bisector candidate
    from exposim.exposure import DissectionSegment, init_observation
    from exposim.geometry import bind_material_point

    ssim = init_sim(slab, default_constraints(slab, distance_compliance=1.5,
                                              shape_compliance=30.0), SimConfig())
    sstate = ssim.state()
    q1 = bind_material_point(slab.surface, [0.02, 0.0, 0.01], sstate)
    q2 = bind_material_point(slab.surface, [0.06, 0.0, 0.01], sstate)
    sseg = DissectionSegment(q1, q2)
    sfeat = init_observation(slab.surface, sstate, sseg, ks=(0.25, 0.5, 0.75),
                             radii=(0.005, 0.01), wedge_target=-1.0)
    cents = slab.surface.centroids(sstate.positions)
    normals, _ = slab.surface.normals_areas(sstate.positions)
    top = normals[:, 2] > 0.99
    dist = np.where(top, np.abs(cents[:, 0] - 0.04) + np.abs(np.abs(cents[:, 1]) - 0.02), np.inf)
    j_avg = avg_jacobian(ssim, int(np.argmin(dist)), sfeat)
    ratio = np.linalg.norm(j_avg[1]) / np.linalg.norm(j_avg[0])

    ok = consistent and worst < 1e-10 and ratio < 1e-3
    report(4, ok,
           f"argmax==map max: {consistent}; SVD oracle worst {worst:.1e} < 1e-10; "
           f"bisector shear/wedge row ratio {ratio:.1e} < 1e-3")


def test_criterion_5_closed_loop_wedge(paired_runs):
    sc = stock_scenario()
    mesh = sc.build_mesh()
    assert mesh.vertex_count <= 2000
    aps_reports = paired_runs["aps"]["reports"]
    successes = sum(r["rho"] >= 1.25 for r in aps_reports)
    wedge_drops = all(
        r["final_wedge_error_norm"] < r["initial_wedge_error_norm"] for r in aps_reports
    )
    slowest = max(r["timings"]["total"] for r in aps_reports)
    ok = successes >= 4 and wedge_drops and slowest <= 300.0
    rhos = [round(r["rho"], 3) for r in aps_reports]
    report(5, ok,
           f"rho {rhos} -> {successes}/5 runs >= 1.25; wedge error decreased: {wedge_drops}; "
           f"slowest run {slowest:.0f}s <= 300s ({mesh.vertex_count} particles)")


def test_criterion_6_aps_benefit(paired_runs):
    mean_aps = paired_runs["aps"]["mean_rho"]
    mean_fixed = paired_runs["fixed"]["mean_rho"]
    ok = mean_aps >= mean_fixed
    report(6, ok,
           f"mean rho APS {mean_aps:.3f} vs fixed point {mean_fixed:.3f} "
           f"(std {paired_runs['aps']['std_rho']:.3f} / {paired_runs['fixed']['std_rho']:.3f})")


def test_criterion_7_registration(wedge45):
    """Known-deformation recovery at two operating points.

    The Chamfer data term cannot observe tangential motion, so one deformation
    amplitude cannot exercise both bounds meaningfully: the noiseless 0.1 mm
    bound is probed at per-step tracking scale (0.4 mm push, initial error
    above the bound), the noisy 2-sigma bound at a multi-millimeter
    deformation, asserting genuine improvement over the initial error.
    """
    cam = top_camera()
    cons = lambda: default_constraints(wedge45, distance_compliance=1.5,
                                       shape_compliance=30.0)

    def deform(push_mm, steps):
        world = init_sim(wedge45, cons(), SimConfig())
        normals, _ = wedge45.surface.normals_areas(world.positions)
        cents = wedge45.surface.centroids(world.positions)
        elig = np.nonzero((normals[:, 2] > 0.9) & (cents[:, 1] > 0.012) & (cents[:, 1] < 0.02))[0]
        face = int(elig[np.argmin(np.abs(cents[elig, 0] - 0.03))])
        c = world.couple_face(face)
        for i in range(steps):
            world.solve_quasistatic(c.p0 + np.array([0.0, 0.0, -push_mm * 1e-3]) * (i + 1) / steps)
        truth = world.state()
        vis = render_visibility(cam, wedge45.surface, truth)
        init = visible_vertex_rmse(wedge45, vis, wedge45.rest_state(), truth)
        return truth, vis, init

    def recover(truth, vis, sigma, samples, seed, weight, iters):
        est_sim = init_sim(wedge45, cons(), SimConfig(chamfer_weight=weight, iterations=iters))
        cloud = synth_point_cloud(cam, wedge45.surface, truth, vis, samples=samples,
                                  sigma=sigma, seed=seed)
        est = estimate_state(est_sim, cloud, vis)
        return visible_vertex_rmse(wedge45, vis, est, truth)

    sigma = 5e-4
    truth_c, vis_c, init_c = deform(0.4, steps=2)
    rmse_clean = recover(truth_c, vis_c, 0.0, 20000, 22, weight=0.8, iters=200)

    truth_n, vis_n, init_n = deform(4.0, steps=8)
    rmse_noisy = recover(truth_n, vis_n, sigma, 8000, 21, weight=0.6, iters=150)

    ok = (rmse_clean < 1e-4 and init_c > 1e-4
          and rmse_noisy < 2 * sigma and rmse_noisy < 0.8 * init_n)
    report(7, ok,
           f"noiseless: {init_c * 1e3:.3f}mm -> {rmse_clean * 1e3:.4f}mm (< 0.1mm); "
           f"noisy: {init_n * 1e3:.3f}mm -> {rmse_noisy * 1e3:.3f}mm "
           f"(< {2 * sigma * 1e3:.1f}mm and < 80% of initial)")


def test_criterion_8_chamfer_and_visibility_oracles():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(5):
        a = rng.normal(0, 1, (100, 3))
        b = rng.normal(0, 1, (100, 3))
        brute = (
            np.min(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), axis=1).sum()
            + np.min(((b[:, None, :] - a[None, :, :]) ** 2).sum(-1), axis=1).sum()
        )
        worst = max(worst, abs(chamfer(a, PointCloud(points=b, noise_sigma=0.0)) - brute))

    convex = gen_wedge_phantom(180.0, size=(0.04, 0.03, 0.008), resolution=(3, 1, 1))
    state = convex.rest_state()
    cam = CameraModel.look_at((0.033, 0.021, 0.06), (0.02, 0.012, 0.004), up=(1, 0, 0),
                              fov_deg=45, width=64, height=48)
    vis = render_visibility(cam, convex.surface, state)
    oracle = _zbuffer_oracle(cam, convex.surface, state)
    exact = bool(np.array_equal(vis.visible, oracle))

    ok = worst < 1e-12 and exact
    report(8, ok,
           f"chamfer vs brute force worst {worst:.1e} < 1e-12; "
           f"visibility equals z-buffer oracle: {exact}")


def test_criterion_9_determinism():
    sc = Scenario(name="determinism", phantom_resolution=(6, 2, 2), steps=3,
                  stride=12, cloud_samples=600, camera_width=96, camera_height=72,
                  ring_ks=(0.0, 0.5, 1.0), ring_radii=(0.003, 0.006))
    a = run_assist_request(sc, seed=13)
    b = run_assist_request(sc, seed=13)
    ok = a.digest() == b.digest() and a.rho == b.rho
    report(9, ok, f"repeated run digest {a.digest()[:12]} == {b.digest()[:12]}; rho {a.rho:.4f}")
