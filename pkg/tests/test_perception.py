import math

import numpy as np
import pytest

from exposim.errors import PerceptionError
from exposim.geometry import TetMesh
from exposim.perception import (
    CameraModel,
    PointCloud,
    chamfer,
    estimate_state,
    render_first_hit,
    render_visibility,
    sample_visible_surface,
    synth_point_cloud,
    synth_segmentation,
)
from exposim.xpbd import SimConfig, default_constraints, init_sim


def top_camera(width=128, height=96, pos=(0.033, 0.012, 0.1), target=(0.03, 0.0, 0.01)):
    return CameraModel.look_at(pos, target, up=(1, 0, 0), fov_deg=45, width=width, height=height)


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------

def one_triangle_mesh(z=0.0):
    verts = np.array([
        [0.0, 0.0, z], [0.05, 0.0, z], [0.0, 0.05, z], [0.02, 0.02, z - 0.02],
    ])
    tets = np.array([[0, 2, 1, 3]])  # apex below: wind for positive volume
    return TetMesh.build(verts, tets)


def test_single_facing_triangle_visible():
    mesh = one_triangle_mesh()
    cam = top_camera(pos=(0.015, 0.015, 0.08), target=(0.015, 0.015, 0.0))
    vis = render_visibility(cam, mesh.surface, mesh.rest_state())
    normals, _ = mesh.surface.normals_areas(mesh.vertices)
    top_face = int(np.argmax(normals[:, 2]))
    assert vis.visible[top_face]


def test_occluded_face_invisible(wedge45):
    state = wedge45.rest_state()
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, state)
    normals, _ = wedge45.surface.normals_areas(state.positions)
    bottom = normals[:, 2] < -0.99
    assert not np.any(vis.visible & bottom)


def test_segmentation_masks_rays(wedge45):
    state = wedge45.rest_state()
    cam = top_camera()
    first_hit, _ = render_first_hit(cam, wedge45.surface, state)
    seg = synth_segmentation(cam, wedge45.surface, state, first_hit=first_hit)
    assert seg.dtype == bool
    assert seg.sum() == (first_hit >= 0).sum()
    # masking everything kills visibility
    vis = render_visibility(cam, wedge45.surface, state, seg_mask=np.zeros_like(seg))
    assert vis.count() == 0


def test_empty_scene_segmentation():
    mesh = one_triangle_mesh()
    cam = top_camera(pos=(10.0, 10.0, 10.0), target=(10.0, 10.0, 9.0))
    seg = synth_segmentation(cam, mesh.surface, mesh.rest_state())
    assert not seg.any()


def _zbuffer_oracle(camera, surface, state):
    """Per-pixel rasterizer with barycentric depth; lowest face wins ties."""
    h, w = camera.height, camera.width
    depth = np.full((h, w), np.inf)
    ids = np.full((h, w), -1, dtype=np.int64)
    tris_world = state.positions[surface.faces]
    for fi, tri_w in enumerate(tris_world):
        tri = camera.to_camera(tri_w)
        if np.any(tri[:, 2] <= 1e-9):
            continue
        uv = np.stack([
            camera.fx * tri[:, 0] / tri[:, 2] + camera.cx,
            camera.fy * tri[:, 1] / tri[:, 2] + camera.cy,
        ], axis=1)
        lo = np.floor(uv.min(axis=0) - 1).astype(int)
        hi = np.ceil(uv.max(axis=0) + 1).astype(int)
        for py in range(max(lo[1], 0), min(hi[1] + 1, h)):
            for px in range(max(lo[0], 0), min(hi[0] + 1, w)):
                p = np.array([px + 0.5, py + 0.5])
                d = np.array([uv[1] - uv[0], uv[2] - uv[0]]).T
                try:
                    st = np.linalg.solve(d, p - uv[0])
                except np.linalg.LinAlgError:
                    continue
                s, t = st
                if s < 0 or t < 0 or s + t > 1:
                    continue
                # perspective-correct depth: interpolate 1/z linearly in screen space
                inv_z = (1 - s - t) / tri[0, 2] + s / tri[1, 2] + t / tri[2, 2]
                z = 1.0 / inv_z
                if z < depth[py, px]:
                    depth[py, px] = z
                    ids[py, px] = fi
    visible = np.zeros(surface.face_count, dtype=bool)
    hit = ids[ids >= 0]
    if hit.size:
        visible[np.unique(hit)] = True
    return visible


def test_visibility_matches_zbuffer_oracle_convex():
    # convex phantom: a flat slab seen from an oblique camera
    from exposim.geometry import gen_wedge_phantom

    slab = gen_wedge_phantom(180.0, size=(0.04, 0.03, 0.008), resolution=(3, 1, 1))
    state = slab.rest_state()
    cam = top_camera(width=64, height=48, pos=(0.033, 0.021, 0.06), target=(0.02, 0.012, 0.004))
    vis = render_visibility(cam, slab.surface, state)
    oracle = _zbuffer_oracle(cam, slab.surface, state)
    assert np.array_equal(vis.visible, oracle)


def test_removing_occluder_grows_visible_set():
    # two stacked parallel triangles; dropping the top one exposes the lower
    verts = np.array([
        [0.0, 0.0, 0.01], [0.04, 0.0, 0.01], [0.0, 0.04, 0.01], [0.013, 0.013, -0.005],
        [0.0, 0.0, 0.03], [0.04, 0.0, 0.03], [0.0, 0.04, 0.03], [0.013, 0.013, 0.045],
    ])
    tets = np.array([[0, 2, 1, 3], [4, 5, 6, 7]])  # lower apex down, upper apex up
    both = TetMesh.build(verts, tets)
    lower_only = TetMesh.build(verts[:4], tets[:1])
    cam = top_camera(pos=(0.013, 0.013, 0.1), target=(0.013, 0.013, 0.0))
    vis_both = render_visibility(cam, both.surface, both.rest_state())
    vis_lower = render_visibility(cam, lower_only.surface, lower_only.rest_state())
    # faces of the lower tet occupy the same indices in both meshes
    lower_faces_visible_before = vis_both.visible[: lower_only.surface.face_count]
    assert vis_lower.visible.sum() >= lower_faces_visible_before.sum()
    assert not lower_faces_visible_before.any()  # fully covered by the upper tet


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

def test_noiseless_cloud_lies_on_surface(wedge45):
    state = wedge45.rest_state()
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, state)
    cloud = synth_point_cloud(cam, wedge45.surface, state, vis, samples=500, sigma=0.0, seed=1)
    from exposim.geometry import closest_point_on_triangles

    tris = state.positions[wedge45.surface.faces]
    for p in cloud.points[::50]:
        pts, _ = closest_point_on_triangles(p, tris)
        d = np.linalg.norm(pts - p, axis=1).min()
        assert d < 1e-12


def test_cloud_seeded_determinism(wedge45):
    state = wedge45.rest_state()
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, state)
    a = synth_point_cloud(cam, wedge45.surface, state, vis, samples=400, sigma=5e-4, seed=11)
    b = synth_point_cloud(cam, wedge45.surface, state, vis, samples=400, sigma=5e-4, seed=11)
    assert np.array_equal(a.points, b.points)


def test_cloud_noise_statistics(wedge45):
    state = wedge45.rest_state()
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, state)
    sigma = 5e-4
    cloud = synth_point_cloud(cam, wedge45.surface, state, vis, samples=4000, sigma=sigma, seed=2)
    from exposim.geometry import closest_point_on_triangles

    tris = state.positions[wedge45.surface.faces]
    dists = []
    for p in cloud.points[::4]:
        pts, _ = closest_point_on_triangles(p, tris)
        dists.append(np.linalg.norm(pts - p, axis=1).min())
    # normal component of isotropic noise folds to a half-normal distribution;
    # tangential components stay on the surface, so compare against
    # E|N(0, sigma)| = sigma * sqrt(2/pi)
    expected = sigma * math.sqrt(2.0 / math.pi)
    assert np.mean(dists) == pytest.approx(expected, rel=0.10)


def test_cloud_requires_visible_faces(wedge45):
    state = wedge45.rest_state()
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, state)
    vis.visible[:] = False
    with pytest.raises(PerceptionError):
        synth_point_cloud(cam, wedge45.surface, state, vis, samples=10, sigma=0.0, seed=0)


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------

def test_chamfer_identity_zero():
    pts = np.random.default_rng(0).normal(size=(40, 3))
    assert chamfer(pts, PointCloud(points=pts.copy(), noise_sigma=0.0)) == 0.0


def test_chamfer_single_pair():
    a = np.array([[0.0, 0.0, 0.0]])
    b = PointCloud(points=np.array([[0.0, 0.0, 3.0]]), noise_sigma=0.0)
    assert chamfer(a, b) == pytest.approx(18.0, abs=1e-15)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(100, 3))
    b = rng.normal(size=(100, 3))
    brute = (
        np.min(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), axis=1).sum()
        + np.min(((b[:, None, :] - a[None, :, :]) ** 2).sum(-1), axis=1).sum()
    )
    assert abs(chamfer(a, PointCloud(points=b, noise_sigma=0.0)) - brute) < 1e-12


def test_chamfer_empty_errors():
    with pytest.raises(PerceptionError):
        chamfer(np.zeros((0, 3)), PointCloud(points=np.zeros((1, 3)), noise_sigma=0.0))


# ---------------------------------------------------------------------------
# registration
# ---------------------------------------------------------------------------

def registration_setup(mesh, push=(0.0, 0.0, -3e-3), steps=6):
    """Ground-truth deformation by a coupled push; estimator starts at rest."""
    cons = lambda: default_constraints(mesh, distance_compliance=1.5, shape_compliance=30.0)
    world = init_sim(mesh, cons(), SimConfig())
    surf = mesh.surface
    normals, _ = surf.normals_areas(world.positions)
    cents = surf.centroids(world.positions)
    face = int(np.nonzero((normals[:, 2] > 0.9) & (cents[:, 1] > 0.01))[0][0])
    c = world.couple_face(face)
    push = np.asarray(push)
    for i in range(steps):
        world.solve_quasistatic(c.p0 + push * (i + 1) / steps)
    estimator = init_sim(mesh, cons(), SimConfig(chamfer_weight=0.6, iterations=120))
    return world, estimator


def visible_vertex_rmse(mesh, vis, estimated, truth):
    ids = np.unique(mesh.surface.faces[vis.visible])
    d = estimated.positions[ids] - truth.positions[ids]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def test_registration_noiseless_cloud_keeps_rest(wedge45):
    cons = default_constraints(wedge45, distance_compliance=1.5, shape_compliance=30.0)
    sim = init_sim(wedge45, cons, SimConfig())
    state = sim.state()
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, state)
    cloud = synth_point_cloud(cam, wedge45.surface, state, vis, samples=6000, sigma=0.0, seed=3)
    out = estimate_state(sim, cloud, vis)
    rmse = visible_vertex_rmse(wedge45, vis, out, state)
    assert rmse < 1e-4


def test_registration_recovers_known_deformation(wedge45):
    world, estimator = registration_setup(wedge45)
    truth = world.state()
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, truth)
    sigma = 5e-4
    cloud = synth_point_cloud(cam, wedge45.surface, truth, vis, samples=8000, sigma=sigma, seed=4)
    est = estimate_state(estimator, cloud, vis)
    rmse = visible_vertex_rmse(wedge45, vis, est, truth)
    assert rmse < 2 * sigma
    # chamfer against the cloud decreased vs the rest state
    rng = np.random.default_rng(0)
    before = chamfer(sample_visible_surface(wedge45.surface, wedge45.rest_state(), vis, 5, rng), cloud)
    rng = np.random.default_rng(0)
    after = chamfer(sample_visible_surface(wedge45.surface, est, vis, 5, rng), cloud)
    assert after < before


def test_cloud_ply_export(tmp_path, wedge45):
    from exposim.perception import save_cloud_ply

    state = wedge45.rest_state()
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, state)
    cloud = synth_point_cloud(cam, wedge45.surface, state, vis, samples=50, sigma=0.0, seed=0)
    path = tmp_path / "cloud.ply"
    save_cloud_ply(cloud, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "ply"
    assert f"element vertex {len(cloud.points)}" in lines
    body = np.array([[float(v) for v in l.split()] for l in lines[lines.index("end_header") + 1:]])
    assert np.array_equal(body, cloud.points)


def test_mask_pgm_export(tmp_path, wedge45):
    from exposim.perception import save_mask_pgm

    state = wedge45.rest_state()
    cam = top_camera(width=32, height=24)
    seg = synth_segmentation(cam, wedge45.surface, state)
    path = tmp_path / "mask.pgm"
    save_mask_pgm(seg, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "P2"
    assert lines[1] == "32 24"
    vals = np.array([int(v) for row in lines[3:] for v in row.split()]).reshape(24, 32)
    assert np.array_equal(vals == 255, seg)


def test_registration_empty_visible_set_errors(wedge45):
    sim = init_sim(wedge45)
    cam = top_camera()
    vis = render_visibility(cam, wedge45.surface, sim.state())
    cloud = synth_point_cloud(cam, wedge45.surface, sim.state(), vis, samples=100, sigma=0.0, seed=0)
    vis.visible[:] = False
    with pytest.raises(PerceptionError):
        estimate_state(sim, cloud, vis)
