"""Synthetic sensing: visibility ray casting, segmentation, clouds, registration.

The virtual camera shoots one ray per pixel center. First-hit face ids are
computed triangle-major: each triangle is tested (Moller-Trumbore) only
against the pixels inside its projected bounding box, which keeps the cost
near the number of covered pixels. Hits at identical depth resolve to the
lowest face index (faces are scanned in index order and only strictly nearer
hits overwrite), so shared edges and vertices are owned deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import PerceptionError
from .geometry import ParticleState, SurfaceMesh
from .xpbd import SimState


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. `rotation` maps camera coords to world, +z forward."""

    rotation: np.ndarray  # (3, 3)
    position: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")

    @staticmethod
    def look_at(position, target, up=(0.0, 0.0, 1.0), fov_deg: float = 50.0,
                width: int = 160, height: int = 120) -> "CameraModel":
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - position
        n = np.linalg.norm(fwd)
        if n <= 0:
            raise ValueError("camera position coincides with target")
        fwd = fwd / n
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        rn = np.linalg.norm(right)
        if rn <= 1e-12:
            raise ValueError("up vector parallel to view direction")
        right = right / rn
        down = np.cross(fwd, right)
        rot = np.column_stack((right, down, fwd))
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return CameraModel(
            rotation=rot,
            position=position,
            fx=f,
            fy=f,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
        )

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) world-frame (unnormalized) pixel-center ray directions."""
        us = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        vs = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(us, vs)
        dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        return dirs_cam @ self.rotation.T

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (points - self.position) @ self.rotation

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of world points (valid for z > 0)."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        return np.stack([
            self.fx * pc[:, 0] / z + self.cx,
            self.fy * pc[:, 1] / z + self.cy,
        ], axis=-1)


@dataclass
class VisibilityMask:
    visible: np.ndarray  # (F,) bool
    timestamp: int

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=bool)

    def count(self) -> int:
        return int(self.visible.sum())


@dataclass
class PointCloud:
    points: np.ndarray  # (K, 3)
    noise_sigma: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise PerceptionError("non-finite cloud points")


def render_first_hit(camera: CameraModel, surface: SurfaceMesh, state: ParticleState):
    """Per-pixel first-hit face index (-1 for background) and hit depth t."""
    h, w = camera.height, camera.width
    dirs = camera.ray_directions()
    origin = camera.position
    best_t = np.full((h, w), np.inf)
    best_f = np.full((h, w), -1, dtype=np.int64)

    tris = state.positions[surface.faces]
    cam_pts = camera.to_camera(tris.reshape(-1, 3)).reshape(-1, 3, 3)
    z = cam_pts[:, :, 2]
    all_behind = (z <= 1e-12).all(axis=1)
    any_behind = (z <= 1e-12).any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        us = camera.fx * cam_pts[:, :, 0] / z + camera.cx
        vs = camera.fy * cam_pts[:, :, 1] / z + camera.cy

    for fi in range(len(surface.faces)):
        if all_behind[fi]:
            continue
        if any_behind[fi]:
            u0, u1, v0, v1 = 0, w, 0, h  # straddles the camera plane
        else:
            u0 = max(int(np.floor(us[fi].min() - 0.5)), 0)
            u1 = min(int(np.ceil(us[fi].max() + 0.5)) + 1, w)
            v0 = max(int(np.floor(vs[fi].min() - 0.5)), 0)
            v1 = min(int(np.ceil(vs[fi].max() + 0.5)) + 1, h)
            if u0 >= u1 or v0 >= v1:
                continue
        d = dirs[v0:v1, u0:u1]
        tri = tris[fi]
        e1 = tri[1] - tri[0]
        e2 = tri[2] - tri[0]
        pvec = np.cross(d, e2)
        det = pvec @ e1
        ok = det != 0.0
        inv = np.where(ok, det, 1.0)
        inv = 1.0 / inv
        tvec = origin - tri[0]
        u = (pvec @ tvec) * inv
        qvec = np.cross(tvec, e1)
        v = (d @ qvec) * inv
        t = (e2 @ qvec) * inv
        ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
        ok &= t < best_t[v0:v1, u0:u1]
        if ok.any():
            sub_t = best_t[v0:v1, u0:u1]
            sub_f = best_f[v0:v1, u0:u1]
            sub_t[ok] = t[ok]
            sub_f[ok] = fi
    return best_f, best_t


def synth_segmentation(camera: CameraModel, surface: SurfaceMesh, state: ParticleState,
                       first_hit: np.ndarray | None = None) -> np.ndarray:
    """Binary tissue mask: pixel is 1 iff its ray hits the surface."""
    if first_hit is None:
        first_hit, _ = render_first_hit(camera, surface, state)
    return first_hit >= 0


def render_visibility(camera: CameraModel, surface: SurfaceMesh, state: ParticleState,
                      seg_mask: np.ndarray | None = None,
                      first_hit: np.ndarray | None = None) -> VisibilityMask:
    """A face is visible iff some in-mask pixel ray hits it first."""
    if first_hit is None:
        first_hit, _ = render_first_hit(camera, surface, state)
    ids = first_hit
    if seg_mask is not None:
        ids = np.where(np.asarray(seg_mask, dtype=bool), ids, -1)
    visible = np.zeros(surface.face_count, dtype=bool)
    hit = ids[ids >= 0]
    if hit.size:
        visible[np.unique(hit)] = True
    return VisibilityMask(visible=visible, timestamp=state.timestamp)


def _face_areas(surface: SurfaceMesh, state: ParticleState) -> np.ndarray:
    tri = state.positions[surface.faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def _sample_on_faces(surface: SurfaceMesh, state: ParticleState, face_ids: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    tri = state.positions[surface.faces[face_ids]]
    r1 = rng.random(len(face_ids))
    r2 = rng.random(len(face_ids))
    su = np.sqrt(r1)
    b0 = 1.0 - su
    b1 = su * (1.0 - r2)
    b2 = su * r2
    return b0[:, None] * tri[:, 0] + b1[:, None] * tri[:, 1] + b2[:, None] * tri[:, 2]


def sample_visible_surface(surface: SurfaceMesh, state: ParticleState, vis: VisibilityMask,
                           per_face: int, rng: np.random.Generator) -> np.ndarray:
    """`per_face` area-uniform samples on every visible face (metric term)."""
    ids = np.nonzero(vis.visible)[0]
    if not len(ids):
        raise PerceptionError("no visible faces to sample")
    face_ids = np.repeat(ids, per_face)
    return _sample_on_faces(surface, state, face_ids, rng)


def synth_point_cloud(camera: CameraModel, surface: SurfaceMesh, state: ParticleState,
                      vis: VisibilityMask, samples: int, sigma: float,
                      seed: int | np.random.Generator = 0) -> PointCloud:
    """Area-uniform noisy samples of the visible surface; seeded, deterministic."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    ids = np.nonzero(vis.visible)[0]
    if not len(ids):
        raise PerceptionError("no visible faces to sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    areas = _face_areas(surface, state)[ids]
    total = areas.sum()
    if total <= 0:
        raise PerceptionError("visible faces have zero area")
    face_ids = ids[rng.choice(len(ids), size=samples, p=areas / total)]
    pts = _sample_on_faces(surface, state, face_ids, rng)
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, pts.shape)
    return PointCloud(points=pts, noise_sigma=float(sigma))


def chamfer(state_samples: np.ndarray, cloud: PointCloud) -> float:
    """Symmetric sum of squared nearest-neighbor distances.

    Both directional terms are sums (not means); the spatial index only
    accelerates the queries, the value is index-independent.
    """
    a = np.asarray(state_samples, dtype=np.float64).reshape(-1, 3)
    b = cloud.points
    if not len(a) or not len(b):
        raise PerceptionError("chamfer distance of an empty set")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(np.sum(d_ab**2) + np.sum(d_ba**2))


def save_cloud_ply(cloud: PointCloud, path) -> None:
    """Write the cloud as ASCII PLY (debugging exchange format)."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment noise_sigma {cloud.noise_sigma!r}",
        f"element vertex {len(cloud.points)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines.extend(f"{p[0]!r} {p[1]!r} {p[2]!r}" for p in cloud.points.tolist())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_mask_pgm(mask: np.ndarray, path) -> None:
    """Write a binary image (e.g. a segmentation mask) as plain PGM."""
    mask = np.asarray(mask)
    img = np.where(mask.astype(bool), 255, 0)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"P2\n{img.shape[1]} {img.shape[0]}\n255\n")
        for row in img:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def estimate_state(sim: SimState, cloud: PointCloud, vis: VisibilityMask) -> ParticleState:
    """Registration: re-solve with the Chamfer data term on the visible surface.

    Hard constraints keep their precedence (they are prescribed); the data
    term pulls visible surface particles toward their nearest cloud points
    each sweep, so the result aligns with the observations while remaining
    consistent with the constraint model.
    """
    if vis.count() == 0:
        raise PerceptionError("cannot register against an empty visible set")
    p_t = sim.coupling.last_target if sim.coupling is not None else None
    return sim.solve_quasistatic(p_t, cloud=cloud, vis=vis)
