"""Exposure metrics around a dissection segment.

Feature pairs are found by intersecting rings (radius r, center on the
segment at parameter k, normal along the segment) with the tissue surface,
then bound to material coordinates. Observations stack, per pair: the wedge
cosine between the two feature vectors, the shear cosine between their cross
product and the segment direction, and both feature-vector lengths.

Vector layout (documented contract): wedge block, shear block, stretch-v
block, stretch-w block; within each block pairs are ordered radius-fastest,
i.e. [(k_1, r_1), (k_1, r_2), ..., (k_L, r_R)].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFeatureError, FeatureConstructionError
from .geometry import (
    MaterialAnchor,
    ParticleState,
    SurfaceMesh,
    bind_material_point,
    eval_anchor,
)

log = logging.getLogger(__name__)

# Below this ratio of |v x w| to |v||w| the shear cosine (and its gradient)
# is masked to zero: exactly antiparallel feature vectors carry no twist
# information.
SHEAR_DEGENERACY_RATIO = 1e-9


@dataclass(frozen=True)
class RingSpec:
    radius: float
    k: float

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("ring radius must be > 0")


@dataclass
class DissectionSegment:
    """Operator-designated segment, bound to material coordinates."""

    q1: MaterialAnchor
    q2: MaterialAnchor

    def endpoints(self, surface: SurfaceMesh, state: ParticleState):
        return eval_anchor(self.q1, surface, state), eval_anchor(self.q2, surface, state)

    def point(self, surface: SurfaceMesh, state: ParticleState, k: float) -> np.ndarray:
        a, b = self.endpoints(surface, state)
        return a + k * (b - a)

    def direction(self, surface: SurfaceMesh, state: ParticleState) -> np.ndarray:
        a, b = self.endpoints(surface, state)
        d = b - a
        n = np.linalg.norm(d)
        if n <= 0.0:
            raise DegenerateFeatureError("segment endpoints coincide")
        return d / n


@dataclass
class FeaturePair:
    ring: RingSpec
    v_anchor: MaterialAnchor  # left of the segment (positive side)
    w_anchor: MaterialAnchor  # right
    init_len_v: float
    init_len_w: float


@dataclass
class FeatureSet:
    segment: DissectionSegment
    pairs: list[FeaturePair]
    ks: tuple[float, ...]
    radii: tuple[float, ...]
    gamma_v: float
    gamma_w: float
    wedge_target: float  # o^e

    @property
    def pair_count(self) -> int:
        return len(self.pairs)

    @property
    def size(self) -> int:
        """Observation vector length m = 4 * (pairs)."""
        return 4 * len(self.pairs)

    def stretch_targets(self) -> tuple[np.ndarray, np.ndarray]:
        tv = self.gamma_v * np.array([p.init_len_v for p in self.pairs])
        tw = self.gamma_w * np.array([p.init_len_w for p in self.pairs])
        return tv, tw


def _local_surface_normal(surface: SurfaceMesh, state: ParticleState, center: np.ndarray, radius: float) -> np.ndarray:
    """Area-weighted outward normal of faces near `center`."""
    normals, areas = surface.normals_areas(state.positions)
    centroids = surface.centroids(state.positions)
    d = np.linalg.norm(centroids - center, axis=1)
    near = d <= radius
    if not near.any():
        near = d == d.min()
    n = (normals[near] * areas[near, None]).sum(axis=0)
    norm = np.linalg.norm(n)
    if norm <= 0.0:
        raise FeatureConstructionError(radius, math.nan, "degenerate local normal")
    return n / norm


def _face_crossing_edges(face: np.ndarray, h: np.ndarray):
    """Mesh-edge keys of the (0 or 2) edges of `face` crossed by the plane."""
    out = []
    for e0, e1 in ((0, 1), (1, 2), (2, 0)):
        a, b = int(face[e0]), int(face[e1])
        if h[a] * h[b] < 0.0:
            out.append((a, b) if a < b else (b, a))
    return out


def _edge_crossing_point(edge: tuple[int, int], h: np.ndarray, positions: np.ndarray) -> np.ndarray:
    a, b = edge
    s = h[a] / (h[a] - h[b])
    return positions[a] + s * (positions[b] - positions[a])


def ring_surface_intersection(
    surface: SurfaceMesh,
    state: ParticleState,
    ring: RingSpec,
    segment: DissectionSegment,
    _detailed: bool = False,
):
    """Intersection points of a ring with the deformed surface, one per side.

    The ring lies in the plane through c = D(k) with normal along the segment
    direction. The plane/surface section is a polyline; starting from the
    surface point under c, the polyline is walked in both directions and the
    radial distance to c is bracketed on each polyline segment, interpolating
    linearly at the first crossing of the ring radius. Walking outward keeps
    candidates geodesically near the segment (far-side geometry is never
    grabbed). The side reference is s = n_local x d; the candidate with
    positive (p - c) . s is v (left), the other is w (right).
    """
    positions = state.positions
    c = segment.point(surface, state, ring.k)
    d = segment.direction(surface, state)
    n_local = _local_surface_normal(surface, state, c, ring.radius)
    side_ref = np.cross(n_local, d)
    side_norm = np.linalg.norm(side_ref)
    if side_norm <= 1e-12:
        raise FeatureConstructionError(ring.radius, ring.k, "surface normal parallel to segment")
    side_ref = side_ref / side_norm

    h = (positions - c) @ d
    # Exact zeros get an infinitesimal positive offset so the section never
    # passes through vertices and every crossed face has exactly two crossed
    # edges (deterministic symbolic perturbation).
    h = np.where(h == 0.0, 1e-300, h)

    edge_to_faces: dict[tuple[int, int], list[int]] = {}
    face_edges: dict[int, list[tuple[int, int]]] = {}
    for fi, face in enumerate(surface.faces):
        edges = _face_crossing_edges(face, h)
        if edges:
            face_edges[fi] = edges
            for e in edges:
                edge_to_faces.setdefault(e, []).append(fi)
    if not face_edges:
        raise FeatureConstructionError(ring.radius, ring.k, "ring plane misses the surface")

    c_anchor = bind_material_point(surface, c, state, tolerance=np.inf)
    c_surf = eval_anchor(c_anchor, surface, state)
    start_face = c_anchor.face
    if start_face not in face_edges:
        # plane grazes past the binding face: start at the nearest crossed face
        def midpoint_dist(fi: int) -> float:
            pts = [_edge_crossing_point(e, h, positions) for e in face_edges[fi]]
            return float(np.linalg.norm(np.mean(pts, axis=0) - c_surf))

        start_face = min(face_edges, key=lambda fi: (midpoint_dist(fi), fi))

    def walk(first_edge: tuple[int, int]):
        """First ring-radius crossing along one walk direction, or None."""
        prev_p = c_surf
        g_prev = float(np.linalg.norm(prev_p - c)) - ring.radius
        face = start_face
        edge = first_edge
        visited = {(face, edge)}
        while True:
            p = _edge_crossing_point(edge, h, positions)
            g = float(np.linalg.norm(p - c)) - ring.radius
            if g_prev < 0.0 <= g or g < 0.0 <= g_prev:
                s = g_prev / (g_prev - g)
                return prev_p + s * (p - prev_p), face
            prev_p, g_prev = p, g
            nxt = [f for f in edge_to_faces[edge] if f != face]
            if not nxt:
                return None  # open boundary
            face = nxt[0]
            other = [e for e in face_edges.get(face, []) if e != edge]
            if not other:
                return None
            edge = other[0]
            if (face, edge) in visited:
                return None  # closed loop without reaching the radius
            visited.add((face, edge))

    first_edges = face_edges[start_face]
    hits = [walk(e) for e in first_edges]
    hits = [hit for hit in hits if hit is not None]
    if len(hits) < 2:
        raise FeatureConstructionError(ring.radius, ring.k, "ring leaves the surface")

    (p1, f1), (p2, f2) = hits[0], hits[1]
    r1, r2 = p1 - c, p2 - c
    if np.linalg.norm(r1) <= 0.0 or np.linalg.norm(r2) <= 0.0:
        raise FeatureConstructionError(ring.radius, ring.k, "candidate on the dissection line")
    # Assign left/right so that cross(v, w) aligns with +d (the binding-time
    # shear convention). For antiparallel candidates (flat surface) the cross
    # product vanishes; fall back to the side-reference sign.
    twist = float(np.cross(r1, r2) @ d)
    if abs(twist) > 1e-12 * float(np.linalg.norm(r1) * np.linalg.norm(r2)):
        v_point, v_face = (p1, f1) if twist > 0.0 else (p2, f2)
        w_point, w_face = (p2, f2) if twist > 0.0 else (p1, f1)
    else:
        s1 = float(r1 @ side_ref)
        s2 = float(r2 @ side_ref)
        if s1 == s2:
            raise FeatureConstructionError(
                ring.radius, ring.k, "cannot disambiguate candidate sides"
            )
        v_point, v_face = (p1, f1) if s1 > s2 else (p2, f2)
        w_point, w_face = (p2, f2) if s1 > s2 else (p1, f1)
    if _detailed:
        return (v_point, v_face), (w_point, w_face)
    return v_point, w_point


def _anchor_on_face(surface: SurfaceMesh, state: ParticleState, point: np.ndarray, face: int) -> MaterialAnchor:
    """Barycentric anchor of an on-face point (exact linear solve)."""
    tri = state.positions[surface.faces[face]]
    t = np.column_stack((tri[1] - tri[0], tri[2] - tri[0]))
    rhs = point - tri[0]
    uv, *_ = np.linalg.lstsq(t, rhs, rcond=None)
    w = np.array([1.0 - uv[0] - uv[1], uv[0], uv[1]])
    w = np.clip(w, 0.0, 1.0)
    return MaterialAnchor(face=face, barycentric=w / w.sum())


def init_observation(
    surface: SurfaceMesh,
    state0: ParticleState,
    segment: DissectionSegment,
    ks,
    radii,
    gamma_v: float = 1.5,
    gamma_w: float = 1.5,
    wedge_target: float = -1.0,
) -> FeatureSet:
    """Bind all (k, r) feature pairs on the initial state and record targets.

    Raises FeatureConstructionError (with the failing (r, k)) if any ring
    misses the surface on either side. Verifies the binding-time shear
    convention: +1 within 1e-6 unless the pair is exactly antiparallel.
    """
    pairs = []
    d0 = segment.direction(surface, state0)
    for k in ks:
        c = segment.point(surface, state0, k)
        for r in radii:
            ring = RingSpec(radius=float(r), k=float(k))
            (v_pt, v_face), (w_pt, w_face) = ring_surface_intersection(
                surface, state0, ring, segment, _detailed=True
            )
            v_anchor = _anchor_on_face(surface, state0, v_pt, v_face)
            w_anchor = _anchor_on_face(surface, state0, w_pt, w_face)
            vv = eval_anchor(v_anchor, surface, state0) - c
            wv = eval_anchor(w_anchor, surface, state0) - c
            init_v = float(np.linalg.norm(vv))
            init_w = float(np.linalg.norm(wv))
            if init_v <= 0.0 or init_w <= 0.0:
                raise FeatureConstructionError(r, k, "feature point coincides with ring center")
            u = np.cross(vv, wv)
            un = np.linalg.norm(u)
            if un > SHEAR_DEGENERACY_RATIO * init_v * init_w:
                shear0 = float(u @ d0 / un)
                if abs(shear0 - 1.0) > 1e-6:
                    raise FeatureConstructionError(
                        r, k, f"binding-time shear cosine {shear0:.8f} != +1"
                    )
            pairs.append(
                FeaturePair(
                    ring=ring,
                    v_anchor=v_anchor,
                    w_anchor=w_anchor,
                    init_len_v=init_v,
                    init_len_w=init_w,
                )
            )
    return FeatureSet(
        segment=segment,
        pairs=pairs,
        ks=tuple(float(k) for k in ks),
        radii=tuple(float(r) for r in radii),
        gamma_v=float(gamma_v),
        gamma_w=float(gamma_w),
        wedge_target=float(wedge_target),
    )


def _pair_geometry(features: FeatureSet, surface: SurfaceMesh, state: ParticleState):
    """Current v/w vectors, segment direction and per-pair centers."""
    seg = features.segment
    a, b = seg.endpoints(surface, state)
    d_raw = b - a
    d_norm = float(np.linalg.norm(d_raw))
    if d_norm <= 0.0:
        raise DegenerateFeatureError("segment endpoints coincide")
    d_hat = d_raw / d_norm
    ks = np.array([p.ring.k for p in features.pairs])
    centers = a[None, :] + ks[:, None] * d_raw[None, :]
    v_pts = np.array([eval_anchor(p.v_anchor, surface, state) for p in features.pairs])
    w_pts = np.array([eval_anchor(p.w_anchor, surface, state) for p in features.pairs])
    return v_pts - centers, w_pts - centers, d_hat, d_raw, centers


def observe(features: FeatureSet, surface: SurfaceMesh, state: ParticleState) -> np.ndarray:
    """Stacked observation [wedge cosines; shear cosines; |v|; |w|]."""
    vv, wv, d_hat, _, _ = _pair_geometry(features, surface, state)
    lv = np.linalg.norm(vv, axis=1)
    lw = np.linalg.norm(wv, axis=1)
    if np.any(lv <= 0.0) or np.any(lw <= 0.0):
        bad = int(np.argmin(np.minimum(lv, lw)))
        p = features.pairs[bad]
        raise DegenerateFeatureError(
            f"zero-length feature vector at (r={p.ring.radius}, k={p.ring.k})"
        )
    wedge = np.einsum("ij,ij->i", vv, wv) / (lv * lw)
    u = np.cross(vv, wv)
    un = np.linalg.norm(u, axis=1)
    degenerate = un <= SHEAR_DEGENERACY_RATIO * lv * lw
    if degenerate.any():
        log.warning("shear masked to 0 for %d antiparallel feature pair(s)", int(degenerate.sum()))
    shear = np.where(degenerate, 0.0, (u @ d_hat) / np.where(degenerate, 1.0, un))
    return np.concatenate([wedge, shear, lv, lw])


def error(obs: np.ndarray, features: FeatureSet) -> np.ndarray:
    """Targets minus observations, in the documented block layout."""
    n = features.pair_count
    if obs.shape != (4 * n,):
        raise ValueError(f"observation length {obs.shape} does not match feature set (4x{n})")
    tv, tw = features.stretch_targets()
    return np.concatenate(
        [
            features.wedge_target - obs[:n],
            1.0 - obs[n : 2 * n],
            tv - obs[2 * n : 3 * n],
            tw - obs[3 * n :],
        ]
    )


def observation_jacobian(features: FeatureSet, surface: SurfaceMesh, state: ParticleState) -> np.ndarray:
    """Closed-form (m, 3N) Jacobian of observe() w.r.t. particle positions.

    Nonzero only in columns of vertices of the four triangles backing each
    pair (v, w, and the two segment anchors). Shear rows of exactly
    antiparallel pairs are masked to zero, matching observe().
    """
    n_pairs = features.pair_count
    n_vert = len(state.positions)
    jac = np.zeros((4 * n_pairs, 3 * n_vert))
    seg = features.segment
    vv_all, wv_all, d_hat, d_raw, _ = _pair_geometry(features, surface, state)
    d_norm = float(np.linalg.norm(d_raw))
    q1_face = surface.faces[seg.q1.face]
    q2_face = surface.faces[seg.q2.face]

    def add(row: int, vert_ids, grad_point: np.ndarray, weights: np.ndarray):
        for vid, w in zip(vert_ids, weights):
            jac[row, 3 * vid : 3 * vid + 3] += w * grad_point

    # d(d_hat)/d(d_raw), shared by every shear row
    proj = (np.eye(3) - np.outer(d_hat, d_hat)) / d_norm

    for i, pair in enumerate(features.pairs):
        k = pair.ring.k
        vv, wv = vv_all[i], wv_all[i]
        lv = float(np.linalg.norm(vv))
        lw = float(np.linalg.norm(wv))
        if lv <= 0.0 or lw <= 0.0:
            raise DegenerateFeatureError(
                f"zero-length feature vector at (r={pair.ring.radius}, k={pair.ring.k})"
            )
        v_hat = vv / lv
        w_hat = wv / lw
        v_ids = surface.faces[pair.v_anchor.face]
        w_ids = surface.faces[pair.w_anchor.face]
        v_w = pair.v_anchor.barycentric
        w_w = pair.w_anchor.barycentric
        # center depends on segment anchors: c = (1-k) q1 + k q2
        c_q1 = -(1.0 - k)
        c_q2 = -k

        # --- wedge row
        wedge = float(v_hat @ w_hat)
        g_v = (w_hat - wedge * v_hat) / lv
        g_w = (v_hat - wedge * w_hat) / lw
        row = i
        add(row, v_ids, g_v, v_w)
        add(row, w_ids, g_w, w_w)
        add(row, q1_face, c_q1 * (g_v + g_w), seg.q1.barycentric)
        add(row, q2_face, c_q2 * (g_v + g_w), seg.q2.barycentric)

        # --- shear row
        u = np.cross(vv, wv)
        un = float(np.linalg.norm(u))
        row = n_pairs + i
        if un > SHEAR_DEGENERACY_RATIO * lv * lw:
            u_hat = u / un
            shear = float(u_hat @ d_hat)
            g_u = (d_hat - shear * u_hat) / un
            s_v = np.cross(wv, g_u)  # (d u/d v)^T g_u = [w]x g_u
            s_w = -np.cross(vv, g_u)
            g_dhat = u_hat  # d shear / d d_hat
            g_draw = proj @ g_dhat
            add(row, v_ids, s_v, v_w)
            add(row, w_ids, s_w, w_w)
            add(row, q1_face, c_q1 * (s_v + s_w) - g_draw, seg.q1.barycentric)
            add(row, q2_face, c_q2 * (s_v + s_w) + g_draw, seg.q2.barycentric)

        # --- stretch rows
        row_v = 2 * n_pairs + i
        add(row_v, v_ids, v_hat, v_w)
        add(row_v, q1_face, c_q1 * v_hat, seg.q1.barycentric)
        add(row_v, q2_face, c_q2 * v_hat, seg.q2.barycentric)
        row_w = 3 * n_pairs + i
        add(row_w, w_ids, w_hat, w_w)
        add(row_w, q1_face, c_q1 * w_hat, seg.q1.barycentric)
        add(row_w, q2_face, c_q2 * w_hat, seg.q2.barycentric)
    return jac
