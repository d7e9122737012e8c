"""Tetrahedral/surface meshes, material-point binding, rays, and phantom generation.

Conventions: coordinates are meters, float64 throughout. Surface triangles are
wound so their normals point out of the volume. The mesh text format is
documented in :func:`save_tet_mesh`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BindError,
    DegenerateTetError,
    MeshParseError,
    NonManifoldSurfaceError,
)

MESH_FORMAT_VERSION = 1

# Outward-wound faces of a positively oriented tet (i0,i1,i2,i3).
_TET_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


def tet_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes of each tet; positive for correctly oriented tets."""
    a = vertices[tets[:, 0]]
    e1 = vertices[tets[:, 1]] - a
    e2 = vertices[tets[:, 2]] - a
    e3 = vertices[tets[:, 3]] - a
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


@dataclass(frozen=True)
class SurfaceMesh:
    """Boundary triangles of a tet mesh, indexing the parent vertex array."""

    faces: np.ndarray  # (F, 3) int, outward wound
    vertex_ids: np.ndarray  # unique vertex indices appearing in faces

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def positions(self, positions: np.ndarray) -> np.ndarray:
        """Per-face vertex positions, shape (F, 3, 3)."""
        return positions[self.faces]

    def normals_areas(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit outward normals (F, 3) and face areas (F,) at the given state."""
        tri = positions[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(n, axis=1)
        areas = 0.5 * norms
        safe = np.where(norms > 0.0, norms, 1.0)
        return n / safe[:, None], areas

    def centroids(self, positions: np.ndarray) -> np.ndarray:
        return positions[self.faces].mean(axis=1)


def extract_surface(tets: np.ndarray) -> np.ndarray:
    """Boundary faces (appearing exactly once), keeping the outward winding.

    Raises NonManifoldSurfaceError if any face is shared by more than two tets.
    """
    faces = tets[:, _TET_FACES].reshape(-1, 3)  # (4T, 3) outward wound
    key = np.sort(faces, axis=1)
    # Count occurrences of each sorted triple.
    order = np.lexsort(key.T[::-1])
    skey = key[order]
    new_group = np.any(np.diff(skey, axis=0) != 0, axis=1)
    group_start = np.concatenate(([0], np.nonzero(new_group)[0] + 1))
    group_sizes = np.diff(np.concatenate((group_start, [len(skey)])))
    if np.any(group_sizes > 2):
        raise NonManifoldSurfaceError(
            f"{int(np.sum(group_sizes > 2))} faces shared by more than two tets"
        )
    boundary_rows = order[group_start[group_sizes == 1]]
    boundary_rows.sort()  # deterministic: order of (tet, local face)
    return faces[boundary_rows]


@dataclass(frozen=True)
class TetMesh:
    """Rest geometry plus connectivity; immutable after construction."""

    vertices: np.ndarray  # (N, 3) rest positions
    tets: np.ndarray  # (T, 4)
    fixed: np.ndarray  # sorted unique vertex indices flagged as fixed
    marked_faces: np.ndarray  # (M, 3) optional marked-region faces (vertex triples)
    surface: SurfaceMesh

    @staticmethod
    def build(
        vertices,
        tets,
        fixed=(),
        marked_faces=(),
    ) -> "TetMesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
        if not np.isfinite(vertices).all():
            raise MeshParseError("non-finite vertex coordinates")
        if tets.size and (tets.min() < 0 or tets.max() >= len(vertices)):
            raise MeshParseError("tet references out-of-range vertex")
        vols = tet_volumes(vertices, tets)
        bad = np.nonzero(vols <= 0.0)[0]
        if bad.size:
            raise DegenerateTetError(
                f"tet {int(bad[0])} has volume {vols[bad[0]]:.3e} <= 0"
            )
        faces = extract_surface(tets)
        surface = SurfaceMesh(faces=faces, vertex_ids=np.unique(faces))
        fixed = np.unique(np.asarray(fixed, dtype=np.int64))
        if fixed.size and (fixed.min() < 0 or fixed.max() >= len(vertices)):
            raise MeshParseError("fixed flag references out-of-range vertex")
        marked = np.asarray(marked_faces, dtype=np.int64).reshape(-1, 3)
        return TetMesh(
            vertices=vertices,
            tets=tets,
            fixed=fixed,
            marked_faces=marked,
            surface=surface,
        )

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def rest_state(self) -> "ParticleState":
        return ParticleState(positions=self.vertices.copy(), timestamp=0)

    def volume(self) -> float:
        return float(tet_volumes(self.vertices, self.tets).sum())

    def edges(self) -> np.ndarray:
        """Unique undirected tet edges, (E, 2) with i < j, sorted."""
        pairs = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
        e = np.concatenate([self.tets[:, p] for p in pairs])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


@dataclass
class ParticleState:
    """Current particle positions; value-semantic (copy before mutating)."""

    positions: np.ndarray  # (N, 3)
    timestamp: int = 0

    def copy(self) -> "ParticleState":
        return ParticleState(self.positions.copy(), self.timestamp)


@dataclass(frozen=True)
class MaterialAnchor:
    """A material point fixed to a surface triangle by barycentric weights."""

    face: int
    barycentric: np.ndarray  # (3,) nonnegative, sums to 1

    def __post_init__(self):
        w = np.asarray(self.barycentric, dtype=np.float64)
        if w.shape != (3,) or np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise BindError(f"invalid barycentric weights {w}")
        object.__setattr__(self, "barycentric", w)


def eval_anchor(anchor: MaterialAnchor, surface: SurfaceMesh, state: ParticleState) -> np.ndarray:
    """Current position of an anchored material point (linear in state)."""
    tri = state.positions[surface.faces[anchor.face]]
    return anchor.barycentric @ tri


def closest_point_on_triangles(point: np.ndarray, tri: np.ndarray):
    """Closest points of `point` on each triangle in `tri` ((F,3,3)).

    Returns (points (F,3), barycentric (F,3)). Vectorized region-based
    projection (Ericson).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = point - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = point - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = point - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_v = np.where(d1 - d3 != 0.0, d1 - d3, 1.0)
    v_edge_ab = np.clip(d1 / denom_v, 0.0, 1.0)
    denom_w = np.where(d2 - d6 != 0.0, d2 - d6, 1.0)
    w_edge_ac = np.clip(d2 / denom_w, 0.0, 1.0)
    dbc = (d4 - d3) + (d5 - d6)
    denom_bc = np.where(dbc != 0.0, dbc, 1.0)
    w_edge_bc = np.clip((d4 - d3) / denom_bc, 0.0, 1.0)

    denom_in = va + vb + vc
    denom_in = np.where(denom_in != 0.0, denom_in, 1.0)
    v_in = vb / denom_in
    w_in = vc / denom_in

    bary = np.empty_like(tri[:, :, 0])
    # interior default
    bary[:, 0] = 1.0 - v_in - w_in
    bary[:, 1] = v_in
    bary[:, 2] = w_in

    region_a = (d1 <= 0) & (d2 <= 0)
    region_b = (d3 >= 0) & (d4 <= d3)
    region_c = (d6 >= 0) & (d5 <= d6)
    region_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    region_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    region_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    def put(mask, w0, w1, w2):
        bary[mask, 0] = w0 if np.isscalar(w0) else w0[mask]
        bary[mask, 1] = w1 if np.isscalar(w1) else w1[mask]
        bary[mask, 2] = w2 if np.isscalar(w2) else w2[mask]

    put(region_bc, 0.0, 1.0 - w_edge_bc, w_edge_bc)
    put(region_ac, 1.0 - w_edge_ac, 0.0, w_edge_ac)
    put(region_ab, 1.0 - v_edge_ab, v_edge_ab, 0.0)
    put(region_c, 0.0, 0.0, 1.0)
    put(region_b, 0.0, 1.0, 0.0)
    put(region_a, 1.0, 0.0, 0.0)

    pts = np.einsum("fk,fkj->fj", bary, tri)
    return pts, bary


def bind_material_point(
    surface: SurfaceMesh,
    point,
    state: ParticleState,
    tolerance: float = 1e-3,
) -> MaterialAnchor:
    """Bind `point` to the deformed surface as a barycentric anchor.

    The point must lie within `tolerance` (default 1 mm) of the surface at
    `state`; ties between faces resolve to the lowest face index.
    """
    point = np.asarray(point, dtype=np.float64)
    tri = state.positions[surface.faces]
    pts, bary = closest_point_on_triangles(point, tri)
    d2 = np.einsum("ij,ij->i", pts - point, pts - point)
    best = int(np.argmin(d2))
    dist = math.sqrt(float(d2[best]))
    if dist > tolerance:
        raise BindError(f"point {point} is {dist * 1e3:.2f} mm from surface (> {tolerance * 1e3} mm)")
    w = np.clip(bary[best], 0.0, 1.0)
    w = w / w.sum()
    return MaterialAnchor(face=best, barycentric=w)


def ray_triangle_intersect(origin, direction, triangle):
    """Moller-Trumbore ray/triangle intersection.

    Returns (t, barycentric) for the nearest hit with t > 0, or None.
    Boundary points (edges, vertices) count as hits; rays parallel to the
    triangle plane miss, even when coplanar.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    tri = np.asarray(triangle, dtype=np.float64)
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    pvec = np.cross(direction, e2)
    det = float(e1 @ pvec)
    if det == 0.0:
        return None
    inv = 1.0 / det
    tvec = origin - tri[0]
    u = float(tvec @ pvec) * inv
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = float(direction @ qvec) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = float(e2 @ qvec) * inv
    if t <= 0.0:
        return None
    return t, np.array([1.0 - u - v, u, v])


def ray_mesh_first_hit(origin, direction, positions: np.ndarray, faces: np.ndarray):
    """First intersection of one ray with a triangle soup.

    Returns (face_index, t, barycentric) or None. Hits on shared edges and
    vertices belong to the lowest face index (argmin keeps the first of
    equal-t hits, and faces are scanned in index order).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    tri = positions[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = det != 0.0
    inv = np.where(ok, det, 1.0)
    inv = 1.0 / inv
    tvec = origin - tri[:, 0]
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    if not ok.any():
        return None
    t_masked = np.where(ok, t, np.inf)
    idx = int(np.argmin(t_masked))
    return idx, float(t[idx]), np.array([1.0 - u[idx] - v[idx], u[idx], v[idx]])


# ---------------------------------------------------------------------------
# Mesh file format
# ---------------------------------------------------------------------------

def save_tet_mesh(mesh: TetMesh, path) -> None:
    """Write the plain-text mesh format.

    Grammar (whitespace separated, '#' comments and blank lines ignored)::

        tetmesh <version>
        vertices <N>
        <x> <y> <z>          (N lines, repr-exact floats)
        tets <T>
        <i0> <i1> <i2> <i3>  (T lines)
        fixed <K>            (optional)
        <i> ...              (K indices, any line breaking)
        marked <M>           (optional)
        <a> <b> <c>          (M surface-face vertex triples)
    """
    lines = [f"tetmesh {MESH_FORMAT_VERSION}"]
    lines.append(f"vertices {len(mesh.vertices)}")
    for v in mesh.vertices:
        lines.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    lines.append(f"tets {len(mesh.tets)}")
    for t in mesh.tets:
        lines.append(f"{t[0]} {t[1]} {t[2]} {t[3]}")
    if len(mesh.fixed):
        lines.append(f"fixed {len(mesh.fixed)}")
        lines.append(" ".join(str(int(i)) for i in mesh.fixed))
    if len(mesh.marked_faces):
        lines.append(f"marked {len(mesh.marked_faces)}")
        for f in mesh.marked_faces:
            lines.append(f"{f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tet_mesh(path) -> TetMesh:
    """Parse the documented mesh format and build a validated TetMesh."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MeshParseError(f"cannot read {path}: {exc}") from exc
    tokens: list[str] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    pos = 0

    def take(n: int) -> list[str]:
        nonlocal pos
        if pos + n > len(tokens):
            raise MeshParseError("unexpected end of file")
        out = tokens[pos : pos + n]
        pos += n
        return out

    magic, version = take(2)
    if magic != "tetmesh":
        raise MeshParseError(f"bad header {magic!r}, expected 'tetmesh'")
    if int(version) != MESH_FORMAT_VERSION:
        raise MeshParseError(f"unsupported mesh format version {version}")

    kw, n = take(2)
    if kw != "vertices":
        raise MeshParseError(f"expected 'vertices', got {kw!r}")
    n = int(n)
    try:
        verts = np.array(take(3 * n), dtype=np.float64).reshape(n, 3)
    except ValueError as exc:
        raise MeshParseError(f"bad vertex data: {exc}") from exc

    kw, t = take(2)
    if kw != "tets":
        raise MeshParseError(f"expected 'tets', got {kw!r}")
    t = int(t)
    try:
        tets = np.array(take(4 * t), dtype=np.int64).reshape(t, 4)
    except ValueError as exc:
        raise MeshParseError(f"bad tet data: {exc}") from exc

    fixed: list[int] = []
    marked: list[int] = []
    while pos < len(tokens):
        kw, k = take(2)
        k = int(k)
        if kw == "fixed":
            fixed = [int(x) for x in take(k)]
        elif kw == "marked":
            marked = [int(x) for x in take(3 * k)]
        else:
            raise MeshParseError(f"unknown section {kw!r}")
    marked_faces = np.array(marked, dtype=np.int64).reshape(-1, 3)
    return TetMesh.build(verts, tets, fixed=fixed, marked_faces=marked_faces)


# ---------------------------------------------------------------------------
# Wedge phantom generation
# ---------------------------------------------------------------------------

# Cell-local corner offsets (dx, dy, dz) and the 6-tet split sharing the 0-6
# diagonal of each hexahedral cell.
_HEX_CORNERS = (
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
)
_HEX_TETS = (
    (0, 5, 1, 6), (0, 1, 2, 6), (0, 2, 3, 6),
    (0, 3, 7, 6), (0, 7, 4, 6), (0, 4, 5, 6),
)


def wedge_profile_height(y: np.ndarray, angle_deg: float, lz: float, depth: float) -> np.ndarray:
    """Top-surface height of the grooved block at lateral coordinate y."""
    if angle_deg >= 180.0:
        return np.full_like(np.asarray(y, dtype=np.float64), lz)
    half = math.radians(angle_deg) / 2.0
    w_top = depth * math.tan(half)
    z = (lz - depth) + np.abs(y) / math.tan(half)
    return np.minimum(z, lz) if w_top > 0 else np.full_like(np.asarray(y, dtype=np.float64), lz)


def gen_wedge_phantom(
    opening_angle: float,
    size=(0.06, 0.05, 0.02),
    resolution=(10, 3, 3),
    groove_depth: float | None = None,
) -> TetMesh:
    """Block with a V-groove cut into its top face, groove axis along +x.

    `opening_angle` is the dihedral opening of the groove in degrees,
    0 < angle <= 180 (180 degenerates to a flat slab). `size` is the block
    extent (lx, ly, lz) in meters; the groove apex runs along y=0 at height
    lz - groove_depth (default depth lz/2). `resolution` = (nx, ny, nz):
    cells along the groove axis, cells per lateral quarter-segment, and
    vertical cells. The bottom vertex layer (z=0) is flagged fixed.
    """
    if not 0.0 < opening_angle <= 180.0:
        raise ValueError(f"opening angle must be in (0, 180], got {opening_angle}")
    lx, ly, lz = (float(s) for s in size)
    nx, ny, nz = (int(r) for r in resolution)
    if min(nx, ny, nz) < 1:
        raise ValueError("resolution counts must be >= 1")
    depth = lz / 2.0 if groove_depth is None else float(groove_depth)
    if not 0.0 < depth < lz:
        raise ValueError("groove depth must be inside the block height")

    flat = opening_angle >= 180.0
    half = math.radians(opening_angle) / 2.0
    w_top = 0.0 if flat else depth * math.tan(half)
    if w_top >= ly / 2.0:
        raise ValueError("groove mouth wider than the block: reduce depth or angle")

    # Lateral grid: four segments with breakpoints at -w_top, 0, w_top so the
    # groove walls and apex line are exact grid planes.
    if flat:
        ys = np.linspace(-ly / 2.0, ly / 2.0, 4 * ny + 1)
    else:
        segs = [
            np.linspace(-ly / 2.0, -w_top, ny + 1),
            np.linspace(-w_top, 0.0, ny + 1),
            np.linspace(0.0, w_top, ny + 1),
            np.linspace(w_top, ly / 2.0, ny + 1),
        ]
        ys = np.concatenate([s if i == 0 else s[1:] for i, s in enumerate(segs)])
    xs = np.linspace(0.0, lx, nx + 1)
    n_y = len(ys)
    n_x = len(xs)
    n_z = nz + 1

    top = wedge_profile_height(ys, opening_angle, lz, depth)
    # vertex index (ix, iy, iz) -> flat id
    def vid(ix, iy, iz):
        return (ix * n_y + iy) * n_z + iz

    verts = np.empty((n_x * n_y * n_z, 3))
    for ix, x in enumerate(xs):
        for iy, y in enumerate(ys):
            zcol = np.linspace(0.0, top[iy], n_z)
            base = (ix * n_y + iy) * n_z
            verts[base : base + n_z, 0] = x
            verts[base : base + n_z, 1] = y
            verts[base : base + n_z, 2] = zcol

    tets = []
    for ix in range(n_x - 1):
        for iy in range(n_y - 1):
            for iz in range(n_z - 1):
                corner = [
                    vid(ix + dx, iy + dy, iz + dz) for dx, dy, dz in _HEX_CORNERS
                ]
                for tet in _HEX_TETS:
                    tets.append([corner[i] for i in tet])
    tets = np.asarray(tets, dtype=np.int64)
    vols = tet_volumes(verts, tets)
    flip = vols < 0.0
    if flip.any():
        tets[flip] = tets[flip][:, [0, 1, 3, 2]]

    fixed = [vid(ix, iy, 0) for ix in range(n_x) for iy in range(n_y)]
    return TetMesh.build(verts, tets, fixed=fixed)
