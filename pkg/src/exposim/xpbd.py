"""Quasi-static XPBD solver with rigid face coupling and a Chamfer data term.

The solver minimizes the weighted constraint energy of distance and
shape-matching constraints subject to hard boundary conditions (fixed
vertices and the coupled face, both realized as prescribed positions with
zero inverse mass). There are no velocities or inertia: each solve relaxes
the previous converged state under the new boundary conditions.

Gauss-Seidel projection is organized in conflict-free color batches so each
batch vectorizes; batches run in a fixed order, which keeps results
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConstraintError, CouplingError, SolverDivergence
from .geometry import ParticleState, TetMesh

_EPS_LEN = 1e-12


@dataclass
class DistanceConstraints:
    edges: np.ndarray  # (E, 2)
    rest: np.ndarray  # (E,)
    compliance: np.ndarray  # (E,)
    weight: np.ndarray  # (E,) energy weights K

    def __len__(self):
        return len(self.edges)


@dataclass
class ShapeMatchingConstraints:
    tets: np.ndarray  # (T, 4)
    rest_rel: np.ndarray  # (T, 4, 3) rest coords relative to rest centroid
    compliance: np.ndarray  # (T,)
    weight: np.ndarray  # (T,)

    def __len__(self):
        return len(self.tets)


@dataclass
class ConstraintSet:
    distance: DistanceConstraints
    shape: ShapeMatchingConstraints
    fixed: np.ndarray  # vertex indices


def default_constraints(
    mesh: TetMesh,
    distance_compliance: float = 0.0,
    shape_compliance: float = 0.0,
    distance_weight: float = 1.0,
    shape_weight: float = 1.0,
) -> ConstraintSet:
    """Distance constraints on all tet edges plus one shape match per tet."""
    edges = mesh.edges()
    rest = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
    if np.any(rest <= 0.0):
        raise ConstraintError("zero-length rest edge")
    dist = DistanceConstraints(
        edges=edges,
        rest=rest,
        compliance=np.full(len(edges), float(distance_compliance)),
        weight=np.full(len(edges), float(distance_weight)),
    )
    tet_pts = mesh.vertices[mesh.tets]
    rest_rel = tet_pts - tet_pts.mean(axis=1, keepdims=True)
    shape = ShapeMatchingConstraints(
        tets=mesh.tets.copy(),
        rest_rel=rest_rel,
        compliance=np.full(len(mesh.tets), float(shape_compliance)),
        weight=np.full(len(mesh.tets), float(shape_weight)),
    )
    return ConstraintSet(distance=dist, shape=shape, fixed=mesh.fixed.copy())


@dataclass
class SimConfig:
    iterations: int = 60  # max Gauss-Seidel sweeps per solve
    tolerance: float = 1e-6  # per-sweep max displacement convergence cutoff (m)
    chamfer_weight: float = 0.1
    chamfer_samples: int = 5  # surface samples per visible face (metric term)
    fd_delta: float = 1e-4  # J_d central-difference perturbation (m)
    max_correction: float = 5e-3  # per-sweep displacement clamp (m)
    track_energy: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be > 0")
        if self.fd_delta <= 0.0:
            raise ValueError("fd_delta must be > 0")


@dataclass
class Coupling:
    """Rigid attachment of one surface face to the end-effector translation."""

    face: int
    p0: np.ndarray  # first-contact EE position
    base: np.ndarray  # (3, 3) coupled vertex positions at coupling time
    verts: np.ndarray  # (3,) vertex indices
    last_target: np.ndarray  # EE position of the previous converged solve


def _cloud_local_planes(points: np.ndarray, tree: cKDTree, k: int = 8):
    """Per-point local plane fits (kNN centroid, PCA normal) of a cloud.

    Normal sign is arbitrary, which is fine for normal-projected corrections.
    """
    k = min(k, len(points))
    _, idx = tree.query(points, k=k)
    if k == 1:
        idx = idx[:, None]
    nbrs = points[idx]
    centroids = nbrs.mean(axis=1)
    centered = nbrs - centroids[:, None, :]
    cov = np.einsum("kij,kil->kjl", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return centroids, vecs[:, :, 0]  # smallest-variance direction


def _refine_rotation(r: np.ndarray, a: np.ndarray) -> np.ndarray:
    """One batched rotation-extraction step toward the polar factor of `a`.

    Warm-started across sweeps, so estimates converge while each step stays a
    cheap Rodrigues update. Exactly symmetric `a` (rest shape) yields a zero
    step, keeping the identity bit-exact at equilibrium.
    """
    num = np.cross(r[:, :, 0], a[:, :, 0])
    num += np.cross(r[:, :, 1], a[:, :, 1])
    num += np.cross(r[:, :, 2], a[:, :, 2])
    den = np.abs(np.einsum("kij,kij->k", r, a)) + 1e-12
    omega = num / den[:, None]
    angle = np.linalg.norm(omega, axis=1)
    active = angle > 1e-12
    if not active.any():
        return r
    axis = omega[active] / angle[active, None]
    s = np.sin(angle[active])
    c = 1.0 - np.cos(angle[active])
    kx, ky, kz = axis[:, 0], axis[:, 1], axis[:, 2]
    zeros = np.zeros_like(kx)
    k_mat = np.stack(
        [
            np.stack([zeros, -kz, ky], axis=-1),
            np.stack([kz, zeros, -kx], axis=-1),
            np.stack([-ky, kx, zeros], axis=-1),
        ],
        axis=1,
    )
    delta = np.eye(3) + s[:, None, None] * k_mat + c[:, None, None] * (k_mat @ k_mat)
    out = r.copy()
    out[active] = delta @ r[active]
    return out


def _greedy_color(groups: np.ndarray) -> list[np.ndarray]:
    """Partition constraint rows into batches with no shared vertices."""
    vert_colors: dict[int, set[int]] = {}
    colors = np.empty(len(groups), dtype=np.int64)
    for i, vs in enumerate(groups):
        used: set[int] = set()
        for v in vs:
            s = vert_colors.get(int(v))
            if s:
                used |= s
        c = 0
        while c in used:
            c += 1
        colors[i] = c
        for v in vs:
            vert_colors.setdefault(int(v), set()).add(c)
    return [np.nonzero(colors == c)[0] for c in range(int(colors.max()) + 1 if len(groups) else 0)]


class SimState:
    """Single-writer solver state; clone before parallel/branched use."""

    def __init__(self, mesh: TetMesh, constraints: ConstraintSet, config: SimConfig):
        n = mesh.vertex_count
        bad = [c for c in (constraints.distance.edges.ravel(), constraints.shape.tets.ravel(), constraints.fixed) if len(c) and (c.min() < 0 or c.max() >= n)]
        if bad:
            raise ConstraintError("constraint references out-of-range vertex")
        self.mesh = mesh
        self.constraints = constraints
        self.config = config
        self.positions = mesh.vertices.copy()
        self.inv_mass = np.ones(n)
        self.inv_mass[constraints.fixed] = 0.0
        self.coupling: Coupling | None = None
        self.energy_trace: list[float] = []
        self.residual_trace: list[float] = []
        # Warm-started per-tet rotation estimates, refined one Rodrigues step
        # per sweep (robust polar extraction without per-sweep SVDs).
        self._shape_rot = np.broadcast_to(np.eye(3), (len(constraints.shape), 3, 3)).copy()
        dist = constraints.distance
        self._dist_batches = [
            (rows, dist.edges[rows, 0], dist.edges[rows, 1], dist.rest[rows], dist.compliance[rows])
            for rows in _greedy_color(dist.edges)
        ]
        shp = constraints.shape
        self._shape_batches = [
            (rows, shp.tets[rows], shp.rest_rel[rows], 1.0 / (1.0 + shp.compliance[rows]))
            for rows in _greedy_color(shp.tets)
        ]
        self._movable = self.inv_mass > 0.0

    # -- construction helpers -------------------------------------------------

    def clone(self) -> "SimState":
        out = SimState.__new__(SimState)
        out.mesh = self.mesh
        out.constraints = self.constraints
        out.config = self.config
        out.positions = self.positions.copy()
        out.inv_mass = self.inv_mass.copy()
        out.coupling = None
        if self.coupling is not None:
            c = self.coupling
            out.coupling = Coupling(c.face, c.p0.copy(), c.base.copy(), c.verts.copy(), c.last_target.copy())
        out.energy_trace = list(self.energy_trace)
        out.residual_trace = list(self.residual_trace)
        out._shape_rot = self._shape_rot.copy()
        out._dist_batches = self._dist_batches
        out._shape_batches = self._shape_batches
        out._movable = out.inv_mass > 0.0
        return out

    def state(self, timestamp: int = 0) -> ParticleState:
        return ParticleState(self.positions.copy(), timestamp)

    # -- coupling -------------------------------------------------------------

    def couple_face(self, face: int, p0=None) -> Coupling:
        """Rigidly couple a surface face; p0 defaults to the current centroid."""
        if self.coupling is not None:
            raise CouplingError(f"face {self.coupling.face} already coupled")
        faces = self.mesh.surface.faces
        if not 0 <= face < len(faces):
            raise CouplingError(f"face {face} not on surface")
        verts = faces[face]
        centroid = self.positions[verts].mean(axis=0)
        if p0 is None:
            p0 = centroid
        p0 = np.asarray(p0, dtype=np.float64)
        if np.linalg.norm(p0 - centroid) > 1e-6:
            raise CouplingError("p0 must be the current face centroid (first contact)")
        self.coupling = Coupling(
            face=face,
            p0=p0.copy(),
            base=self.positions[verts].copy(),
            verts=verts.copy(),
            last_target=p0.copy(),
        )
        self.inv_mass[verts] = 0.0
        self._movable = self.inv_mass > 0.0
        return self.coupling

    def decouple(self) -> None:
        if self.coupling is None:
            return
        verts = self.coupling.verts
        self.inv_mass[verts] = 1.0
        self.inv_mass[self.constraints.fixed] = 0.0
        self.coupling = None
        self._movable = self.inv_mass > 0.0

    # -- solving ----------------------------------------------------------

    def solve_quasistatic(self, p_t=None, cloud=None, vis=None) -> ParticleState:
        """Relax to equilibrium under the coupling target and optional data term.

        `cloud` is a PointCloud whose points pull visible surface particles
        (one-sided nearest-neighbor correspondences, rebuilt every sweep);
        `vis` is the VisibilityMask selecting which faces contribute. Hard
        constraints are exact after every sweep.
        """
        cfg = self.config
        cons = self.constraints
        x = self.positions
        if p_t is not None:
            if self.coupling is None:
                raise CouplingError("p_t given but no coupling installed")
            p_t = np.asarray(p_t, dtype=np.float64)
            step = p_t - self.coupling.last_target
            if np.any(step != 0.0):
                # Rigid-translation prediction: exact for free-floating meshes,
                # a warm start otherwise.
                x[self._movable] += step
            x[self.coupling.verts] = self.coupling.base + (p_t - self.coupling.p0)
            self.coupling.last_target = p_t.copy()
        if cloud is not None:
            if vis is None:
                raise ValueError("cloud requires a visibility mask")
            data_targets_idx = self._visible_movable(vis)
            if len(cloud.points):
                tree = cKDTree(cloud.points)
                _, cloud_normals = _cloud_local_planes(cloud.points, tree)
            else:
                tree = None
                cloud_normals = None
        else:
            data_targets_idx = None
            tree = None
            cloud_normals = None

        lam = [np.zeros(len(rows)) for rows, *_ in self._dist_batches]
        w = self.inv_mass

        for sweep in range(cfg.iterations):
            x_before = x.copy()
            for ci, (rows, i, j, rest, alpha) in enumerate(self._dist_batches):
                d = x[j] - x[i]
                length = np.linalg.norm(d, axis=1)
                safe = np.maximum(length, _EPS_LEN)
                n = d / safe[:, None]
                c_val = length - rest
                wi, wj = w[i], w[j]
                denom = wi + wj + alpha
                ok = denom > 0.0
                dlam = np.where(ok, -(c_val + alpha * lam[ci]) / np.where(ok, denom, 1.0), 0.0)
                lam[ci] += dlam
                corr = dlam[:, None] * n
                x[i] -= wi[:, None] * corr
                x[j] += wj[:, None] * corr
            for batch in self._shape_batches:
                self._project_shape(batch, x)
            if tree is not None and data_targets_idx is not None and len(data_targets_idx):
                _, nn = tree.query(x[data_targets_idx], k=1)
                # Point-to-plane: pull toward the nearest cloud point, but only
                # along the cloud's local PCA normal. Unprojected pulls carry a
                # tangential sampling bias that would drag even a perfectly
                # registered surface sideways.
                pull = cloud.points[nn] - x[data_targets_idx]
                normals = cloud_normals[nn]
                along = np.einsum("ij,ij->i", pull, normals)
                x[data_targets_idx] += cfg.chamfer_weight * along[:, None] * normals
            # hard constraints last: prescribed exactly
            if self.coupling is not None:
                x[self.coupling.verts] = self.coupling.base + (
                    self.coupling.last_target - self.coupling.p0
                )

            delta_vec = x - x_before
            norms = np.linalg.norm(delta_vec, axis=1)
            over = (norms > cfg.max_correction) & self._movable
            if over.any():
                x[over] = x_before[over] + delta_vec[over] * (cfg.max_correction / norms[over])[:, None]
                norms[over] = cfg.max_correction
            if not np.isfinite(x).all():
                raise SolverDivergence(sweep)
            if cfg.track_energy:
                self.energy_trace.append(self.energy())
                self.residual_trace.append(self.constraint_residual())
            if norms.max() < cfg.tolerance:
                # Sub-tolerance sweeps are converged numerical noise; drop them
                # so a solve at equilibrium is exactly the identity.
                x[:] = x_before
                if cfg.track_energy:
                    self.energy_trace.pop()
                    self.residual_trace.pop()
                break
        return self.state()

    def _project_shape(self, batch, x: np.ndarray) -> None:
        rows, tets, q, stiff = batch
        p = x[tets]
        cm = p.mean(axis=1, keepdims=True)
        pc = p - cm
        a = np.einsum("kij,kil->kjl", pc, q)
        r = _refine_rotation(self._shape_rot[rows], a)
        self._shape_rot[rows] = r
        goals = cm + np.einsum("kxy,kiy->kix", r, q)
        corr = stiff[:, None, None] * (goals - p)
        movable = self._movable[tets]
        corr[~movable] = 0.0
        x[tets.ravel()] += corr.reshape(-1, 3)

    def _visible_movable(self, vis) -> np.ndarray:
        faces = self.mesh.surface.faces
        visible_faces = faces[np.asarray(vis.visible, dtype=bool)]
        idx = np.unique(visible_faces)
        return idx[self._movable[idx]]


    # -- diagnostics --------------------------------------------------------

    def energy(self) -> float:
        """Weighted constraint energy 0.5 * C^T K C of the soft constraints."""
        dist = self.constraints.distance
        x = self.positions
        d = x[dist.edges[:, 1]] - x[dist.edges[:, 0]]
        c_val = np.linalg.norm(d, axis=1) - dist.rest
        e_dist = 0.5 * float(np.sum(dist.weight * c_val**2))
        dev = self._shape_deviation()
        e_shape = 0.5 * float(np.sum(self.constraints.shape.weight * dev**2))
        return e_dist + e_shape

    def _shape_deviation(self) -> np.ndarray:
        """Frobenius deviation from the best-fit rigid goal, per tet."""
        shp = self.constraints.shape
        p = self.positions[shp.tets]
        cm = p.mean(axis=1, keepdims=True)
        pc = p - cm
        a = np.einsum("kij,kil->kjl", pc, shp.rest_rel)
        u, _, vt = np.linalg.svd(a)
        det = np.linalg.det(u @ vt)
        u_fixed = u.copy()
        u_fixed[:, :, 2] *= det[:, None]
        r = u_fixed @ vt
        goals = cm + np.einsum("kxy,kiy->kix", r, shp.rest_rel)
        return np.linalg.norm((p - goals).reshape(len(shp.tets), -1), axis=1)

    def constraint_residual(self) -> float:
        """Max absolute soft-constraint violation (m; Frobenius norm for shape)."""
        dist = self.constraints.distance
        x = self.positions
        d = x[dist.edges[:, 1]] - x[dist.edges[:, 0]]
        c_val = np.abs(np.linalg.norm(d, axis=1) - dist.rest)
        r_dist = float(c_val.max()) if len(c_val) else 0.0
        dev = self._shape_deviation()
        r_shape = float(dev.max()) if len(dev) else 0.0
        return max(r_dist, r_shape)

    def hard_constraint_violation(self) -> float:
        """Max deviation of fixed vertices and coupled face from prescription."""
        out = 0.0
        fixed = self.constraints.fixed
        if len(fixed):
            out = float(
                np.abs(self.positions[fixed] - self.mesh.vertices[fixed]).max()
            )
        if self.coupling is not None:
            c = self.coupling
            target = c.base + (c.last_target - c.p0)
            out = max(out, float(np.abs(self.positions[c.verts] - target).max()))
        return out

    # -- deformation Jacobian -------------------------------------------------

    def deformation_jacobian(self, p_t, delta: float | None = None) -> np.ndarray:
        """(3N, 3) central-difference sensitivity of particle positions to p.

        Assumes the state is converged at p_t. Each column runs two
        warm-started solves at p_t +/- delta * e_j on clones, so the caller's
        state is untouched.
        """
        if self.coupling is None:
            raise CouplingError("deformation Jacobian requires a coupling")
        p_t = np.asarray(p_t, dtype=np.float64)
        h = self.config.fd_delta if delta is None else float(delta)
        n = self.mesh.vertex_count
        jac = np.empty((3 * n, 3))
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            plus = self.clone()
            xp = plus.solve_quasistatic(p_t + e).positions
            minus = self.clone()
            xm = minus.solve_quasistatic(p_t - e).positions
            jac[:, axis] = ((xp - xm) / (2.0 * h)).ravel()
        return jac


def init_sim(mesh: TetMesh, constraints: ConstraintSet | None = None, config: SimConfig | None = None) -> SimState:
    """Build a solver at the rest state (an equilibrium by construction)."""
    if constraints is None:
        constraints = default_constraints(mesh)
    if config is None:
        config = SimConfig()
    return SimState(mesh, constraints, config)
