"""Assistance-position selection.

Each candidate contact face gets a 2x3 averaged Jacobian (wedge and shear
sensitivity of the mean metrics to the end-effector position), scored by an
SVD heuristic that rewards wedge authority aligned with the wedge axis and
penalizes shear authority. Selection is a constrained greedy argmax over the
candidate score map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import SelectionError, SolverDivergence
from .exposure import FeatureSet, observation_jacobian
from .geometry import ParticleState, SurfaceMesh
from .perception import VisibilityMask
from .xpbd import SimState

log = logging.getLogger(__name__)

REASON_NOT_VISIBLE = "not_visible"
REASON_TOO_CLOSE = "too_close"
REASON_STRIDE = "stride_skipped"
REASON_DIVERGED = "solver_divergence"


@dataclass
class CandidateScore:
    face: int
    centroid: np.ndarray
    score: float | None  # heuristic M; None when not evaluated
    feasible: bool
    reason: str | None = None  # set when infeasible or skipped
    j_avg: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "face": int(self.face),
            "centroid": [float(v) for v in self.centroid],
            "score": None if self.score is None else float(self.score),
            "feasible": bool(self.feasible),
            "reason": self.reason,
        }


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom <= 0.0:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=-1)


def candidate_set(
    surface: SurfaceMesh,
    state: ParticleState,
    vis: VisibilityMask,
    segment_a: np.ndarray,
    segment_b: np.ndarray,
    l_min: float,
) -> list[CandidateScore]:
    """All face centroids, flagged feasible/infeasible with reasons.

    Feasible = camera-visible and at least l_min from the dissection segment
    (min point-to-segment Euclidean distance).
    """
    centroids = surface.centroids(state.positions)
    dists = point_segment_distance(centroids, segment_a, segment_b)
    out = []
    for fi in range(surface.face_count):
        if not vis.visible[fi]:
            out.append(CandidateScore(fi, centroids[fi], None, False, REASON_NOT_VISIBLE))
        elif dists[fi] < l_min:
            out.append(CandidateScore(fi, centroids[fi], None, False, REASON_TOO_CLOSE))
        else:
            out.append(CandidateScore(fi, centroids[fi], None, True))
    if not any(c.feasible for c in out):
        raise SelectionError("no feasible assistance position")
    return out


def avg_jacobian(sim: SimState, face: int, features: FeatureSet,
                 mean_rows: np.ndarray | None = None) -> np.ndarray:
    """2x3 sensitivity of the mean wedge/shear metrics to the EE position.

    Couples the candidate face at its current centroid on a clone (the
    caller's state is untouched), evaluates J_d at zero displacement, and
    chain-rules through the averaged observation rows.
    """
    if mean_rows is None:
        mean_rows = averaged_observation_rows(features, sim)
    work = sim.clone()
    coupling = work.couple_face(face)
    jd = work.deformation_jacobian(coupling.p0)
    return mean_rows @ jd


def averaged_observation_rows(features: FeatureSet, sim: SimState) -> np.ndarray:
    """(2, 3N) mean wedge row and mean shear row of J_O at the current state."""
    jo = observation_jacobian(features, sim.mesh.surface, sim.state())
    n = features.pair_count
    return np.stack([jo[:n].mean(axis=0), jo[n : 2 * n].mean(axis=0)])


_B_WEDGE = np.array([1.0, 0.0])
_B_SHEAR = np.array([0.0, 1.0])


def heuristic_score(j_avg: np.ndarray, alpha: float):
    """SVD heuristic M = |cos(u_w, b_w)| s_w - alpha |cos(u_s, b_s)| s_s.

    u_w (u_s) is the left singular vector closest in |cosine| to the wedge
    (shear) basis vector; singular values pair with their vectors
    positionally. On an exact alignment tie u_w = u1; if both argmaxes pick
    the same vector, the other vector takes the remaining role. A zero matrix
    scores 0.
    """
    j_avg = np.asarray(j_avg, dtype=np.float64)
    if j_avg.shape != (2, 3):
        raise ValueError(f"expected 2x3 averaged Jacobian, got {j_avg.shape}")
    u, s, vt = np.linalg.svd(j_avg)
    cos_w = np.abs(u[0, :])  # |cos(u_i, [1,0])| = |first component|
    cos_s = np.abs(u[1, :])
    iw = 0 if cos_w[0] >= cos_w[1] else 1
    is_ = 0 if cos_s[0] > cos_s[1] else 1
    if is_ == iw:
        is_ = 1 - iw
    m = cos_w[iw] * s[iw] - alpha * cos_s[is_] * s[is_]
    decomposition = {
        "u": u,
        "singular_values": s,
        "vt": vt,
        "wedge_index": iw,
        "shear_index": is_,
        "wedge_alignment": float(cos_w[iw]),
        "shear_alignment": float(cos_s[is_]),
    }
    return float(m), decomposition


def select_position(
    sim: SimState,
    surface: SurfaceMesh,
    state: ParticleState,
    vis: VisibilityMask,
    features: FeatureSet,
    alpha: float,
    l_min: float,
    stride: int = 1,
) -> tuple[CandidateScore, list[CandidateScore]]:
    """Greedy argmax of the heuristic over feasible candidates.

    `stride` > 1 evaluates every stride-th feasible candidate (the rest are
    marked skipped in the returned map). Ties break on the lowest face index;
    the winner always equals the maximum of the returned score map.
    """
    seg = features.segment
    a, b = seg.endpoints(surface, state)
    candidates = candidate_set(surface, state, vis, a, b, l_min)
    mean_rows = averaged_observation_rows(features, sim)
    feasible = [c for c in candidates if c.feasible]
    best: CandidateScore | None = None
    for idx, cand in enumerate(feasible):
        if stride > 1 and idx % stride:
            cand.reason = REASON_STRIDE
            continue
        try:
            cand.j_avg = avg_jacobian(sim, cand.face, features, mean_rows=mean_rows)
        except SolverDivergence as exc:
            cand.feasible = False
            cand.reason = REASON_DIVERGED
            log.warning("candidate %d diverged: %s", cand.face, exc)
            continue
        cand.score, _ = heuristic_score(cand.j_avg, alpha)
        if best is None or cand.score > best.score:
            best = cand
    if best is None:
        raise SelectionError("no candidate could be evaluated")
    return best, candidates
