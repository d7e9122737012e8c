"""Scenario definition, request orchestration, the expansion-ratio metric,
experiment batching, and persistence.

A scenario is a JSON document (versioned) holding everything a run needs:
phantom/mesh source, camera, dissection segment picks, feature parameters,
gains, selection parameters, solver and perception settings, and seeds.
Reports carry a content digest so reproducibility is checkable by equality.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .aps import CandidateScore, point_segment_distance, select_position
from .errors import (
    DegenerateFeatureError,
    ExposimError,
    FeatureConstructionError,
    PerceptionError,
    ScenarioError,
    SelectionError,
    SolverDivergence,
)
from .exposure import DissectionSegment, init_observation
from .geometry import TetMesh, bind_material_point, gen_wedge_phantom, load_tet_mesh
from .perception import CameraModel, render_first_hit, render_visibility, synth_segmentation
from .servo import (
    AssistSession,
    ControlGains,
    PerceptionConfig,
    ServoTrace,
    run_servo_loop,
)
from .xpbd import SimConfig, SimState, default_constraints, init_sim

log = logging.getLogger(__name__)

SCENARIO_SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "EXPOSIM_OUTDIR"

FAILURE_FEATURES = "feature_construction"
FAILURE_SOLVER = "solver_divergence"
FAILURE_SELECTION = "empty_feasible_set"
FAILURE_PERCEPTION = "perception"
FAILURE_SCENARIO = "scenario"


@dataclass
class Scenario:
    """Defaults describe the stock 45-degree wedge phantom: a soft grooved
    block viewed obliquely so the lower groove walls start partially
    occluded, with the reference feature/control parameters."""

    name: str = "wedge-45"
    # mesh source: generator parameters or a mesh file path
    mesh_file: str | None = None
    phantom_angle: float = 45.0
    phantom_size: tuple[float, float, float] = (0.06, 0.05, 0.024)
    phantom_resolution: tuple[int, int, int] = (9, 3, 3)
    phantom_groove_depth: float | None = 0.014
    # camera (oblique: 38 deg from vertical across the groove)
    camera_position: tuple[float, float, float] = (0.031, 0.05541, 0.080921)
    camera_target: tuple[float, float, float] = (0.0305, 0.0, 0.01)
    camera_up: tuple[float, float, float] = (1.0, 0.0, 0.0)
    camera_fov_deg: float = 40.0
    camera_width: int = 160
    camera_height: int = 120
    # dissection segment (surface picks, meters; groove apex line)
    segment_a: tuple[float, float, float] = (0.0205, 0.0, 0.01)
    segment_b: tuple[float, float, float] = (0.0405, 0.0, 0.01)
    # feature parameters
    ring_radii: tuple[float, ...] = (0.003, 0.006, 0.009)
    ring_ks: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    gamma_v: float = 1.5
    gamma_w: float = 1.5
    wedge_target: float = -1.0
    # marked target region: "auto" (within max ring radius) or face indices
    marked: str | list[int] = "auto"
    # control
    kp: float = 3e-4
    kd: float = 1e-5
    damping: float = 1e-6
    max_step: float = 8e-4
    steps: int = 40
    convergence_eps: float = 1e-4
    jd_refresh: int = 2  # speed/accuracy trade-off; 1 = strict per-step refresh
    error_weights: tuple[float, float, float] | None = None  # per block (wedge, shear, stretch)
    # APS
    alpha: float = 0.1
    l_min: float = 0.005
    stride: int = 8
    # solver
    solver_iterations: int = 50
    solver_tolerance: float = 1e-6
    distance_compliance: float = 1.5
    shape_compliance: float = 30.0
    chamfer_weight: float = 0.1
    chamfer_samples: int = 5
    fd_delta: float = 1e-4
    # perception
    cloud_samples: int = 3000
    cloud_sigma: float = 5e-4
    perception_cadence: int = 1
    sim_gap: float = 0.0  # relative perturbation of the estimator's compliances
    # reproducibility
    seed: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCENARIO_SCHEMA_VERSION
        return d

    @staticmethod
    def from_json(data: dict) -> "Scenario":
        data = dict(data)
        version = data.pop("schema_version", SCENARIO_SCHEMA_VERSION)
        if version != SCENARIO_SCHEMA_VERSION:
            raise ScenarioError(f"unsupported scenario schema version {version}")
        valid = {f for f in Scenario.__dataclass_fields__}
        unknown = set(data) - valid
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        sc = Scenario(**data)
        for key in ("phantom_size", "phantom_resolution", "camera_position", "camera_target",
                    "camera_up", "segment_a", "segment_b", "ring_radii", "ring_ks"):
            setattr(sc, key, tuple(getattr(sc, key)))
        if sc.error_weights is not None:
            sc.error_weights = tuple(sc.error_weights)
        if isinstance(sc.marked, list):
            sc.marked = [int(i) for i in sc.marked]
        return sc

    @staticmethod
    def load(path) -> "Scenario":
        try:
            return Scenario.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot load scenario {path}: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(canonical_json(self.to_json()) + "\n", encoding="utf-8")

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json()).encode()).hexdigest()

    # -- builders ---------------------------------------------------------

    def build_mesh(self) -> TetMesh:
        if self.mesh_file:
            return load_tet_mesh(self.mesh_file)
        return gen_wedge_phantom(
            self.phantom_angle,
            size=self.phantom_size,
            resolution=self.phantom_resolution,
            groove_depth=self.phantom_groove_depth,
        )

    def build_camera(self) -> CameraModel:
        return CameraModel.look_at(
            self.camera_position,
            self.camera_target,
            up=self.camera_up,
            fov_deg=self.camera_fov_deg,
            width=self.camera_width,
            height=self.camera_height,
        )

    def sim_config(self, track_energy: bool = False) -> SimConfig:
        return SimConfig(
            iterations=self.solver_iterations,
            tolerance=self.solver_tolerance,
            chamfer_weight=self.chamfer_weight,
            chamfer_samples=self.chamfer_samples,
            fd_delta=self.fd_delta,
            track_energy=track_energy,
        )

    def build_sim(self, mesh: TetMesh, estimator: bool = False) -> SimState:
        gap = 1.0 + (self.sim_gap if estimator else 0.0)
        cons = default_constraints(
            mesh,
            distance_compliance=self.distance_compliance * gap,
            shape_compliance=self.shape_compliance * gap,
        )
        return init_sim(mesh, cons, self.sim_config())

    def gains(self) -> ControlGains:
        return ControlGains(
            kp=self.kp, kd=self.kd, damping=self.damping,
            max_step=self.max_step, max_iterations=self.steps,
        )

    def weights_vector(self, pair_count: int) -> np.ndarray | None:
        if self.error_weights is None:
            return None
        w_wedge, w_shear, w_stretch = self.error_weights
        return np.concatenate([
            np.full(pair_count, float(w_wedge)),
            np.full(pair_count, float(w_shear)),
            np.full(2 * pair_count, float(w_stretch)),
        ])


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


@dataclass
class RunReport:
    scenario_digest: str
    seed: int
    rho: float
    success: bool
    stop_reason: str
    failure: str | None
    aps_face: int | None
    aps_score: float | None
    area_before: int
    area_after: int
    steps: int
    final_error_norm: float | None
    initial_wedge_error_norm: float | None
    final_wedge_error_norm: float | None
    timings: dict = field(default_factory=dict)
    trace_path: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Content hash excluding wall-clock fields."""
        d = self.to_json()
        d.pop("timings", None)
        d.pop("trace_path", None)
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def expansion_ratio(camera: CameraModel, marked_faces, state0, state_t, vis0=None, vis_t=None,
                    surface=None) -> float:
    """Projected-pixel-area ratio of the marked (visible) faces, after/before.

    The area A(x) counts pixels whose first hit is a marked face that is
    visible at state x (first-hit faces are visible by construction; an
    explicit mask further restricts the count when given).
    """
    marked = np.asarray(list(marked_faces), dtype=np.int64)
    if surface is None:
        raise ValueError("surface required")

    def area(state, vis) -> int:
        ids, _ = render_first_hit(camera, surface, state)
        sel = marked
        if vis is not None:
            sel = marked[np.asarray(vis.visible, dtype=bool)[marked]]
        return int(np.isin(ids, sel).sum())

    a0 = area(state0, vis0)
    if a0 == 0:
        raise PerceptionError("marked region has zero initial projected area")
    return area(state_t, vis_t) / a0


def auto_marked_faces(mesh: TetMesh, segment: DissectionSegment, radii) -> np.ndarray:
    """Default marked region: faces within the largest ring radius of the segment."""
    st = mesh.rest_state()
    a, b = segment.endpoints(mesh.surface, st)
    cents = mesh.surface.centroids(st.positions)
    return np.nonzero(point_segment_distance(cents, a, b) <= max(radii))[0]


@dataclass
class PreparedRequest:
    mesh: TetMesh
    world: SimState
    estimator: SimState
    camera: CameraModel
    segment: DissectionSegment
    features: object
    marked: np.ndarray
    vis0: object
    area0: int


def prepare_request(scenario: Scenario, segment_points=None) -> PreparedRequest:
    """Lines 2-6 of the request flow: init sims, bind segment, init features."""
    mesh = scenario.build_mesh()
    world = scenario.build_sim(mesh)
    estimator = scenario.build_sim(mesh, estimator=True)
    camera = scenario.build_camera()
    st0 = world.state()
    surf = mesh.surface
    a = scenario.segment_a if segment_points is None else segment_points[0]
    b = scenario.segment_b if segment_points is None else segment_points[1]
    q1 = bind_material_point(surf, a, st0)
    q2 = bind_material_point(surf, b, st0)
    segment = DissectionSegment(q1, q2)
    features = init_observation(
        surf, st0, segment,
        ks=scenario.ring_ks, radii=scenario.ring_radii,
        gamma_v=scenario.gamma_v, gamma_w=scenario.gamma_w,
        wedge_target=scenario.wedge_target,
    )
    if scenario.marked == "auto":
        marked = auto_marked_faces(mesh, segment, scenario.ring_radii)
    else:
        marked = np.asarray(scenario.marked, dtype=np.int64)
    first_hit, _ = render_first_hit(camera, surf, st0)
    seg_mask = synth_segmentation(camera, surf, st0, first_hit=first_hit)
    vis0 = render_visibility(camera, surf, st0, seg_mask=seg_mask, first_hit=first_hit)
    area0 = int(np.isin(np.where(seg_mask, first_hit, -1), marked).sum())
    if area0 == 0:
        raise PerceptionError("marked region not visible at the initial state")
    return PreparedRequest(mesh, world, estimator, camera, segment, features, marked, vis0, area0)


def run_assist_request(
    scenario: Scenario,
    segment_points=None,
    outdir: str | os.PathLike | None = None,
    fixed_position=None,
    seed: int | None = None,
) -> RunReport:
    """One full assistance request: init, APS (or a fixed position), servo, report.

    `fixed_position` replaces selection with the nearest surface face to the
    given point (the comparison baseline). Failures map to categorized
    reports, never silent partials.
    """
    t_start = time.perf_counter()
    seed = scenario.seed if seed is None else int(seed)
    digest = scenario.digest()
    timings: dict[str, float] = {}

    def failed(category: str, reason: str, **extra) -> RunReport:
        log.error("run failed (%s): %s", category, reason)
        return RunReport(
            scenario_digest=digest, seed=seed, rho=0.0, success=False,
            stop_reason="failed", failure=category,
            aps_face=extra.get("aps_face"), aps_score=extra.get("aps_score"),
            area_before=extra.get("area0", 0), area_after=0,
            steps=extra.get("steps", 0),
            final_error_norm=None, initial_wedge_error_norm=None,
            final_wedge_error_norm=None,
            timings={"total": time.perf_counter() - t_start},
        )

    try:
        prep = prepare_request(scenario, segment_points)
    except (FeatureConstructionError, DegenerateFeatureError) as exc:
        return failed(FAILURE_FEATURES, str(exc))
    except PerceptionError as exc:
        return failed(FAILURE_PERCEPTION, str(exc))
    except ExposimError as exc:
        return failed(FAILURE_SCENARIO, str(exc))
    timings["prepare"] = time.perf_counter() - t_start

    # assistance position
    t_aps = time.perf_counter()
    score_map: list[CandidateScore] = []
    try:
        if fixed_position is not None:
            cents = prep.mesh.surface.centroids(prep.world.positions)
            face = int(np.argmin(np.linalg.norm(cents - np.asarray(fixed_position), axis=1)))
            best = CandidateScore(face=face, centroid=cents[face], score=None, feasible=True)
        else:
            best, score_map = select_position(
                prep.world, prep.mesh.surface, prep.world.state(), prep.vis0,
                prep.features, scenario.alpha, scenario.l_min, stride=scenario.stride,
            )
    except (SelectionError, SolverDivergence) as exc:
        return failed(FAILURE_SELECTION, str(exc), area0=prep.area0)
    timings["aps"] = time.perf_counter() - t_aps

    prep.world.couple_face(best.face)
    prep.estimator.couple_face(best.face)

    session = AssistSession(
        world=prep.world,
        estimator=prep.estimator,
        features=prep.features,
        camera=prep.camera,
        gains=scenario.gains(),
        perception=PerceptionConfig(
            samples=scenario.cloud_samples,
            sigma=scenario.cloud_sigma,
            cadence=scenario.perception_cadence,
        ),
        rng=np.random.default_rng(seed),
        convergence_eps=scenario.convergence_eps,
        jd_refresh=scenario.jd_refresh,
        weights=scenario.weights_vector(prep.features.pair_count),
    )
    t_servo = time.perf_counter()
    trace = run_servo_loop(session)
    timings["servo"] = time.perf_counter() - t_servo

    state_t = prep.world.state()
    try:
        rho = expansion_ratio(
            prep.camera, prep.marked, prep.mesh.rest_state(), state_t, surface=prep.mesh.surface
        )
    except PerceptionError as exc:
        return failed(FAILURE_PERCEPTION, str(exc), area0=prep.area0, steps=len(trace.steps))
    ids_t, _ = render_first_hit(prep.camera, prep.mesh.surface, state_t)
    area_t = int(np.isin(ids_t, prep.marked).sum())

    n = prep.features.pair_count
    block = trace.error_block_norms(n)
    report = RunReport(
        scenario_digest=digest,
        seed=seed,
        rho=float(rho),
        success=bool(rho > 1.25),
        stop_reason=trace.stop_reason,
        failure=FAILURE_SOLVER if trace.stop_reason == "aborted" else None,
        aps_face=int(best.face),
        aps_score=None if best.score is None else float(best.score),
        area_before=prep.area0,
        area_after=area_t,
        steps=len(trace.steps),
        final_error_norm=float(np.linalg.norm(trace.steps[-1].error)) if trace.steps else None,
        initial_wedge_error_norm=float(block[0, 0]) if len(block) else None,
        final_wedge_error_norm=float(block[-1, 0]) if len(block) else None,
        timings={**timings, "total": time.perf_counter() - t_start},
    )
    if outdir is not None:
        persist_run(outdir, scenario, report, trace, score_map)
    return report


def persist_run(outdir, scenario: Scenario, report: RunReport, trace: ServoTrace,
                score_map: list[CandidateScore] | None = None) -> Path:
    """Per-run directory: scenario copy, JSON-lines trace, report, score map."""
    root = Path(outdir)
    run_dir = root / f"{scenario.name}-seed{report.seed}-{report.digest()[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    scenario.save(run_dir / "scenario.json")
    with open(run_dir / "trace.jsonl", "w", encoding="utf-8") as fh:
        for step in trace.steps:
            fh.write(canonical_json(step.to_json()) + "\n")
    report.trace_path = str(run_dir / "trace.jsonl")
    (run_dir / "report.json").write_text(
        canonical_json(report.to_json()) + "\n", encoding="utf-8"
    )
    if score_map:
        (run_dir / "score_map.json").write_text(
            canonical_json([c.to_json() for c in score_map]) + "\n", encoding="utf-8"
        )
    return run_dir


def run_batch(scenario: Scenario, seeds, outdir=None) -> dict:
    """Independent runs over seeds; aggregate mean/std and success rate."""
    reports = [run_assist_request(scenario, outdir=outdir, seed=s) for s in seeds]
    rhos = np.array([r.rho for r in reports], dtype=np.float64)
    agg = {
        "n": len(reports),
        "mean_rho": float(rhos.mean()) if len(reports) else None,
        "std_rho": float(rhos.std()) if len(reports) else None,
        "success_rate": float(np.mean([r.success for r in reports])) if len(reports) else None,
        "reports": [r.to_json() for r in reports],
    }
    if outdir is not None and reports:
        path = Path(outdir) / f"{scenario.name}-batch.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["seed", "rho", "success", "stop_reason", "steps", "aps_face"])
            for r in reports:
                wr.writerow([r.seed, r.rho, r.success, r.stop_reason, r.steps, r.aps_face])
    return agg


def compare_aps(scenario: Scenario, fixed_point, n: int, outdir=None) -> dict:
    """Paired trials, APS vs a fixed assistance position, matched seeds.

    Returns per-arm mean/std final expansion and success rates. n = 0 gives
    an empty table.
    """
    rows = {"aps": [], "fixed": []}
    for i in range(n):
        seed = scenario.seed + i
        rows["aps"].append(run_assist_request(scenario, outdir=outdir, seed=seed))
        rows["fixed"].append(
            run_assist_request(scenario, outdir=outdir, seed=seed, fixed_position=fixed_point)
        )
    table = {}
    for arm, reports in rows.items():
        rhos = np.array([r.rho for r in reports], dtype=np.float64)
        table[arm] = {
            "n": len(reports),
            "mean_rho": float(rhos.mean()) if len(reports) else None,
            "std_rho": float(rhos.std()) if len(reports) else None,
            "success_rate": float(np.mean([r.success for r in reports])) if len(reports) else None,
            "rhos": [float(r) for r in rhos],
            "reports": [r.to_json() for r in reports],
        }
    return table


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "runs"))
