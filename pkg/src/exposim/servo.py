"""PD visual-servoing controller over the composed Jacobian J_O J_d.

Each step: sense (visibility + cloud), register the estimator state, observe
the exposure metrics, compute the damped pseudoinverse control update, clamp
it, and advance the end-effector. The world model and the estimator are
separate solver instances so perception noise and model mismatch flow through
the same path they would with a real sensor.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFeatureError, ExposimError, SolverDivergence
from .exposure import FeatureSet, error as exposure_error, observation_jacobian, observe
from .perception import (
    CameraModel,
    render_first_hit,
    render_visibility,
    synth_point_cloud,
    synth_segmentation,
)
from .xpbd import SimState

log = logging.getLogger(__name__)

STOP_CONVERGED = "converged"
STOP_ITERATION_CAP = "iteration_cap"
STOP_STALL = "local_minimum"
STOP_ERROR = "aborted"


@dataclass
class ControlGains:
    kp: float = 3e-4
    kd: float = 1e-5
    damping: float = 1e-6  # Tikhonov lambda for the pseudoinverse
    max_step: float = 8e-4  # EE displacement clamp per step (m)
    max_iterations: int = 40

    def __post_init__(self):
        if self.kp <= 0:
            raise ValueError("kp must be > 0")
        if self.kd < 0 or self.damping < 0:
            raise ValueError("kd and damping must be >= 0")
        if self.max_step <= 0:
            raise ValueError("max_step must be > 0")


def damped_pinv(jac: np.ndarray, damping: float) -> np.ndarray:
    """(J^T J + damping^2 I)^-1 J^T; the exact pseudoinverse as damping -> 0."""
    jac = np.asarray(jac, dtype=np.float64)
    if not np.isfinite(jac).all():
        raise ValueError("non-finite Jacobian")
    jtj = jac.T @ jac + (damping**2) * np.eye(jac.shape[1])
    return np.linalg.solve(jtj, jac.T)


def control_step(
    err: np.ndarray,
    prev_err: np.ndarray | None,
    j_o: np.ndarray,
    j_d: np.ndarray,
    gains: ControlGains,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """PD update Dp = Kp J+ e + Kd J+ (e - e_prev), clamped to max_step.

    The derivative is a backward difference with unit step period. `weights`
    (per error entry) rescale both the error and the Jacobian rows, i.e. a
    weighted least-squares solution.
    """
    err = np.asarray(err, dtype=np.float64)
    if not np.isfinite(err).all():
        raise ValueError("non-finite error vector")
    jac = j_o @ j_d
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        jac = jac * weights[:, None]
        err = err * weights
        prev_err = None if prev_err is None else prev_err * weights
    pinv = damped_pinv(jac, gains.damping)
    delta = gains.kp * (pinv @ err)
    if prev_err is not None and gains.kd > 0.0:
        delta = delta + gains.kd * (pinv @ (err - prev_err))
    norm = float(np.linalg.norm(delta))
    if norm > gains.max_step:
        delta = delta * (gains.max_step / norm)
    return delta


@dataclass
class ServoStep:
    index: int
    p: np.ndarray
    dp: np.ndarray
    error: np.ndarray
    observation: np.ndarray
    residual: float
    energy: float
    hard_violation: float
    wall_time: float

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "p": [float(v) for v in self.p],
            "dp": [float(v) for v in self.dp],
            "error": [float(v) for v in self.error],
            "observation": [float(v) for v in self.observation],
            "residual": float(self.residual),
            "energy": float(self.energy),
            "hard_violation": float(self.hard_violation),
            "wall_time": float(self.wall_time),
        }


@dataclass
class ServoTrace:
    steps: list[ServoStep] = field(default_factory=list)
    stop_reason: str = STOP_ITERATION_CAP
    detail: str = ""

    @property
    def final_error(self) -> np.ndarray | None:
        return self.steps[-1].error if self.steps else None

    def error_block_norms(self, pair_count: int) -> np.ndarray:
        """Per-step norms of the wedge / shear / stretch error blocks, (T, 3)."""
        n = pair_count
        out = []
        for s in self.steps:
            e = s.error
            out.append([
                float(np.linalg.norm(e[:n])),
                float(np.linalg.norm(e[n : 2 * n])),
                float(np.linalg.norm(e[2 * n :])),
            ])
        return np.asarray(out)


@dataclass
class PerceptionConfig:
    samples: int = 4000
    sigma: float = 5e-4
    cadence: int = 1  # re-render visibility every n steps


@dataclass
class AssistSession:
    """One assistance request: world + estimator solvers coupled at the APS pick."""

    world: SimState
    estimator: SimState
    features: FeatureSet
    camera: CameraModel
    gains: ControlGains
    perception: PerceptionConfig
    rng: np.random.Generator
    convergence_eps: float = 1e-4
    stall_steps: int = 5
    stall_threshold: float = 1e-6
    jd_refresh: int = 1  # recompute J_d every n steps
    weights: np.ndarray | None = None

    p: np.ndarray | None = None
    prev_error: np.ndarray | None = None
    trace: ServoTrace = field(default_factory=ServoTrace)
    _stall_count: int = 0
    _last_jd: np.ndarray | None = None
    _last_vis = None

    def __post_init__(self):
        if self.world.coupling is None or self.estimator.coupling is None:
            raise ExposimError("session requires coupled world and estimator")
        self.p = self.world.coupling.p0.copy()

    def step(self) -> ServoStep:
        """One control iteration; raises StopIteration when the loop is done."""
        t0 = time.perf_counter()
        idx = len(self.trace.steps)
        surface = self.world.mesh.surface

        # world advances under the current EE position
        world_state = self.world.solve_quasistatic(self.p)

        # synthetic perception from the world, estimator registration
        if self._last_vis is None or idx % self.perception.cadence == 0:
            first_hit, _ = render_first_hit(self.camera, surface, world_state)
            seg_mask = synth_segmentation(self.camera, surface, world_state, first_hit=first_hit)
            self._last_vis = render_visibility(
                self.camera, surface, world_state, seg_mask=seg_mask, first_hit=first_hit
            )
        cloud = synth_point_cloud(
            self.camera, surface, world_state, self._last_vis,
            self.perception.samples, self.perception.sigma, seed=self.rng,
        )
        est_state = self.estimator.solve_quasistatic(self.p, cloud=cloud, vis=self._last_vis)

        obs = observe(self.features, surface, est_state)
        err = exposure_error(obs, self.features)
        err_norm = float(np.linalg.norm(err if self.weights is None else err * self.weights))

        if err_norm < self.convergence_eps:
            step = self._record(idx, np.zeros(3), err, obs, t0)
            self.trace.stop_reason = STOP_CONVERGED
            raise StopIteration
        j_o = observation_jacobian(self.features, surface, est_state)
        if self._last_jd is None or idx % self.jd_refresh == 0:
            self._last_jd = self.estimator.deformation_jacobian(self.p)
        dp = control_step(err, self.prev_error, j_o, self._last_jd, self.gains, self.weights)
        step = self._record(idx, dp, err, obs, t0)

        if float(np.linalg.norm(dp)) < self.stall_threshold:
            self._stall_count += 1
            if self._stall_count >= self.stall_steps:
                self.trace.stop_reason = STOP_STALL
                raise StopIteration
        else:
            self._stall_count = 0
        self.p = self.p + dp
        self.prev_error = err
        return step

    def _record(self, idx, dp, err, obs, t0) -> ServoStep:
        step = ServoStep(
            index=idx,
            p=self.p.copy(),
            dp=np.asarray(dp, dtype=np.float64),
            error=err.copy(),
            observation=obs.copy(),
            residual=self.world.constraint_residual(),
            energy=self.world.energy(),
            hard_violation=max(
                self.world.hard_constraint_violation(),
                self.estimator.hard_constraint_violation(),
            ),
            wall_time=time.perf_counter() - t0,
        )
        self.trace.steps.append(step)
        return step


def run_servo_loop(session: AssistSession, iterations: int | None = None) -> ServoTrace:
    """Run the per-request control loop to its stop condition.

    Stops at the iteration cap, on error-norm convergence, on stall (five
    consecutive sub-threshold steps: flagged as a local minimum), or on a
    solver/feature failure (trace kept, reason recorded).
    """
    cap = session.gains.max_iterations if iterations is None else int(iterations)
    session.trace.stop_reason = STOP_ITERATION_CAP
    try:
        for _ in range(cap):
            session.step()
    except StopIteration:
        pass
    except (SolverDivergence, DegenerateFeatureError) as exc:
        session.trace.stop_reason = STOP_ERROR
        session.trace.detail = str(exc)
        log.error("servo loop aborted: %s", exc)
    return session.trace
