"""Operator session service over a JSON websocket protocol.

One operator at a time drives the request loop: pick a dissection segment,
run assistance-position selection, step the controller while trace events
stream back, then mark the site dissected (which persists a report and
re-initializes the simulation for the next request). The protocol state
machine and message schema ship as JSON documents next to this module; the
browser console consumes the same files.

The synchronous `SessionCore` holds all simulation state and is reusable
without a network; the websocket layer only decodes, sequences, and relays.
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .aps import select_position
from .errors import BindError, ExposimError, ProtocolError, SelectionError
from .harness import (
    RunReport,
    Scenario,
    canonical_json,
    persist_run,
    prepare_request,
)
from .geometry import eval_anchor
from .perception import render_first_hit
from .servo import AssistSession, PerceptionConfig

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


def load_protocol_asset(name: str) -> dict:
    with resources.files("exposim.protocol").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


_SCHEMA = load_protocol_asset("schema.json")
_TRANSITIONS = load_protocol_asset("transitions.json")


def _check_field(value, spec: str) -> bool:
    if spec.endswith("?"):
        if value is None:
            return True
        spec = spec[:-1]
    if spec == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if spec == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if spec == "string":
        return isinstance(value, str)
    if spec == "bool":
        return isinstance(value, bool)
    if spec == "vec3":
        return (
            isinstance(value, (list, tuple))
            and len(value) == 3
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        )
    if spec == "object":
        return isinstance(value, dict)
    if spec == "array":
        return isinstance(value, list)
    raise AssertionError(f"unknown schema spec {spec}")


def validate_message(msg: dict, direction: str) -> str:
    """Validate envelope + typed payload; returns the message type."""
    if not isinstance(msg, dict):
        raise ProtocolError("message is not an object")
    if msg.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: {msg.get('v')!r} != {PROTOCOL_VERSION}")
    if not _check_field(msg.get("seq"), "int"):
        raise ProtocolError("missing or invalid seq")
    mtype = msg.get("type")
    table = _SCHEMA[direction]
    if mtype not in table:
        raise ProtocolError(f"unknown message type {mtype!r}")
    for name, spec in table[mtype].items():
        if not spec.endswith("?") and name not in msg:
            raise ProtocolError(f"{mtype}: missing field {name!r}")
        if name in msg and not _check_field(msg.get(name), spec):
            raise ProtocolError(f"{mtype}: field {name!r} fails spec {spec!r}")
    return mtype


@dataclass
class SessionCore:
    """Protocol state machine bound to one scenario; network-free."""

    scenario: Scenario
    outdir: str | None = None
    state: str = _TRANSITIONS["initial"]
    request_index: int = 0
    reports: list[RunReport] = field(default_factory=list)

    def __post_init__(self):
        self._load_scene()

    def _load_scene(self) -> None:
        self.prep = None
        self.session: AssistSession | None = None
        self.score_map = None
        self.selected = None
        self.segment_points = None
        self._mesh = self.scenario.build_mesh()
        self._camera = self.scenario.build_camera()
        self._last_sent_positions: np.ndarray | None = None

    # -- protocol -----------------------------------------------------------

    def allowed(self, command: str) -> bool:
        return command in _TRANSITIONS["states"][self.state]

    def handle(self, msg: dict) -> list[dict]:
        """Apply one validated client message; returns outbound payloads
        (without envelope). Protocol violations raise ProtocolError and leave
        the state untouched.
        """
        mtype = validate_message(msg, "client_to_server")
        if not self.allowed(mtype):
            raise ProtocolError(
                f"command {mtype!r} not allowed in state {self.state!r} "
                f"(allowed: {sorted(_TRANSITIONS['states'][self.state])})"
            )
        out = getattr(self, f"_cmd_{mtype}")(msg)
        self.state = _TRANSITIONS["states"][self.state][mtype]
        return out

    # -- commands -------------------------------------------------------------

    def _cmd_snapshot(self, msg: dict) -> list[dict]:
        return [self.snapshot_message()]

    def _cmd_set_segment(self, msg: dict) -> list[dict]:
        a = tuple(float(v) for v in msg["a"])
        b = tuple(float(v) for v in msg["b"])
        try:
            self.prep = prepare_request(self.scenario, segment_points=(a, b))
        except (BindError, ExposimError) as exc:
            raise ProtocolError(f"segment rejected: {exc}") from exc
        self.segment_points = (a, b)
        self.score_map = None
        self.selected = None
        self.session = None
        return [{"type": "ack", "command": "set_segment", "payload": self._segment_payload()}]

    def _cmd_run_aps(self, msg: dict) -> list[dict]:
        if self.selected is None:  # idempotent until the segment changes
            try:
                best, score_map = select_position(
                    self.prep.world, self.prep.mesh.surface, self.prep.world.state(),
                    self.prep.vis0, self.prep.features,
                    self.scenario.alpha, self.scenario.l_min, stride=self.scenario.stride,
                )
            except SelectionError as exc:
                raise ProtocolError(f"selection failed: {exc}") from exc
            self.selected = best
            self.score_map = score_map
            self.prep.world.couple_face(best.face)
            self.prep.estimator.couple_face(best.face)
            self.session = AssistSession(
                world=self.prep.world,
                estimator=self.prep.estimator,
                features=self.prep.features,
                camera=self.prep.camera,
                gains=self.scenario.gains(),
                perception=PerceptionConfig(
                    samples=self.scenario.cloud_samples,
                    sigma=self.scenario.cloud_sigma,
                    cadence=self.scenario.perception_cadence,
                ),
                rng=np.random.default_rng(self.scenario.seed + self.request_index),
                convergence_eps=self.scenario.convergence_eps,
                jd_refresh=self.scenario.jd_refresh,
                weights=self.scenario.weights_vector(self.prep.features.pair_count),
            )
        payload = {
            "selected": self.selected.to_json(),
            "map": [c.to_json() for c in self.score_map],
        }
        return [{"type": "ack", "command": "run_aps", "payload": payload}]

    def _cmd_step_control(self, msg: dict) -> list[dict]:
        n = int(msg["n"])
        if n < 0:
            raise ProtocolError("step_control.n must be >= 0")
        out: list[dict] = []
        ran = 0
        for _ in range(n):
            try:
                step = self.session.step()
            except StopIteration:
                break
            ran += 1
            out.append({"type": "trace_event", "step": self._trace_event(step)})
        out.append({"type": "ack", "command": "step_control", "payload": {"steps_run": ran}})
        return out

    def _cmd_mark_dissected(self, msg: dict) -> list[dict]:
        report = self._finalize_report()
        self.reports.append(report)
        if self.outdir is not None:
            persist_run(self.outdir, self.scenario, report, self.session.trace,
                        self.score_map)
        self.request_index += 1
        self._load_scene()  # re-initialize between requests
        return [{"type": "ack", "command": "mark_dissected", "payload": {"report": report.to_json()}}]

    def _cmd_reset(self, msg: dict) -> list[dict]:
        self._load_scene()
        return [{"type": "ack", "command": "reset", "payload": {}}]

    # -- payload builders ---------------------------------------------------

    def _segment_payload(self) -> dict:
        prep = self.prep
        surf = prep.mesh.surface
        st = prep.world.state()
        a, b = prep.segment.endpoints(surf, st)
        pairs = []
        for p in prep.features.pairs:
            pairs.append({
                "r": p.ring.radius,
                "k": p.ring.k,
                "v": [float(x) for x in eval_anchor(p.v_anchor, surf, st)],
                "w": [float(x) for x in eval_anchor(p.w_anchor, surf, st)],
            })
        return {
            "a": [float(x) for x in a],
            "b": [float(x) for x in b],
            "pairs": pairs,
            "marked": [int(i) for i in prep.marked],
        }

    def _trace_event(self, step) -> dict:
        n = self.prep.features.pair_count
        e = step.error
        current = self.prep.world.positions
        if self._last_sent_positions is None:
            delta_idx = np.arange(len(current))
        else:
            moved = np.abs(current - self._last_sent_positions).max(axis=1) > 1e-9
            delta_idx = np.nonzero(moved)[0]
        self._last_sent_positions = current.copy()
        ids, _ = render_first_hit(self._camera, self.prep.mesh.surface, self.prep.world.state())
        area = int(np.isin(ids, self.prep.marked).sum())
        return {
            "index": int(step.index),
            "p": [float(v) for v in step.p],
            "dp": [float(v) for v in step.dp],
            "error_norms": {
                "wedge": float(np.linalg.norm(e[:n])),
                "shear": float(np.linalg.norm(e[n:2 * n])),
                "stretch": float(np.linalg.norm(e[2 * n:])),
            },
            "rho_estimate": area / self.prep.area0,
            "moved_vertices": [int(i) for i in delta_idx],
            "positions": [[float(v) for v in current[i]] for i in delta_idx],
        }

    def _finalize_report(self) -> RunReport:
        trace = self.session.trace
        state_t = self.prep.world.state()
        ids_t, _ = render_first_hit(self._camera, self.prep.mesh.surface, state_t)
        area_t = int(np.isin(ids_t, self.prep.marked).sum())
        rho = area_t / self.prep.area0
        n = self.prep.features.pair_count
        block = trace.error_block_norms(n) if trace.steps else np.zeros((0, 3))
        return RunReport(
            scenario_digest=self.scenario.digest(),
            seed=self.scenario.seed + self.request_index,
            rho=float(rho),
            success=bool(rho > 1.25),
            stop_reason="operator_marked" if trace.stop_reason == "iteration_cap" else trace.stop_reason,
            failure=None,
            aps_face=int(self.selected.face),
            aps_score=None if self.selected.score is None else float(self.selected.score),
            area_before=self.prep.area0,
            area_after=area_t,
            steps=len(trace.steps),
            final_error_norm=float(np.linalg.norm(trace.steps[-1].error)) if trace.steps else None,
            initial_wedge_error_norm=float(block[0, 0]) if len(block) else None,
            final_wedge_error_norm=float(block[-1, 0]) if len(block) else None,
        )

    def snapshot_message(self) -> dict:
        mesh = self._mesh if self.prep is None else self.prep.mesh
        surf = mesh.surface
        positions = (self._mesh.vertices if self.prep is None
                     else self.prep.world.positions)
        self._last_sent_positions = positions.copy()
        cam = self._camera
        msg = {
            "type": "snapshot",
            "state": self.state,
            "request_index": self.request_index,
            "vertices": [[float(v) for v in row] for row in positions],
            "faces": [[int(i) for i in f] for f in surf.faces],
            "marked": [] if self.prep is None else [int(i) for i in self.prep.marked],
            "fixed": [int(i) for i in mesh.fixed],
            "camera": {
                "position": [float(v) for v in cam.position],
                "rotation": [[float(v) for v in row] for row in cam.rotation],
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": cam.width, "height": cam.height,
            },
            "p": None,
            "segment": None,
            "score_map": None,
        }
        if self.session is not None and self.session.p is not None:
            msg["p"] = [float(v) for v in self.session.p]
        if self.prep is not None and self.segment_points is not None:
            msg["segment"] = self._segment_payload()
        if self.score_map is not None:
            msg["score_map"] = [c.to_json() for c in self.score_map]
        return msg


async def serve(scenario: Scenario, port: int, outdir=None, ping_interval: float | None = 20.0):
    """Run the websocket endpoint /session until cancelled.

    Accepts one operator at a time; later connections are turned away with an
    error message. Returns the running server (use `server.serve_forever()`).
    """
    from websockets.asyncio.server import serve as ws_serve

    core = SessionCore(scenario, outdir=outdir)
    busy = {"connected": False}

    async def handler(ws):
        if ws.request.path not in ("/session", "/"):
            await ws.close(code=4404, reason="unknown endpoint")
            return
        out_seq = 0

        async def send(payload: dict) -> None:
            nonlocal out_seq
            out_seq += 1
            msg = {"v": PROTOCOL_VERSION, "seq": out_seq, **payload}
            validate_message(msg, "server_to_client")
            await ws.send(canonical_json(msg))

        if busy["connected"]:
            await send({"type": "error", "reason": "busy",
                        "detail": "another operator session is active"})
            await ws.close(code=4409, reason="busy")
            return
        busy["connected"] = True
        last_client_seq = 0
        try:
            await send(core.snapshot_message())
            async for raw in ws:
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError as exc:
                    await send({"type": "error", "reason": "parse_error", "detail": str(exc)})
                    continue
                try:
                    validate_message(msg, "client_to_server")
                    if msg["seq"] <= last_client_seq:
                        raise ProtocolError(
                            f"sequence number {msg['seq']} not increasing (last {last_client_seq})"
                        )
                    last_client_seq = msg["seq"]
                    for payload in core.handle(msg):
                        await send(payload)
                except ProtocolError as exc:
                    await send({"type": "error", "reason": "protocol_error", "detail": str(exc)})
        finally:
            busy["connected"] = False

    return await ws_serve(handler, "127.0.0.1", port, ping_interval=ping_interval)


def serve_forever(scenario: Scenario, port: int, outdir=None) -> None:
    async def _main():
        server = await serve(scenario, port, outdir=outdir)
        log.info("session endpoint on ws://127.0.0.1:%d/session", port)
        await server.serve_forever()

    asyncio.run(_main())
