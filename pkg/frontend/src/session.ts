/** Client-side session: connection state, outgoing sequencing, bounded trace
 * buffers, and a mirror of the server's protocol state machine (which gates
 * the control panel buttons). All mutation flows through handleMessage /
 * send, so a recorded message log replays to an identical state.
 */

import {
  AckMessage,
  ClientCommand,
  Envelope,
  PROTOCOL_VERSION,
  ServerMessage,
  SessionState,
  SegmentPayload,
  SnapshotMessage,
  CandidateJson,
  TraceEventMessage,
  isAllowed,
  nextState,
  validateMessage,
} from "./protocol";

export const TRACE_BUFFER_LIMIT = 512;

export interface TracePoint {
  index: number;
  wedge: number;
  shear: number;
  stretch: number;
  rho: number;
}

export interface UiSessionState {
  connection: "disconnected" | "connecting" | "connected";
  protocolState: SessionState;
  requestIndex: number;
  snapshot: SnapshotMessage | null;
  segment: SegmentPayload | null;
  scoreMap: CandidateJson[] | null;
  selectedFace: number | null;
  tracePoints: TracePoint[];
  vertices: number[][] | null;
  lastError: string | null;
  pendingPicks: number[][];
}

export function initialUiState(): UiSessionState {
  return {
    connection: "disconnected",
    protocolState: "idle",
    requestIndex: 0,
    snapshot: null,
    segment: null,
    scoreMap: null,
    selectedFace: null,
    tracePoints: [],
    vertices: null,
    lastError: null,
    pendingPicks: [],
  };
}

export type Transport = { send(text: string): void };

export class SessionClient {
  state: UiSessionState = initialUiState();
  private outSeq = 0;
  private listeners: (() => void)[] = [];

  constructor(private transport: Transport | null = null) {}

  attach(transport: Transport): void {
    this.transport = transport;
    this.outSeq = 0;
    this.state.connection = "connected";
    this.emit();
  }

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  /** True when the state machine accepts the command right now. */
  canSend(command: ClientCommand): boolean {
    return this.state.connection === "connected" && isAllowed(this.state.protocolState, command);
  }

  send(command: ClientCommand, payload: Record<string, unknown> = {}): void {
    if (!this.transport) throw new Error("not connected");
    if (!this.canSend(command)) {
      throw new Error(`command ${command} not allowed in state ${this.state.protocolState}`);
    }
    this.outSeq += 1;
    const msg: Envelope = { v: PROTOCOL_VERSION, seq: this.outSeq, type: command, ...payload };
    validateMessage(msg, "client_to_server");
    this.transport.send(JSON.stringify(msg));
    // The server applies the same table; mirror it optimistically so button
    // enablement never disagrees with what the server will accept next.
    this.state.protocolState = nextState(this.state.protocolState, command);
    this.emit();
  }

  handleMessage(raw: string): ServerMessage {
    const msg = JSON.parse(raw) as ServerMessage;
    validateMessage(msg, "server_to_client");
    switch (msg.type) {
      case "snapshot":
        this.applySnapshot(msg as SnapshotMessage);
        break;
      case "trace_event":
        this.applyTrace(msg as TraceEventMessage);
        break;
      case "ack":
        this.applyAck(msg as AckMessage);
        break;
      case "error":
        this.state.lastError = `${(msg as ErrorMessageLike).reason}: ${(msg as ErrorMessageLike).detail ?? ""}`;
        break;
    }
    this.emit();
    return msg;
  }

  private applySnapshot(msg: SnapshotMessage): void {
    this.state.snapshot = msg;
    this.state.protocolState = msg.state;
    this.state.requestIndex = msg.request_index;
    this.state.vertices = msg.vertices.map((row) => row.slice());
    this.state.segment = msg.segment;
    this.state.scoreMap = msg.score_map;
    this.state.selectedFace = null;
  }

  private applyTrace(msg: TraceEventMessage): void {
    const s = msg.step;
    this.state.tracePoints.push({
      index: s.index,
      wedge: s.error_norms.wedge,
      shear: s.error_norms.shear,
      stretch: s.error_norms.stretch,
      rho: s.rho_estimate,
    });
    if (this.state.tracePoints.length > TRACE_BUFFER_LIMIT) {
      this.state.tracePoints.splice(0, this.state.tracePoints.length - TRACE_BUFFER_LIMIT);
    }
    if (this.state.vertices) {
      s.moved_vertices.forEach((vi, i) => {
        this.state.vertices![vi] = s.positions[i].slice();
      });
    }
  }

  private applyAck(msg: AckMessage): void {
    switch (msg.command) {
      case "set_segment":
        this.state.segment = msg.payload as unknown as SegmentPayload;
        this.state.pendingPicks = [];
        this.state.scoreMap = null;
        this.state.selectedFace = null;
        this.state.tracePoints = [];
        break;
      case "run_aps": {
        const payload = msg.payload as { selected: CandidateJson; map: CandidateJson[] };
        this.state.scoreMap = payload.map;
        this.state.selectedFace = payload.selected.face;
        break;
      }
      case "mark_dissected":
        this.state.requestIndex += 1;
        this.state.segment = null;
        this.state.scoreMap = null;
        this.state.selectedFace = null;
        this.state.tracePoints = [];
        this.state.pendingPicks = [];
        break;
      case "reset":
        this.state.segment = null;
        this.state.scoreMap = null;
        this.state.selectedFace = null;
        this.state.tracePoints = [];
        this.state.pendingPicks = [];
        break;
    }
  }
}

interface ErrorMessageLike {
  reason: string;
  detail?: string;
}
