/** Session protocol: message types, validation, and the shared state machine.
 *
 * The transition table and message schema are imported from the backend
 * package so the console can never drift from the server's contract.
 */

import transitions from "../../src/exposim/protocol/transitions.json";
import schema from "../../src/exposim/protocol/schema.json";

export const PROTOCOL_VERSION = 1;

export type SessionState = "idle" | "segment_set" | "aps_done";

export type ClientCommand =
  | "snapshot"
  | "set_segment"
  | "run_aps"
  | "step_control"
  | "mark_dissected"
  | "reset";

export interface Envelope {
  v: number;
  seq: number;
  type: string;
  [key: string]: unknown;
}

export interface SnapshotMessage extends Envelope {
  type: "snapshot";
  state: SessionState;
  request_index: number;
  vertices: number[][];
  faces: number[][];
  marked: number[];
  fixed: number[];
  camera: {
    position: number[];
    rotation: number[][];
    fx: number;
    fy: number;
    cx: number;
    cy: number;
    width: number;
    height: number;
  };
  p: number[] | null;
  segment: SegmentPayload | null;
  score_map: CandidateJson[] | null;
}

export interface SegmentPayload {
  a: number[];
  b: number[];
  pairs: { r: number; k: number; v: number[]; w: number[] }[];
  marked: number[];
}

export interface CandidateJson {
  face: number;
  centroid: number[];
  score: number | null;
  feasible: boolean;
  reason: string | null;
}

export interface TraceEventMessage extends Envelope {
  type: "trace_event";
  step: {
    index: number;
    p: number[];
    dp: number[];
    error_norms: { wedge: number; shear: number; stretch: number };
    rho_estimate: number;
    moved_vertices: number[];
    positions: number[][];
  };
}

export interface AckMessage extends Envelope {
  type: "ack";
  command: ClientCommand;
  payload: Record<string, unknown>;
}

export interface ErrorMessage extends Envelope {
  type: "error";
  reason: string;
  detail?: string;
}

export type ServerMessage = SnapshotMessage | TraceEventMessage | AckMessage | ErrorMessage;

type FieldSpec = string;
type SchemaTable = Record<string, Record<string, FieldSpec>>;

const clientSchema = (schema as { client_to_server: SchemaTable }).client_to_server;
const serverSchema = (schema as { server_to_client: SchemaTable }).server_to_client;

function checkField(value: unknown, spec: FieldSpec): boolean {
  let s = spec;
  if (s.endsWith("?")) {
    if (value === null || value === undefined) return true;
    s = s.slice(0, -1);
  }
  switch (s) {
    case "int":
      return typeof value === "number" && Number.isInteger(value);
    case "number":
      return typeof value === "number" && Number.isFinite(value);
    case "string":
      return typeof value === "string";
    case "bool":
      return typeof value === "boolean";
    case "vec3":
      return Array.isArray(value) && value.length === 3 && value.every((x) => typeof x === "number");
    case "object":
      return typeof value === "object" && value !== null && !Array.isArray(value);
    case "array":
      return Array.isArray(value);
    default:
      throw new Error(`unknown schema spec ${s}`);
  }
}

export function validateMessage(msg: unknown, direction: "client_to_server" | "server_to_client"): string {
  if (typeof msg !== "object" || msg === null) throw new Error("message is not an object");
  const m = msg as Envelope;
  if (m.v !== PROTOCOL_VERSION) throw new Error(`protocol version mismatch: ${m.v}`);
  if (!checkField(m.seq, "int")) throw new Error("missing or invalid seq");
  const table = direction === "client_to_server" ? clientSchema : serverSchema;
  const fields = table[m.type];
  if (fields === undefined) throw new Error(`unknown message type ${m.type}`);
  for (const [name, spec] of Object.entries(fields)) {
    if (!spec.endsWith("?") && !(name in m)) throw new Error(`${m.type}: missing field ${name}`);
    if (name in m && !checkField(m[name], spec)) {
      throw new Error(`${m.type}: field ${name} fails spec ${spec}`);
    }
  }
  return m.type;
}

export interface TransitionTable {
  version: number;
  initial: SessionState;
  states: Record<SessionState, Partial<Record<ClientCommand, SessionState>>>;
}

export const transitionTable = transitions as unknown as TransitionTable;

export function isAllowed(state: SessionState, command: ClientCommand): boolean {
  return command in transitionTable.states[state];
}

export function nextState(state: SessionState, command: ClientCommand): SessionState {
  const next = transitionTable.states[state][command];
  if (next === undefined) throw new Error(`command ${command} not allowed in state ${state}`);
  return next;
}
