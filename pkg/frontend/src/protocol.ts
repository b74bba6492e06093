/**
 * Wire types for the engine's console endpoint: JSON lines over TCP.
 *
 * The server pushes `snapshot`, `report`, and `ack` lines; the client
 * sends one command object per line. Commands are validated here
 * before anything touches a socket, so an empty task never leaves the
 * console.
 */

export interface Robot {
  id: string;
  role: "uav" | "ugv" | "base";
  x: number;
  y: number;
  heading: number;
  mode: string;
}

export interface GraphNode {
  id: string;
  kind: string;
  label: string | null;
  x: number;
  y: number;
}

export type GraphEdge = [string, string, string];

export interface Snapshot {
  type: "snapshot";
  tick: number;
  t: number;
  robots: Robot[];
  graph: { nodes: GraphNode[]; edges: GraphEdge[] };
  links: [string, string][];
  reports: Record<string, unknown>[];
  report_count: number;
  pending_clarify: { robot: string; id: number; text: string } | null;
  mission: { id: string; answered: boolean };
}

export interface ReportLine {
  type: "report";
  report: Record<string, unknown>;
}

export interface Ack {
  type: "ack";
  ok: boolean;
  /** line number on this connection; absent on engine-level rejections */
  seq?: number;
  command?: string;
  error?: string;
}

export type ServerMessage = Snapshot | ReportLine | Ack;

export type Command =
  | { type: "task"; text: string; robot?: string; prior?: [number, number] }
  | { type: "clarify_response"; text: string; id?: number }
  | { type: "takeover"; robot: string; point?: [number, number]; release?: boolean }
  | { type: "labels"; labels: string[] }
  | { type: "fault"; kind: "odometry" | "comm"; robot?: string; duration?: number }
  | { type: "stop" };

export class ProtocolError extends Error {}

function isRecord(v: unknown): v is Record<string, unknown> {
  return typeof v === "object" && v !== null && !Array.isArray(v);
}

function isFiniteNumber(v: unknown): v is number {
  return typeof v === "number" && Number.isFinite(v);
}

function isPoint(v: unknown): v is [number, number] {
  return Array.isArray(v) && v.length === 2 && v.every(isFiniteNumber);
}

export function parseServerLine(line: string): ServerMessage {
  let doc: unknown;
  try {
    doc = JSON.parse(line);
  } catch {
    throw new ProtocolError(`not JSON: ${line.slice(0, 80)}`);
  }
  if (!isRecord(doc)) throw new ProtocolError("server message is not an object");
  switch (doc.type) {
    case "ack": {
      if (typeof doc.ok !== "boolean") throw new ProtocolError("ack without ok");
      return doc as unknown as Ack;
    }
    case "report": {
      if (!isRecord(doc.report)) throw new ProtocolError("report line without body");
      return doc as unknown as ReportLine;
    }
    case "snapshot": {
      if (!isFiniteNumber(doc.tick) || !isFiniteNumber(doc.t))
        throw new ProtocolError("snapshot without clock");
      if (!Array.isArray(doc.robots) || !isRecord(doc.graph))
        throw new ProtocolError("snapshot without robots/graph");
      return doc as unknown as Snapshot;
    }
    default:
      throw new ProtocolError(`unknown server message type: ${String(doc.type)}`);
  }
}

/** Validate and encode one command as a wire line (newline included). */
export function serializeCommand(cmd: Command): string {
  switch (cmd.type) {
    case "task":
      if (!cmd.text || !cmd.text.trim()) throw new ProtocolError("task needs non-empty text");
      if (cmd.prior !== undefined && !isPoint(cmd.prior))
        throw new ProtocolError("task prior must be [x, y]");
      break;
    case "clarify_response":
      if (typeof cmd.text !== "string") throw new ProtocolError("clarify_response needs text");
      break;
    case "takeover":
      if (!cmd.robot) throw new ProtocolError("takeover needs a robot id");
      if (!cmd.release && !isPoint(cmd.point))
        throw new ProtocolError("takeover needs point [x, y] or release: true");
      break;
    case "labels":
      if (!Array.isArray(cmd.labels) || cmd.labels.length === 0
          || !cmd.labels.every((l) => typeof l === "string" && l.length > 0))
        throw new ProtocolError("labels needs a non-empty list of strings");
      break;
    case "fault":
      if (cmd.kind !== "odometry" && cmd.kind !== "comm")
        throw new ProtocolError("fault kind must be odometry or comm");
      break;
    case "stop":
      break;
    default:
      throw new ProtocolError(`unknown command type: ${(cmd as { type?: string }).type}`);
  }
  return JSON.stringify(cmd) + "\n";
}
