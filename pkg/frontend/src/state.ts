/**
 * Console view model.
 *
 * Truth lives in the engine: the whole view is a pure function of the
 * latest snapshot, so reconnecting rebuilds the picture from the next
 * frame. Only the report feed accumulates client-side, as a
 * convenience log of lines the server already announced.
 */

import type { Ack, GraphEdge, GraphNode, Robot, ServerMessage, Snapshot } from "./protocol.js";

export interface ConsoleView {
  tick: number;
  t: number;
  missionId: string;
  answered: boolean;
  robots: Map<string, Robot>;
  nodes: GraphNode[];
  edges: GraphEdge[];
  links: [string, string][];
  pendingClarify: { robot: string; id: number; text: string } | null;
  reportCount: number;
  latestReports: Record<string, unknown>[];
}

export function viewOf(snap: Snapshot): ConsoleView {
  return {
    tick: snap.tick,
    t: snap.t,
    missionId: snap.mission.id,
    answered: snap.mission.answered,
    robots: new Map(snap.robots.map((r) => [r.id, r])),
    nodes: snap.graph.nodes,
    edges: snap.graph.edges,
    links: snap.links,
    pendingClarify: snap.pending_clarify,
    reportCount: snap.report_count,
    latestReports: snap.reports,
  };
}

export class ConsoleStore {
  view: ConsoleView | null = null;
  reportFeed: Record<string, unknown>[] = [];
  acks: Ack[] = [];
  rejections: Ack[] = [];

  apply(msg: ServerMessage): void {
    if (msg.type === "snapshot") {
      this.view = viewOf(msg);
    } else if (msg.type === "report") {
      this.reportFeed.push(msg.report);
    } else {
      // seq-less acks are engine-level rejections pushed out of band
      (msg.seq === undefined ? this.rejections : this.acks).push(msg);
    }
  }
}
