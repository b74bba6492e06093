import { describe, expect, it } from "vitest";
import {
  type Command,
  parseServerLine,
  ProtocolError,
  serializeCommand,
} from "../src/protocol.js";

const SNAPSHOT = {
  type: "snapshot",
  tick: 42,
  t: 4.2,
  robots: [{ id: "ugv1", role: "ugv", x: 1, y: 2, heading: 0, mode: "drive" }],
  graph: { nodes: [], edges: [] },
  links: [],
  reports: [],
  report_count: 0,
  pending_clarify: null,
  mission: { id: "m", answered: false },
};

describe("parseServerLine", () => {
  it("accepts the three server message types", () => {
    const snap = parseServerLine(JSON.stringify(SNAPSHOT));
    expect(snap.type).toBe("snapshot");
    const ack = parseServerLine('{"type":"ack","ok":true,"seq":1,"command":"task"}');
    expect(ack).toMatchObject({ ok: true, seq: 1 });
    const rep = parseServerLine('{"type":"report","report":{"text":"hi"}}');
    expect(rep.type === "report" && rep.report.text).toBe("hi");
  });

  it("rejects garbage with a diagnostic", () => {
    expect(() => parseServerLine("{nope")).toThrow(ProtocolError);
    expect(() => parseServerLine('"just a string"')).toThrow(ProtocolError);
    expect(() => parseServerLine('{"type":"warp"}')).toThrow(/unknown server message/);
    expect(() => parseServerLine('{"type":"ack"}')).toThrow(/without ok/);
    expect(() => parseServerLine('{"type":"snapshot","tick":"x"}')).toThrow(/clock/);
  });
});

describe("serializeCommand", () => {
  it("round-trips a valid command as one JSON line", () => {
    const line = serializeCommand({ type: "task", text: "find the barrel", prior: [10, -4] });
    expect(line.endsWith("\n")).toBe(true);
    expect(JSON.parse(line)).toEqual({ type: "task", text: "find the barrel", prior: [10, -4] });
  });

  it("rejects malformed commands before any I/O", () => {
    const bad: Array<[Command, RegExp]> = [
      [{ type: "task", text: "   " }, /non-empty text/],
      [{ type: "task", text: "go", prior: [1] as unknown as [number, number] }, /prior/],
      [{ type: "takeover", robot: "ugv1" }, /point .* or release/],
      [{ type: "takeover", robot: "" , release: true }, /robot id/],
      [{ type: "labels", labels: [] }, /non-empty list/],
      [{ type: "fault", kind: "gremlins" as "comm" }, /fault kind/],
      [{ type: "warp" } as unknown as Command, /unknown command/],
    ];
    for (const [cmd, why] of bad) {
      expect(() => serializeCommand(cmd), JSON.stringify(cmd)).toThrow(why);
    }
  });

  it("accepts every command the server understands", () => {
    const fine: Command[] = [
      { type: "task", text: "go" },
      { type: "clarify_response", text: "the left one", id: 2 },
      { type: "takeover", robot: "ugv1", point: [3, 4] },
      { type: "takeover", robot: "ugv1", release: true },
      { type: "labels", labels: ["barrel"] },
      { type: "fault", kind: "comm", robot: "ugv1", duration: 5 },
      { type: "stop" },
    ];
    for (const cmd of fine) expect(() => serializeCommand(cmd)).not.toThrow();
  });
});
