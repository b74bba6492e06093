/**
 * Scripted operator: submit a task, wait for the robot's report to
 * come back over the relay, then stop the run.
 *
 * This is the console used in automation; it records everything it
 * saw so a test (or a human) can audit the session afterwards.
 */

import { ConsoleClient } from "./client.js";
import type { Ack } from "./protocol.js";
import { ConsoleStore } from "./state.js";

export interface SessionResult {
  store: ConsoleStore;
  taskAck: Ack;
  stopAck: Ack;
}

export function withTimeout<T>(p: Promise<T>, ms: number, label: string): Promise<T> {
  return new Promise((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error(`timed out waiting for ${label}`)), ms);
    p.then((v) => {
      clearTimeout(timer);
      resolve(v);
    }, (e) => {
      clearTimeout(timer);
      reject(e);
    });
  });
}

export async function taskReportStopSession(
  port: number,
  task: { text: string; robot?: string },
  timeoutMs = 60_000,
): Promise<SessionResult> {
  const store = new ConsoleStore();
  let sawReport: () => void = () => {};
  const firstReport = new Promise<void>((resolve) => {
    sawReport = resolve;
  });
  const client = await ConsoleClient.connect(port, "127.0.0.1", {
    onMessage: (msg) => store.apply(msg),
    onReport: () => sawReport(),
  });
  try {
    const taskAck = await withTimeout(
      client.send({ type: "task", ...task }), timeoutMs, "task ack");
    await withTimeout(firstReport, timeoutMs, "first report");
    const stopAck = await withTimeout(
      client.send({ type: "stop" }), timeoutMs, "stop ack");
    await withTimeout(client.waitClose(), timeoutMs, "end of run");
    return { store, taskAck, stopAck };
  } finally {
    client.close();
  }
}
