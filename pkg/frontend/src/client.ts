/**
 * TCP JSON-lines client for the engine console endpoint.
 *
 * The server acks every inbound line in order, so command/ack pairing
 * is a FIFO; acks without a seq are engine-level rejections that
 * arrive out of band and go to `onRejection` instead.
 */

import * as net from "node:net";
import {
  type Ack,
  type Command,
  parseServerLine,
  ProtocolError,
  type ReportLine,
  type ServerMessage,
  serializeCommand,
  type Snapshot,
} from "./protocol.js";

export interface ClientEvents {
  onSnapshot?: (snap: Snapshot) => void;
  onReport?: (report: ReportLine["report"]) => void;
  onRejection?: (ack: Ack) => void;
  onMessage?: (msg: ServerMessage) => void;
  onClose?: () => void;
}

export class ConsoleClient {
  private buffer = "";
  private pending: Array<(ack: Ack) => void> = [];
  private closed = false;
  private closeWaiters: Array<() => void> = [];

  private constructor(private readonly sock: net.Socket, private readonly events: ClientEvents) {
    sock.setEncoding("utf-8");
    sock.on("data", (chunk: string) => this.feed(chunk));
    const done = () => this.handleClose();
    sock.on("close", done);
    sock.on("error", done);
  }

  static connect(port: number, host = "127.0.0.1", events: ClientEvents = {}): Promise<ConsoleClient> {
    return new Promise((resolve, reject) => {
      const sock = net.createConnection({ port, host }, () => {
        sock.off("error", reject);
        resolve(new ConsoleClient(sock, events));
      });
      sock.once("error", reject);
    });
  }

  private feed(chunk: string): void {
    this.buffer += chunk;
    for (;;) {
      const nl = this.buffer.indexOf("\n");
      if (nl < 0) return;
      const line = this.buffer.slice(0, nl).trim();
      this.buffer = this.buffer.slice(nl + 1);
      if (!line) continue;
      const msg = parseServerLine(line);
      this.events.onMessage?.(msg);
      if (msg.type === "snapshot") {
        this.events.onSnapshot?.(msg);
      } else if (msg.type === "report") {
        this.events.onReport?.(msg.report);
      } else if (msg.seq === undefined) {
        this.events.onRejection?.(msg);
      } else {
        this.pending.shift()?.(msg);
      }
    }
  }

  /** Send one command; resolves with its ack (ok or not). */
  send(cmd: Command): Promise<Ack> {
    const line = serializeCommand(cmd); // throws ProtocolError before any I/O
    if (this.closed) return Promise.reject(new ProtocolError("connection closed"));
    return new Promise((resolve) => {
      this.pending.push(resolve);
      this.sock.write(line);
    });
  }

  private handleClose(): void {
    if (this.closed) return;
    this.closed = true;
    this.events.onClose?.();
    for (const w of this.closeWaiters) w();
    this.closeWaiters = [];
  }

  /** Resolves when the server closes the stream (end of run) or we do. */
  waitClose(): Promise<void> {
    if (this.closed) return Promise.resolve();
    return new Promise((resolve) => this.closeWaiters.push(resolve));
  }

  close(): void {
    this.sock.destroy();
    this.handleClose();
  }
}
