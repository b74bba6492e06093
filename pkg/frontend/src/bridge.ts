/**
 * Browser bridge: one HTTP process that owns the TCP connection to the
 * engine and serves a single offline page.
 *
 *   GET  /          the page (inline, no assets)
 *   GET  /events    server-sent events: every engine message as JSON
 *   GET  /view.svg  latest rendered map
 *   POST /command   one command object; responds with its ack
 *
 * Run: node dist/bridge.js <engine-port> [http-port]
 */

import * as http from "node:http";
import { ConsoleClient } from "./client.js";
import { ProtocolError, type Command, type ServerMessage } from "./protocol.js";
import { renderSvg } from "./render.js";
import { ConsoleStore } from "./state.js";

const PAGE = `<!doctype html>
<html><head><meta charset="utf-8"><title>agsim console</title>
<style>
 body { font: 14px system-ui, sans-serif; margin: 1rem; display: flex; gap: 1rem; }
 #map { border: 1px solid #ccc; min-width: 740px; min-height: 300px; }
 #side { max-width: 30rem; }
 #reports div { border-bottom: 1px solid #eee; padding: 2px 0; }
 #clarify { color: #a33; }
 form { margin: 0.5rem 0; }
 input[type=text] { width: 20rem; }
</style></head>
<body>
<div id="map"></div>
<div id="side">
 <h3>mission <span id="mission"></span> <small id="clock"></small></h3>
 <p id="clarify"></p>
 <form id="taskform">
  <input type="text" id="tasktext" placeholder="task text">
  <button>send task</button>
 </form>
 <form id="clarifyform">
  <input type="text" id="clarifytext" placeholder="clarify answer">
  <button>answer</button>
 </form>
 <button id="stop">stop run</button>
 <h4>reports</h4>
 <div id="reports"></div>
</div>
<script>
const el = (id) => document.getElementById(id);
async function send(cmd) {
  const res = await fetch("/command", {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(cmd),
  });
  const ack = await res.json();
  if (!ack.ok) alert(ack.error || "rejected");
}
el("taskform").addEventListener("submit", (e) => {
  e.preventDefault();
  send({ type: "task", text: el("tasktext").value });
});
el("clarifyform").addEventListener("submit", (e) => {
  e.preventDefault();
  send({ type: "clarify_response", text: el("clarifytext").value });
});
el("stop").addEventListener("click", () => send({ type: "stop" }));
const es = new EventSource("/events");
es.onmessage = async (e) => {
  const msg = JSON.parse(e.data);
  if (msg.type === "snapshot") {
    el("mission").textContent = msg.mission.id + (msg.mission.answered ? " (answered)" : "");
    el("clock").textContent = "t=" + msg.t.toFixed(1) + "s";
    el("clarify").textContent = msg.pending_clarify
      ? msg.pending_clarify.robot + " asks: " + msg.pending_clarify.text : "";
    el("map").innerHTML = await (await fetch("/view.svg?tick=" + msg.tick)).text();
  } else if (msg.type === "report") {
    const div = document.createElement("div");
    div.textContent = JSON.stringify(msg.report);
    el("reports").prepend(div);
  }
};
</script>
</body></html>
`;

export async function startBridge(enginePort: number, httpPort = 0): Promise<http.Server> {
  const store = new ConsoleStore();
  const streams = new Set<http.ServerResponse>();

  const relay = (msg: ServerMessage) => {
    store.apply(msg);
    const data = `data: ${JSON.stringify(msg)}\n\n`;
    for (const res of streams) res.write(data);
  };
  const client = await ConsoleClient.connect(enginePort, "127.0.0.1", {
    onMessage: relay,
    onClose: () => {
      for (const res of streams) res.end();
      streams.clear();
    },
  });

  const server = http.createServer((req, res) => {
    const url = req.url ?? "/";
    if (req.method === "GET" && url === "/") {
      res.writeHead(200, { "content-type": "text/html; charset=utf-8" });
      res.end(PAGE);
    } else if (req.method === "GET" && url === "/events") {
      res.writeHead(200, {
        "content-type": "text/event-stream",
        "cache-control": "no-cache",
        connection: "keep-alive",
      });
      res.write(":ok\n\n");
      streams.add(res);
      req.on("close", () => streams.delete(res));
    } else if (req.method === "GET" && url.startsWith("/view.svg")) {
      if (store.view === null) {
        res.writeHead(503).end("no snapshot yet");
        return;
      }
      res.writeHead(200, { "content-type": "image/svg+xml" });
      res.end(renderSvg(store.view));
    } else if (req.method === "POST" && url === "/command") {
      let body = "";
      req.on("data", (c) => (body += c));
      req.on("end", async () => {
        try {
          const ack = await client.send(JSON.parse(body) as Command);
          res.writeHead(200, { "content-type": "application/json" });
          res.end(JSON.stringify(ack));
        } catch (err) {
          const message = err instanceof ProtocolError || err instanceof SyntaxError
            ? err.message : "command failed";
          res.writeHead(400, { "content-type": "application/json" });
          res.end(JSON.stringify({ type: "ack", ok: false, error: message }));
        }
      });
    } else {
      res.writeHead(404).end();
    }
  });
  server.on("close", () => client.close());
  await new Promise<void>((resolve) => server.listen(httpPort, "127.0.0.1", resolve));
  return server;
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("bridge.js")) {
  const enginePort = Number(process.argv[2]);
  const httpPort = Number(process.argv[3] ?? 0);
  if (!Number.isInteger(enginePort)) {
    console.error("usage: node dist/bridge.js <engine-port> [http-port]");
    process.exit(1);
  }
  startBridge(enginePort, httpPort).then((server) => {
    const addr = server.address();
    const port = typeof addr === "object" && addr ? addr.port : httpPort;
    console.log(`console page on http://127.0.0.1:${port}/`);
  }, (err) => {
    console.error(String(err));
    process.exit(1);
  });
}
