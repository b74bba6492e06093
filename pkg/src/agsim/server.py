"""Operator console endpoint: JSON lines over TCP.

The sim loop stays single threaded.  Socket work happens on daemon
threads that only touch two queues: inbound commands (drained once per
tick by the engine) and outbound snapshots.  Every inbound line is
answered with an ack; a malformed line gets ok=false and a diagnostic
instead of reaching the sim.
"""

from __future__ import annotations

import json
import queue
import socket
import threading


class RejectedCommand(ValueError):
    """Raised when an inbound command fails validation."""


_COMMAND_TYPES = ("task", "clarify_response", "takeover", "labels", "fault", "stop")


def parse_command(doc) -> dict:
    """Validate a decoded console command; returns it untouched.

    Checks shape only (types, required fields).  Semantic failures such
    as an unknown robot id surface later from the engine and come back
    as a not-ok ack on the same connection."""
    if not isinstance(doc, dict):
        raise RejectedCommand("command must be a JSON object")
    kind = doc.get("type")
    if kind not in _COMMAND_TYPES:
        raise RejectedCommand(f"unknown command type: {kind!r}")
    if kind == "task":
        if not isinstance(doc.get("text"), str) or not doc["text"].strip():
            raise RejectedCommand("task needs non-empty text")
        if doc.get("prior") is not None:
            prior = doc["prior"]
            if (not isinstance(prior, (list, tuple)) or len(prior) != 2
                    or not all(isinstance(v, (int, float)) for v in prior)):
                raise RejectedCommand("task prior must be [x, y]")
    elif kind == "clarify_response":
        if not isinstance(doc.get("text"), str):
            raise RejectedCommand("clarify_response needs text")
        if doc.get("id") is not None and not isinstance(doc["id"], int):
            raise RejectedCommand("clarify_response id must be an integer")
    elif kind == "takeover":
        if not isinstance(doc.get("robot"), str):
            raise RejectedCommand("takeover needs a robot id")
        if not doc.get("release"):
            point = doc.get("point")
            if (not isinstance(point, (list, tuple)) or len(point) != 2
                    or not all(isinstance(v, (int, float)) for v in point)):
                raise RejectedCommand("takeover needs point [x, y] or release: true")
    elif kind == "labels":
        labs = doc.get("labels")
        if (not isinstance(labs, list) or not labs
                or not all(isinstance(l, str) and l for l in labs)):
            raise RejectedCommand("labels needs a non-empty list of strings")
    elif kind == "fault":
        if doc.get("kind") not in ("odometry", "comm"):
            raise RejectedCommand("fault kind must be odometry or comm")
    return doc


class _Client:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.send_lock = threading.Lock()
        self.alive = True

    def send(self, doc: dict) -> bool:
        data = (json.dumps(doc, sort_keys=True) + "\n").encode()
        try:
            with self.send_lock:
                self.sock.sendall(data)
            return True
        except OSError:
            self.alive = False
            return False

    def close(self):
        self.alive = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class ConsoleServer:
    """Accepts console clients and shuttles commands/snapshots for one run.

    The engine polls `poll_commands()` every tick and calls `broadcast()`
    on its snapshot cadence; both are safe to call from the sim thread
    while reader threads feed the queue."""

    def __init__(self, port: int = 0, host: str = "127.0.0.1"):
        self.host = host
        self._commands: queue.Queue = queue.Queue()
        self._clients: list[_Client] = []
        self._lock = threading.Lock()
        self._origin: dict[int, _Client] = {}  # id(doc) -> sender, for rejects
        self._last_report_count = 0
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen()
        self.port = self._listener.getsockname()[1]
        self._closing = False
        threading.Thread(target=self._accept_loop, daemon=True).start()

    # --- socket side -------------------------------------------------------------

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            client = _Client(sock)
            with self._lock:
                self._clients.append(client)
            threading.Thread(target=self._read_loop, args=(client,), daemon=True).start()

    def _read_loop(self, client: _Client):
        fh = client.sock.makefile("r", encoding="utf-8", newline="\n")
        seq = 0
        try:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                seq += 1
                try:
                    doc = parse_command(json.loads(line))
                except json.JSONDecodeError as exc:
                    client.send({"type": "ack", "ok": False, "seq": seq,
                                 "error": f"bad JSON: {exc.msg}"})
                    continue
                except RejectedCommand as exc:
                    client.send({"type": "ack", "ok": False, "seq": seq,
                                 "error": str(exc)})
                    continue
                self._origin[id(doc)] = client
                self._commands.put(doc)
                client.send({"type": "ack", "ok": True, "seq": seq,
                             "command": doc.get("type")})
        except OSError:
            pass  # peer reset; fall through to cleanup
        self._drop(client)

    def _drop(self, client: _Client):
        client.close()
        with self._lock:
            if client in self._clients:
                self._clients.remove(client)

    # --- engine side -------------------------------------------------------------

    def poll_commands(self) -> list[dict]:
        out = []
        while True:
            try:
                out.append(self._commands.get_nowait())
            except queue.Empty:
                return out

    def reject(self, doc: dict, reason: str):
        """Engine-level refusal of a structurally valid command."""
        client = self._origin.pop(id(doc), None)
        if client is not None and client.alive:
            client.send({"type": "ack", "ok": False, "command": doc.get("type"),
                         "error": reason})

    def broadcast(self, snapshot: dict):
        reports = snapshot.get("reports", [])
        fresh = []
        # reports[] holds the base station's latest items; announce ones
        # that appeared since the previous frame on their own lines.
        total = snapshot.get("report_count", len(reports))
        if total > self._last_report_count:
            fresh = reports[-(total - self._last_report_count):]
            self._last_report_count = total
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            for rep in fresh:
                client.send({"type": "report", "report": rep})
            if not client.send(snapshot):
                self._drop(client)
        self._origin = {k: v for k, v in self._origin.items() if v.alive}

    def close(self):
        self._closing = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            self._drop(client)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
