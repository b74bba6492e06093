"""Deterministic mission loop tying the world, robots, and radios together.

One Engine owns one run: a scenario (the ground truth), a mission document
(operator text plus a timed command script), and a seed.  Each tick the
world advances, robots sense and act, and every in-range pair of radios
syncs.  Everything notable lands in an append-only EventLog whose sha256
is the determinism fingerprint: same scenario, mission, and seed, same
hash.  Console-driven runs record operator commands in the log, so a run
can be replayed headless from its own log file.

Operator commands travel the gossip network as task-topic messages from
the base station; robots out of range get them when a mule contact
happens, not before.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import comms
from .autonomy import (
    Behavior,
    BehaviorExecutor,
    ControllerConfig,
    MissionContext,
    correct_map,
    plan_iteration,
    validate,
)
from .comms import MessageDB, link_trigger, pending_between, sync
from .mapper import AerialMapper
from .reasoner import PlanResponse, ScriptedReasoner, build_reasoner
from .router import AirRouter, TimerConfig, WaypointPlan, lawnmower
from .semgraph import REGION, TRAVERSABLE, Edge, GraphDelta, empty_graph, merge_remote, serialize
from .world import CameraPose, ConfigError, ScenarioConfig, World

FRAME_EVERY = 10      # camera ticks (1 Hz at dt=0.1)
ODOMETRY_EVERY = 10
TRACE_EVERY = 50      # graph-size samples
SNAPSHOT_EVERY = 2    # 5 Hz service cadence
LINK_DEBOUNCE = 5     # consecutive linked ticks before the router sees a peer
STALL_WINDOW = 5.0    # seconds of total quiet before a dead run is cut short


class EngineError(Exception):
    pass


@dataclass
class SimClock:
    tick: int = 0
    dt: float = 0.1

    @property
    def t(self) -> float:
        return self.tick * self.dt


def _san(value):
    """Make a value canonical-JSON safe: plain floats rounded to 4 decimals,
    tuples to lists, numpy scalars unwrapped."""
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        return round(float(value), 4)
    if isinstance(value, (list, tuple)):
        return [_san(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _san(v) for k, v in value.items()}
    if isinstance(value, bytes):
        return value.decode("utf-8", "replace")
    if hasattr(value, "item"):  # numpy scalar
        return _san(value.item())
    return str(value)


class EventLog:
    """Append-only run record; hash() fingerprints the whole run."""

    def __init__(self, events=None):
        self.events: list[dict] = list(events) if events else []

    def append(self, tick: int, kind: str, **data) -> dict:
        event = {"tick": int(tick), "kind": str(kind)}
        event.update(_san(data))
        self.events.append(event)
        return event

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def canonical_lines(self):
        return [json.dumps(e, sort_keys=True, separators=(",", ":")) for e in self.events]

    def hash(self) -> str:
        h = hashlib.sha256()
        for line in self.canonical_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def to_jsonl(self) -> str:
        return "\n".join(self.canonical_lines()) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "EventLog":
        events = []
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise EngineError(f"log line {ln} is not JSON: {exc}") from exc
        return EventLog(events)


@dataclass
class MetricsRecord:
    success: bool = False
    failure_mode: str | None = None
    time_s: float = 0.0
    distance: dict = field(default_factory=dict)
    user_interactions: int = 0
    api_calls: int = 0
    removed_edges: int = 0
    autonomy: float = 1.0
    answer: str | None = None
    found_labels: list = field(default_factory=list)
    plan_iterations: int = 0
    snapshot_count: int = 0
    latency: list = field(default_factory=list)  # {origin, topic, seq, to, latency_s}
    graph_trace: list = field(default_factory=list)  # [uav_distance_m, bytes]

    def to_doc(self) -> dict:
        return _san(dataclasses.asdict(self))


# --- mission documents ----------------------------------------------------------

def normalize_mission(doc) -> dict:
    """Fill mission defaults and sort the command script by time."""
    if isinstance(doc, str):
        doc = {"text": doc}
    mission = dict(doc)
    mission.setdefault("id", "adhoc")
    mission.setdefault("time_limit", 600.0)
    mission.setdefault("stop_on_answer", True)
    mission.setdefault("success", {"kind": "answer"})
    script = [dict(item) for item in mission.get("script", [])]
    if mission.get("text") and not any(s.get("type") == "task" for s in script):
        task = {"t": float(mission.get("task_at", 0.0)), "type": "task", "text": mission["text"]}
        if mission.get("prior") is not None:
            task["prior"] = list(mission["prior"])
        script.append(task)
    for item in script:
        item.setdefault("t", 0.0)
        if "type" not in item:
            raise ConfigError(f"script entry missing type: {item}")
    script.sort(key=lambda s: (float(s["t"]), s["type"]))
    mission["script"] = script
    return mission


def _data_file(kind: str, name: str) -> str | None:
    base = resources.files("agsim").joinpath("data", kind, f"{name}.json")
    return base.read_text() if base.is_file() else None


def load_scenario(source) -> ScenarioConfig:
    """Accept a path, a bundled scenario id, or an already-parsed config."""
    if isinstance(source, ScenarioConfig):
        return source
    if isinstance(source, dict):
        return ScenarioConfig.from_doc(source)
    path = Path(source)
    if path.is_file():
        return ScenarioConfig.from_json(path.read_text())
    text = _data_file("scenarios", str(source))
    if text is None:
        raise ConfigError(f"scenario not found: {source}")
    return ScenarioConfig.from_json(text)


def load_mission(source) -> dict:
    if isinstance(source, dict):
        return normalize_mission(source)
    path = Path(str(source))
    if path.is_file():
        return normalize_mission(json.loads(path.read_text()))
    text = _data_file("missions", str(source))
    if text is None:
        raise ConfigError(f"mission not found: {source}")
    return normalize_mission(json.loads(text))


_AXES = {"north": (0.0, 1.0), "south": (0.0, -1.0), "east": (1.0, 0.0), "west": (-1.0, 0.0)}


def _fmt_dist(d: float) -> str:
    return str(int(d)) if float(d).is_integer() else str(d)


def _shift_goal(doc: dict, distance: float) -> dict:
    """Move everything tagged group="goal" along the scenario's goal axis.

    Mutates and returns the raw scenario doc.  Used for sweeps that scale
    how far the objective sits from where the team starts.
    """
    extras = doc.get("extras") or {}
    origin = extras.get("goal_origin", doc.get("base", [0.0, 0.0]))
    ax, ay = _AXES[extras.get("goal_axis", "north")]
    gx, gy = origin[0] + ax * distance, origin[1] + ay * distance
    for obj in doc.get("objects") or ():
        if obj.get("group") == "goal":
            obj["x"], obj["y"] = gx, gy
    prior = doc.get("prior_graph")
    if prior:
        moved = set()
        regions = []
        for node in prior.get("added_nodes") or ():
            if (node.get("attributes") or {}).get("group") == "goal":
                node["x"], node["y"] = gx, gy
                moved.add(node["id"])
            elif node.get("kind") == "region":
                regions.append(node)
        if moved and regions:
            # Observation edges anchored the old position; swing them to
            # whichever surveyed region now sits closest.
            best = min(regions, key=lambda r: math.hypot(r["x"] - gx, r["y"] - gy))
            for edge in prior.get("added_edges") or ():
                if edge.get("kind") == "traversable":
                    continue
                for end, other in (("a", "b"), ("b", "a")):
                    if edge[end] in moved and edge[other] not in moved:
                        edge[other] = best["id"]
    return doc


# --- agents ---------------------------------------------------------------------

class _CursorMixin:
    """Per-(origin, topic) consumption cursors over a MessageDB."""

    def _fresh(self, topic: str):
        out = []
        for key in sorted(self.db.store):
            origin, top, seq = key
            if top != topic or origin == self.id:
                continue
            if seq > self._cursors.get((origin, top), 0):
                out.append(self.db.store[key])
                self._cursors[(origin, top)] = seq
        return out


class _UavAgent(_CursorMixin):
    def __init__(self, spec, scenario: ScenarioConfig, ugv_ids):
        self.id = spec.id
        self.x, self.y = float(spec.x), float(spec.y)
        self.heading = float(spec.heading)
        self.speed = float(scenario.speeds.get("uav", 10.0))
        self.altitude = scenario.camera.altitude
        self.db = MessageDB(self.id)
        self.mapper = AerialMapper(origin=scenario.base, id_prefix=f"{self.id}.")
        spacing = 0.8 * scenario.camera.footprint_m
        plan = WaypointPlan(lawnmower(scenario.bounds, spacing, margin=spacing / 4), loop=True)
        self.router = AirRouter(TimerConfig.from_doc(scenario.timers), plan, start=(self.x, self.y))
        for ugv_id in ugv_ids:
            self.router.register_peer(ugv_id)
        self.distance = 0.0
        self.radio_until = math.inf  # radio works while t < radio_until
        self.disabled = False
        self._cursors: dict = {}
        self._debounce: dict[str, int] = {}

    @property
    def pose(self):
        return (self.x, self.y)

    @property
    def position(self):
        return (self.x, self.y)

    def radio_on(self, t: float) -> bool:
        return not self.disabled and t < self.radio_until

    def tick(self, eng: "Engine", t: float, dt: float):
        for msg in self._fresh(comms.LABEL_SET):
            labels = [l for l in json.loads(msg.payload.decode()) if l != "road"]
            self.mapper.set_labels(labels)
        for msg in self._fresh(comms.UGV_ODOMETRY):
            doc = json.loads(msg.payload.decode())
            self.router.note_odometry(msg.origin, (doc["x"], doc["y"]), doc["t"])
        for msg in self._fresh(comms.AERIAL_GRAPH):
            self.mapper.ingest_remote([GraphDelta.from_json(msg.payload.decode())])
        if self.disabled:
            return

        found = self._debounced_peer(eng, t)
        comm_end = False
        if self.router.contact_peer is not None:
            peer = eng.ugvs.get(self.router.contact_peer)
            if peer is not None:
                comm_end = pending_between(self.db, peer.db) == 0
                if eng.linked(self.id, peer.id):
                    self.router.note_contact(peer.id, t)
        transition, goal = self.router.tick(t, self.pose, found, comm_end)
        if transition is not None:
            eng.log.append(eng.clock.tick, "mode", robot=self.id, **{
                "from": transition["from"], "to": transition["to"], "guard": transition["guard"]})
        if goal is not None:
            self._fly_toward(eng.world, goal, dt)

        if eng.clock.tick % FRAME_EVERY == 0:
            pose = CameraPose(self.x, self.y, self.heading, self.altitude)
            frame = eng.world.render_frame(pose, self.mapper.frame_labels())
            delta = self.mapper.process_frame(frame)
            if delta is not None:
                msg = comms.graph_delta_message(self.db, self.id, delta.to_json(), t)
                eng.note_publish(self.db, msg)
                eng.log.append(eng.clock.tick, "delta", robot=self.id, sequence=delta.sequence,
                               nodes=len(delta.added_nodes), edges=len(delta.added_edges))

    def _debounced_peer(self, eng: "Engine", t: float):
        candidates = []
        for ugv_id in sorted(eng.ugvs):
            if eng.linked(self.id, ugv_id):
                n = self._debounce.get(ugv_id, 0) + 1
                self._debounce[ugv_id] = n
                if n >= LINK_DEBOUNCE:
                    rec = self.router.records.get(ugv_id)
                    last = rec.last_contact_t if rec else -math.inf
                    candidates.append((last, ugv_id))
            else:
                self._debounce[ugv_id] = 0
        return min(candidates)[1] if candidates else None

    def _fly_toward(self, world: World, goal, dt: float):
        dx, dy = goal[0] - self.x, goal[1] - self.y
        dist = math.hypot(dx, dy)
        if dist < 1e-6:
            return
        step = min(self.speed * dt, dist)
        nx = self.x + dx / dist * step
        ny = self.y + dy / dist * step
        xmin, ymin, xmax, ymax = world.scenario.bounds
        nx = min(max(nx, xmin), xmax)
        ny = min(max(ny, ymin), ymax)
        self.heading = math.atan2(ny - self.y, nx - self.x)
        self.distance += math.hypot(nx - self.x, ny - self.y)
        self.x, self.y = nx, ny


class _UgvAgent(_CursorMixin):
    """Ground robot: task intake, receding-horizon planning, behavior
    execution, and the gossip bookkeeping around all three."""

    def __init__(self, spec, scenario: ScenarioConfig, world: World, backend, prior_graph):
        self.id = spec.id
        self.world = world
        self.backend = backend
        self.db = MessageDB(self.id)
        self.graph = merge_remote(empty_graph(scenario.base), [prior_graph]) if prior_graph else empty_graph(scenario.base)
        self.start_pose = (float(spec.x), float(spec.y), float(spec.heading))
        cfg = ControllerConfig(speed=float(scenario.speeds.get("ugv", 1.5)))
        self.executor = BehaviorExecutor(world, self.graph, self.start_pose, robot_id=self.id,
                                         cfg=cfg, noise=scenario.noise)
        self.ctx: MissionContext | None = None
        self.state = "idle"  # idle | executing | waiting | takeover | done | disabled
        self.queue: list[Behavior] = []
        self.authored_plan_version = -1
        self.teleop_target: tuple | None = None
        self.clarify_id = 0
        self.radio_until = math.inf
        self.disabled = False
        self._cursors: dict = {}
        self._published_labels: frozenset = frozenset()
        self._outbox_flushed = 0

    @property
    def pose(self):
        return self.executor.pose

    @property
    def position(self):
        return (self.executor.x, self.executor.y)

    @property
    def distance(self) -> float:
        return self.executor.distance

    def radio_on(self, t: float) -> bool:
        return not self.disabled and t < self.radio_until

    # --- message intake -----------------------------------------------------

    def tick(self, eng: "Engine", t: float, dt: float):
        for msg in self._fresh(comms.TASK):
            self._command(eng, t, json.loads(msg.payload.decode()))
        merged = 0
        incoming_regions = []
        for msg in self._fresh(comms.AERIAL_GRAPH):
            delta = GraphDelta.from_json(msg.payload.decode())
            self.executor.ingest(delta)
            merged += 1
            incoming_regions.extend(n for n in delta.added_nodes if n.kind == REGION)
        for node in incoming_regions:
            self._stitch(node)
        if merged and self.ctx is not None:
            self.ctx.graph_version += merged
        self.graph = self.executor.graph

        if self.disabled:
            return
        if self.state == "takeover":
            self._teleop(eng, dt)
        elif self.ctx is not None and self.state not in ("done",):
            self.ctx.autonomous_ticks += 1
            if self.state == "waiting" and self.ctx.graph_version > self.authored_plan_version:
                self.state = "plan"
            if self.state in ("idle", "plan"):
                self._plan(eng, t)
            if self.state == "executing":
                self._execute(eng, t, dt)

        self._flush_outbox(eng, t)
        if eng.clock.tick % ODOMETRY_EVERY == 0:
            msg = comms.odometry_message(self.db, self.id, self.executor.x, self.executor.y,
                                         self.executor.heading, t)
            eng.note_publish(self.db, msg, quiet=True)

    def _command(self, eng: "Engine", t: float, doc: dict):
        kind = doc.get("kind")
        if kind == "task":
            if doc.get("robot") not in (None, self.id):
                return
            self._accept_task(eng, t, doc)
        elif kind == "clarify_response":
            wanted = doc.get("id")
            pending = [q["id"] for q in self.ctx.pending_user] if self.ctx else []
            if not pending or (wanted is not None and wanted not in pending):
                eng.log.append(eng.clock.tick, "clarify_ignored", robot=self.id, id=wanted)
                return
            self.ctx.mission = f"{self.ctx.mission} {doc.get('text', '')}".strip()
            self.ctx.pending_user.clear()
            if self.state == "waiting":
                self.state = "plan"
            eng.log.append(eng.clock.tick, "clarify_answered", robot=self.id,
                           id=wanted if wanted is not None else pending[-1])
        elif kind == "takeover":
            if doc.get("robot") not in (None, self.id):
                return
            if doc.get("release"):
                self.teleop_target = None
                self.state = "plan" if self.ctx is not None else "idle"
            else:
                self.teleop_target = tuple(doc["point"])
                self.executor.active = None  # abort whatever was running
                self.state = "takeover"
            eng.log.append(eng.clock.tick, "takeover", robot=self.id,
                           active=self.state == "takeover", point=doc.get("point"))

    def _stitch(self, node):
        """Tie a freshly merged aerial region into ground the robot already
        drove.  Breadcrumbs dropped before the region existed have no edge
        to it, so without this the two map components never join."""
        g = self.executor.graph
        if node.id not in g.nodes:
            return
        best = None
        for other in g.regions():
            if other.id == node.id:
                continue
            d = math.hypot(other.x - node.x, other.y - node.y)
            if d <= 12.0 and (best is None or d < best[0]):
                best = (d, other)
        if best is None:
            return
        edge = Edge(node.id, best[1].id, TRAVERSABLE)
        if edge in g.edges:
            return
        if not self.world.traversable((node.x, node.y), (best[1].x, best[1].y)):
            return
        self.executor._emit(GraphDelta(added_edges=(edge,)))

    def _accept_task(self, eng: "Engine", t: float, doc: dict):
        prior = tuple(doc["prior"]) if doc.get("prior") else None
        self.ctx = MissionContext(mission=str(doc["text"]), prior=prior)
        self.queue = []
        self.executor.active = None
        self.state = "plan"
        eng.log.append(eng.clock.tick, "task_accepted", robot=self.id, text=doc["text"])

    # --- planning and execution ------------------------------------------------

    def _plan(self, eng: "Engine", t: float):
        plan, why = plan_iteration(self.ctx, self.executor.graph, self.pose, self.backend)
        self.authored_plan_version = self.ctx.graph_version
        eng.log.append(eng.clock.tick, "plan", robot=self.id,
                       behaviors=[b.to_doc() for b in plan], justification=why,
                       api_calls=self.ctx.api_call_count)
        eng.touch()
        if self.ctx.labels != self._published_labels:
            self._published_labels = self.ctx.labels
            msg = comms.label_set_message(self.db, self.id,
                                          sorted(self.ctx.labels | {"road"}), t)
            eng.note_publish(self.db, msg)
        self.executor.set_labels(self.ctx.labels)
        self.queue = list(plan)
        self._start_next(eng, t)

    def _start_next(self, eng: "Engine", t: float):
        while self.queue:
            behavior = self.queue.pop(0)
            fb = validate([behavior], self.executor.graph, self.pose)
            if not fb.valid:
                # The map moved underneath a queued behavior; replan.
                eng.log.append(eng.clock.tick, "plan_stale", robot=self.id,
                               behavior=behavior.to_doc(), reasons=[list(r) for r in fb.reasons])
                self.queue = []
                self.state = "plan"
                return
            self.executor.start(behavior, t)
            self.state = "executing"
            eng.log.append(eng.clock.tick, "behavior_start", robot=self.id, behavior=behavior.to_doc())
            return
        self.state = "plan"

    def _execute(self, eng: "Engine", t: float, dt: float):
        behavior = self.executor.active
        outcome = self.executor.step(t, dt)
        self._flush_outbox(eng, t)
        self.graph = self.executor.graph
        if outcome is None:
            return
        self.ctx.record(behavior, outcome)
        eng.touch()
        eng.log.append(eng.clock.tick, "behavior_end", robot=self.id,
                       behavior=behavior.to_doc(), outcome=outcome.to_doc())
        if outcome.status == "failed_edge" and outcome.edge is not None:
            self._correct(eng, t, outcome.edge)
            self.queue = []
            self.state = "plan"
            return
        if outcome.status != "success":
            self.queue = []
            self.state = "plan"
            return
        if behavior.verb == "answer":
            self.ctx.answer_text = behavior.text
            body = {"kind": "answer", "mission": self.ctx.mission, "text": behavior.text,
                    "findings": _mission_findings(self.ctx)}
            msg = comms.report_message(self.db, self.id, body, t)
            eng.note_publish(self.db, msg)
            eng.log.append(eng.clock.tick, "answer", robot=self.id, text=behavior.text)
            self.state = "done"
            return
        if behavior.verb == "clarify":
            if behavior.text not in [q["text"] for q in self.ctx.pending_user]:
                self.clarify_id += 1
                self.ctx.pending_user.append({"id": self.clarify_id, "text": behavior.text})
                body = {"kind": "clarify", "id": self.clarify_id, "text": behavior.text}
                msg = comms.report_message(self.db, self.id, body, t)
                eng.note_publish(self.db, msg)
                eng.log.append(eng.clock.tick, "clarify", robot=self.id, id=self.clarify_id,
                               text=behavior.text)
            self.state = "waiting"
            return
        self._start_next(eng, t)

    def _correct(self, eng: "Engine", t: float, edge):
        try:
            delta = correct_map(self.executor.graph, tuple(edge))
        except Exception:
            return
        self.executor._emit(delta)
        self.graph = self.executor.graph
        self.ctx.removed_edge_count += 1
        eng.log.append(eng.clock.tick, "map_correct", robot=self.id, edge=list(edge))
        self._flush_outbox(eng, t)

    def _flush_outbox(self, eng: "Engine", t: float):
        while self._outbox_flushed < len(self.executor.outbox):
            delta = self.executor.outbox[self._outbox_flushed]
            self._outbox_flushed += 1
            msg = comms.graph_delta_message(self.db, self.id, delta.to_json(), t)
            eng.note_publish(self.db, msg, quiet=True)

    def _teleop(self, eng: "Engine", dt: float):
        if self.ctx is not None:
            self.ctx.takeover_ticks += 1
        if self.teleop_target is None:
            return
        ex = self.executor
        tx, ty = self.teleop_target
        dist = math.hypot(tx - ex.x, ty - ex.y)
        if dist <= 1.0:
            return
        step = min(ex.cfg.speed * dt, dist)
        nx = ex.x + (tx - ex.x) / dist * step
        ny = ex.y + (ty - ex.y) / dist * step
        if self.world.traversable((ex.x, ex.y), (nx, ny)):
            ex.heading = math.atan2(ny - ex.y, nx - ex.x)
            ex.x, ex.y = nx, ny
            ex.distance += step


def _mission_findings(ctx: MissionContext) -> list:
    out = []
    for item in ctx.history:
        for finding in item.get("outcome", {}).get("findings", []):
            if finding not in out:
                out.append(finding)
    return out


class _BaseAgent(_CursorMixin):
    """The operator's radio: injects commands, collects reports, and keeps
    the operator's merged map view for snapshots."""

    def __init__(self, scenario: ScenarioConfig, position):
        self.id = "base"
        self.x, self.y = float(position[0]), float(position[1])
        self.db = MessageDB(self.id)
        self.graph = empty_graph(scenario.base)
        self.reports: list[dict] = []
        self.disabled = False
        self.radio_until = math.inf
        self._cursors: dict = {}

    @property
    def pose(self):
        return (self.x, self.y)

    @property
    def position(self):
        return (self.x, self.y)

    def radio_on(self, t: float) -> bool:
        return not self.disabled and t < self.radio_until

    def tick(self, eng: "Engine", t: float, dt: float):
        for msg in self._fresh(comms.AERIAL_GRAPH):
            self.graph = merge_remote(self.graph, [GraphDelta.from_json(msg.payload.decode())])
        for msg in self._fresh(comms.REPORT):
            body = json.loads(msg.payload.decode())
            body["robot"] = msg.origin
            self.reports.append(body)
            eng.log.append(eng.clock.tick, "report", robot=msg.origin, body=body)
            eng.touch()


# --- the engine --------------------------------------------------------------------

class Engine:
    def __init__(self, scenario, mission, seed=None, backend=None, use_uav=True,
                 use_prior=None, console=None, rtf=None, replay_commands=None,
                 goal_distance=None):
        scenario = load_scenario(scenario)
        if seed is not None:
            scenario = dataclasses.replace(scenario, seed=int(seed))
        self.mission = load_mission(mission)
        self.goal_distance = None if goal_distance is None else float(goal_distance)
        if self.goal_distance is not None:
            doc = json.loads(scenario.to_json())
            scenario = ScenarioConfig.from_doc(_shift_goal(doc, self.goal_distance))
            template = self.mission.get("text_template")
            if template:
                filled = template.format(d=_fmt_dist(self.goal_distance))
                old = self.mission.get("text")
                self.mission["text"] = filled
                for item in self.mission["script"]:
                    if item.get("type") == "task" and item.get("text") == old:
                        item["text"] = filled
        scenario.validate()
        self.scenario = scenario
        self.world = World(scenario)
        self.clock = SimClock()
        self.log = EventLog()
        self.console = console
        self.rtf = rtf
        self.use_uav = bool(use_uav)
        if use_prior is None:
            use_prior = bool(scenario.extras.get("prior_default", False))
        self.use_prior = bool(use_prior) and scenario.prior_graph is not None
        prior = None
        if self.use_prior:
            prior = GraphDelta.from_json(json.dumps(scenario.prior_graph))

        if backend is None:
            if self.mission.get("scripted_plans"):
                responses = [PlanResponse.from_doc(d) for d in self.mission["scripted_plans"]]
                backend = ScriptedReasoner(responses)
            else:
                backend = build_reasoner("rules")
        self.backend = backend

        ugv_specs = [r for r in scenario.robots if r.role == "ugv"]
        uav_specs = [r for r in scenario.robots if r.role == "uav"] if self.use_uav else []
        base_specs = [r for r in scenario.robots if r.role == "base"]
        if not ugv_specs:
            raise ConfigError("scenario has no ground robot")
        self.ugvs = {s.id: _UgvAgent(s, scenario, self.world, self.backend, prior)
                     for s in sorted(ugv_specs, key=lambda s: s.id)}
        self.uavs = {s.id: _UavAgent(s, scenario, sorted(self.ugvs))
                     for s in sorted(uav_specs, key=lambda s: s.id)}
        base_pos = (base_specs[0].x, base_specs[0].y) if base_specs else scenario.base
        self.base = _BaseAgent(scenario, base_pos)

        self._script = list(self.mission["script"]) if replay_commands is None else []
        self._replay = sorted(replay_commands or [], key=lambda c: c[0])
        self._rssi_cache: dict = {}
        self._link_state: dict = {}
        self._published: dict = {}   # key -> created_at
        self._arrived: set = set()   # (key, consumer)
        self._last_activity = 0
        self._idle_since: int | None = None
        self._task_count = 0
        self._active_faults: list[str] = []
        self._stop = None
        self._answered = False
        self.metrics = MetricsRecord()
        self.always_base = bool(scenario.extras.get("always_connected_base", False))

        self.log.append(0, "header",
                        scenario=json.loads(scenario.to_json()),
                        mission=self.mission, seed=scenario.seed,
                        options={"use_uav": self.use_uav, "use_prior": self.use_prior,
                                 "goal_distance": self.goal_distance})

    # --- shared lookups ------------------------------------------------------------

    def agents(self):
        out = [self.base]
        out.extend(self.uavs[k] for k in sorted(self.uavs))
        out.extend(self.ugvs[k] for k in sorted(self.ugvs))
        return out

    def linked(self, a: str, b: str) -> bool:
        pair = (a, b) if a < b else (b, a)
        return self._rssi_cache.get(pair, (False,))[0]

    def touch(self):
        self._last_activity = self.clock.tick

    def note_publish(self, db, message, quiet: bool = False):
        comms.publish(db, message)
        self._published[message.key] = message.created_at
        self.touch()
        if not quiet:
            self.log.append(self.clock.tick, "publish", origin=message.origin,
                            topic=message.topic, seq=message.seq)

    # --- command injection ------------------------------------------------------------

    def _inject(self, doc: dict, source: str):
        t = self.clock.t
        kind = doc.get("type")
        if kind == "task":
            body = {"kind": "task", "text": doc["text"]}
            if doc.get("prior") is not None:
                body["prior"] = [float(v) for v in doc["prior"]]
            if doc.get("robot"):
                body["robot"] = doc["robot"]
            msg = comms.task_message(self.base.db, "base", body, t)
            self.note_publish(self.base.db, msg)
        elif kind == "clarify_response":
            body = {"kind": "clarify_response", "text": doc.get("text", "")}
            if doc.get("id") is not None:
                body["id"] = int(doc["id"])
            msg = comms.task_message(self.base.db, "base", body, t)
            self.note_publish(self.base.db, msg)
        elif kind == "takeover":
            body = {"kind": "takeover", "robot": doc.get("robot")}
            if doc.get("release"):
                body["release"] = True
            else:
                body["point"] = [float(v) for v in doc["point"]]
            msg = comms.task_message(self.base.db, "base", body, t)
            self.note_publish(self.base.db, msg)
        elif kind == "labels":
            # Pre-brief the aerial detector classes without tasking anyone.
            msg = comms.label_set_message(self.base.db, "base",
                                          [str(l) for l in doc["labels"]], t)
            self.note_publish(self.base.db, msg)
        elif kind == "fault":
            self._fault(doc)
        elif kind == "stop":
            self._stop = "stopped"
        else:
            raise ConfigError(f"unknown command type: {kind!r}")
        self.log.append(self.clock.tick, "command", source=source, doc=doc)
        # The initial tasking is free; re-tasks, clarify answers, and manual
        # control all count as operator load.
        if kind == "task":
            self._task_count += 1
            if self._task_count > 1:
                self.metrics.user_interactions += 1
        elif kind in ("clarify_response", "takeover"):
            self.metrics.user_interactions += 1
        self.touch()

    def _fault(self, doc: dict):
        kind = doc.get("kind")
        targets = [a for a in self.agents() if a.id == doc.get("robot")] or self.agents()
        for agent in targets:
            if kind == "odometry":
                agent.disabled = True  # localization lost: safety stop
            elif kind == "comm":
                agent.radio_until = self.clock.t
                if doc.get("duration"):
                    agent._radio_resume = self.clock.t + float(doc["duration"])
            else:
                raise ConfigError(f"unknown fault kind: {kind!r}")
        self._active_faults.append(str(kind))
        self.log.append(self.clock.tick, "fault", fault=kind, robot=doc.get("robot"))

    def _script_step(self):
        t = self.clock.t + 1e-9
        while self._script and float(self._script[0]["t"]) <= t:
            self._inject(self._script.pop(0), "script")
        while self._replay and self._replay[0][0] <= self.clock.tick:
            _, doc, source = self._replay.pop(0)
            self._inject(doc, source)
        if self.console is not None:
            for doc in self.console.poll_commands():
                try:
                    self._inject(doc, "console")
                except ConfigError as exc:
                    self.console.reject(doc, str(exc))

    # --- radio sweep -------------------------------------------------------------------

    def _measure_links(self, t: float):
        agents = self.agents()
        self._rssi_cache = {}
        for i, a in enumerate(agents):
            for b in agents[i + 1:]:
                pair = (a.id, b.id) if a.id < b.id else (b.id, a.id)
                rssi = self.world.rssi(a.position, b.position)
                up = link_trigger(rssi, self.scenario.rssi.threshold)
                if self.always_base and "base" in pair:
                    up = True
                up = up and a.radio_on(t) and b.radio_on(t)
                self._rssi_cache[pair] = (up, rssi)
                was = self._link_state.get(pair, False)
                if up != was:
                    self._link_state[pair] = up
                    self.log.append(self.clock.tick, "link_up" if up else "link_down",
                                    a=pair[0], b=pair[1])

    def _comm_sweep(self, t: float):
        agents = {a.id: a for a in self.agents()}
        budget = int(self.scenario.comms.get("byte_budget", comms.DEFAULT_BUDGET))
        for pair in sorted(self._rssi_cache):
            if not self._rssi_cache[pair][0]:
                continue
            a, b = agents[pair[0]], agents[pair[1]]
            result = sync(a.db, b.db, budget)
            moved = result.a_to_b + result.b_to_a
            if not moved:
                continue
            self.touch()
            self.log.append(self.clock.tick, "sync", a=a.id, b=b.id,
                            bytes=result.bytes_transferred,
                            moved=[list(m.key) for m in moved])
            for msg, dst in [(m, b) for m in result.a_to_b] + [(m, a) for m in result.b_to_a]:
                self._note_arrival(msg, dst, t)

    def _note_arrival(self, msg, dst, t: float):
        consumer = None
        if msg.topic == comms.REPORT and dst.id == "base":
            consumer = "base"
        elif msg.topic == comms.TASK and dst.id in self.ugvs:
            consumer = dst.id
        if consumer is None or (msg.key, consumer) in self._arrived:
            return
        self._arrived.add((msg.key, consumer))
        latency = t - msg.created_at
        self.metrics.latency.append({"origin": msg.origin, "topic": msg.topic,
                                     "seq": msg.seq, "to": consumer,
                                     "latency_s": round(latency, 2)})

    # --- snapshots ---------------------------------------------------------------------

    def snapshot(self) -> dict:
        robots = []
        for uav in self.uavs.values():
            robots.append({"id": uav.id, "role": "uav", "x": uav.x, "y": uav.y,
                           "heading": uav.heading, "mode": uav.router.mode})
        for ugv in self.ugvs.values():
            x, y, heading = ugv.pose
            robots.append({"id": ugv.id, "role": "ugv", "x": x, "y": y,
                           "heading": heading, "mode": ugv.state})
        robots.append({"id": "base", "role": "base", "x": self.base.x, "y": self.base.y,
                       "heading": 0.0, "mode": "base"})
        g = self.base.graph
        pending = None
        for ugv in self.ugvs.values():
            if ugv.state == "waiting" and ugv.ctx and ugv.ctx.pending_user:
                q = ugv.ctx.pending_user[-1]
                pending = {"robot": ugv.id, "id": q["id"], "text": q["text"]}
        return _san({
            "type": "snapshot",
            "tick": self.clock.tick,
            "t": self.clock.t,
            "robots": robots,
            "graph": {
                "nodes": [{"id": n.id, "kind": n.kind, "label": n.label, "x": n.x, "y": n.y}
                          for n in sorted(g.nodes.values(), key=lambda n: n.id)],
                "edges": sorted([e.a, e.b, e.kind] for e in g.edges),
            },
            "links": sorted(list(p) for p, v in self._rssi_cache.items() if v[0]),
            "reports": self.base.reports[-5:],
            "report_count": len(self.base.reports),
            "pending_clarify": pending,
            "mission": {"id": self.mission["id"], "answered": self._answered},
        })

    # --- main loop ------------------------------------------------------------------------

    def run(self) -> tuple[MetricsRecord, EventLog]:
        time_limit = float(self.mission["time_limit"])
        wall_start = time.monotonic()
        reason = "timeout"
        while True:
            t = self.clock.t
            if t > time_limit:
                reason = "timeout"
                break
            self.world.step(t)
            self._restore_radios(t)
            self._script_step()
            if self._stop is not None:
                reason = self._stop
                break
            self._measure_links(t)
            for uav in self.uavs.values():
                uav.tick(self, t, self.clock.dt)
            for ugv in self.ugvs.values():
                ugv.tick(self, t, self.clock.dt)
            self.base.tick(self, t, self.clock.dt)
            self._comm_sweep(t)

            if self.clock.tick % SNAPSHOT_EVERY == 0:
                self.metrics.snapshot_count += 1
                if self.console is not None:
                    self.console.broadcast(self.snapshot())
            if self.uavs and self.clock.tick % TRACE_EVERY == 0:
                uav = self.uavs[sorted(self.uavs)[0]]
                self.metrics.graph_trace.append(
                    [round(uav.distance, 1), len(serialize(uav.mapper.graph))])

            if self.mission["stop_on_answer"] and self._answer_ready():
                reason = "answered"
                break
            if self._stalled():
                reason = "stalled"
                break
            self.clock.tick += 1
            if self.rtf:
                target = wall_start + self.clock.tick * self.clock.dt / self.rtf
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
        return self._finish(reason)

    def _restore_radios(self, t: float):
        for agent in self.agents():
            resume = getattr(agent, "_radio_resume", None)
            if resume is not None and t >= resume:
                agent.radio_until = math.inf
                agent._radio_resume = None

    def _answer_ready(self) -> bool:
        for ugv in self.ugvs.values():
            if ugv.ctx is not None and ugv.ctx.answer_text is not None:
                key = (ugv.id, comms.REPORT)
                got = comms.delivered(self.base.db, ugv.id, comms.REPORT)
                sent = ugv.db._seq.get(key, 0)
                if got >= sent:
                    self._answered = True
                    return True
        return False

    def _stalled(self) -> bool:
        """A run with no aerial mapper, no script left, and every ground
        robot parked (done, disabled, or waiting on an operator who is not
        there) can never change state again; cut it short."""
        if self.uavs or self._script or self._replay or self.console is not None:
            self._idle_since = None
            return False
        passive = all(
            ugv.state in ("done", "disabled", "waiting")
            or (ugv.state == "idle" and ugv.ctx is None)
            or ugv.disabled
            for ugv in self.ugvs.values()
        )
        if not passive:
            self._idle_since = None
            return False
        if self._idle_since is None:
            self._idle_since = self.clock.tick
        return (self.clock.tick - self._idle_since) * self.clock.dt >= STALL_WINDOW

    def _finish(self, reason: str) -> tuple[MetricsRecord, EventLog]:
        m = self.metrics
        m.time_s = self.clock.t
        for uav in self.uavs.values():
            m.distance[uav.id] = round(uav.distance, 2)
        for ugv in self.ugvs.values():
            m.distance[ugv.id] = round(ugv.distance, 2)
        auto = sum(u.ctx.autonomous_ticks for u in self.ugvs.values() if u.ctx)
        over = sum(u.ctx.takeover_ticks for u in self.ugvs.values() if u.ctx)
        m.autonomy = 1.0 if auto + over == 0 else auto / (auto + over)
        m.api_calls = sum(u.ctx.api_call_count for u in self.ugvs.values() if u.ctx)
        m.removed_edges = sum(u.ctx.removed_edge_count for u in self.ugvs.values() if u.ctx)
        m.plan_iterations = len(self.log.of_kind("plan"))
        for ugv in self.ugvs.values():
            if ugv.ctx and ugv.ctx.answer_text:
                m.answer = ugv.ctx.answer_text
        labels = set()
        for ugv in self.ugvs.values():
            if ugv.ctx:
                for finding in _mission_findings(ugv.ctx):
                    if finding.get("label"):
                        labels.add(finding["label"])
        m.found_labels = sorted(labels)
        m.success = self._evaluate(reason)
        if not m.success:
            m.failure_mode = self._active_faults[0] if self._active_faults else reason
        self.log.append(self.clock.tick, "run_end", reason=reason, success=m.success,
                        failure_mode=m.failure_mode, t=self.clock.t)
        return m, self.log

    def _evaluate(self, reason: str) -> bool:
        spec = self.mission["success"]
        kind = spec.get("kind", "answer")
        answered = any(u.ctx and u.ctx.answer_text for u in self.ugvs.values())
        if kind == "answer":
            return answered
        if kind == "find_label":
            return answered and spec["label"] in self.metrics.found_labels
        if kind == "reach":
            px, py = spec["point"]
            tol = float(spec.get("tol", 5.0))
            return any(math.hypot(u.pose[0] - px, u.pose[1] - py) <= tol
                       for u in self.ugvs.values())
        raise ConfigError(f"unknown success kind: {kind!r}")


def run(scenario, mission, seed=None, **kw) -> tuple[MetricsRecord, EventLog]:
    return Engine(scenario, mission, seed=seed, **kw).run()


def replay(source, console=None, rtf=None) -> tuple[MetricsRecord, EventLog]:
    """Re-run a recorded log; returns the fresh metrics and log.

    The log must start with the header event and end with run_end,
    otherwise it is rejected as truncated.  Passing a console replays
    the session live (same snapshot cadence as the original run).
    """
    log = source if isinstance(source, EventLog) else EventLog.from_jsonl(Path(source).read_text())
    if not log.events or log.events[0]["kind"] != "header":
        raise EngineError("log has no header event")
    if log.events[-1]["kind"] != "run_end":
        raise EngineError("truncated log: no run_end event")
    header = log.events[0]
    commands = [(e["tick"], e["doc"], e["source"]) for e in log.of_kind("command")]
    eng = Engine(ScenarioConfig.from_doc(header["scenario"]), header["mission"],
                 seed=header["seed"], use_uav=header["options"]["use_uav"],
                 use_prior=header["options"]["use_prior"],
                 goal_distance=header["options"].get("goal_distance"),
                 replay_commands=commands, console=console, rtf=rtf)
    return eng.run()


# --- artifact export -----------------------------------------------------------------

def export_run(metrics: MetricsRecord, log: EventLog, out_dir) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def _csv(name, headers, rows):
        path = out / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(headers)
            w.writerows(rows)
        written.append(str(path))

    summary = metrics.to_doc()
    summary["log_hash"] = log.hash()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    written.append(str(out / "summary.json"))
    _csv("distance.csv", ["robot", "meters"], sorted(metrics.distance.items()))
    _csv("latency.csv", ["origin", "topic", "seq", "to", "latency_s"],
         [[r["origin"], r["topic"], r["seq"], r["to"], r["latency_s"]] for r in metrics.latency])
    _csv("graph_trace.csv", ["distance_m", "bytes"], metrics.graph_trace)
    (out / "events.jsonl").write_text(log.to_jsonl())
    written.append(str(out / "events.jsonl"))
    return written


def export_batch(rows: list[dict], out_dir) -> list[str]:
    """One CSV row per run plus per-condition aggregates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    headers = ["condition", "seed", "success", "failure_mode", "time_s", "distance_m",
               "autonomy", "api_calls", "removed_edges"]
    runs_path = out / "batch_runs.csv"
    with runs_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(headers)
        for r in rows:
            w.writerow([r[h] for h in headers])
    agg = aggregate_batch(rows)
    agg_path = out / "batch_summary.csv"
    with agg_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "runs", "success_rate", "mean_distance_m", "mean_autonomy"])
        for row in agg:
            w.writerow([row["condition"], row["runs"], row["success_rate"],
                        row["mean_distance_m"], row["mean_autonomy"]])
    (out / "batch_summary.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    return [str(runs_path), str(agg_path), str(out / "batch_summary.json")]


def aggregate_batch(rows: list[dict]) -> list[dict]:
    by_cond: dict[str, list[dict]] = {}
    for r in rows:
        by_cond.setdefault(str(r["condition"]), []).append(r)
    out = []
    for cond in sorted(by_cond):
        rs = by_cond[cond]
        out.append({
            "condition": cond,
            "runs": len(rs),
            "success_rate": round(sum(1 for r in rs if r["success"]) / len(rs), 4),
            "mean_distance_m": round(sum(r["distance_m"] for r in rs) / len(rs), 2),
            "mean_autonomy": round(sum(r["autonomy"] for r in rs) / len(rs), 4),
        })
    return out
