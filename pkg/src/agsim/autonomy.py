"""Ground robot autonomy: behavior plans, validation, and execution.

A plan is a short behavior sequence produced by a reasoner backend,
screened by validate() against the robot's current graph, then run one
behavior at a time by BehaviorExecutor.  Execution is tick-stepped so
the engine can interleave sensing and comms between controller steps;
execute_behavior() wraps the stepping loop for synchronous use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .semgraph import (
    OBJECT,
    OBSERVABLE,
    REGION,
    TRAVERSABLE,
    Edge,
    GraphDelta,
    Node,
    NodeIdAllocator,
    NotARegion,
    SemanticGraph,
    UnknownEdge,
    apply_delta,
    nearest_node,
    shortest_path,
)

VERBS = ("goto", "map_region", "explore", "inspect", "answer", "clarify")

UNKNOWN_VERB = "UNKNOWN_VERB"
BAD_ARITY = "BAD_ARITY"
UNKNOWN_NODE = "UNKNOWN_NODE"
UNREACHABLE = "UNREACHABLE"
NO_VANTAGE = "NO_VANTAGE"

# Required argument fields per verb; anything else set is an arity error.
_ARITY = {
    "goto": ("node",),
    "map_region": ("node",),
    "inspect": ("node",),
    "explore": ("point", "radius"),
    "answer": ("text",),
    "clarify": ("text",),
}
_OPTIONAL = {"inspect": ("text",)}  # inspect may carry a query string
_FIELDS = ("node", "point", "radius", "text")


@dataclass(frozen=True)
class Behavior:
    verb: str
    node: str | None = None
    point: tuple | None = None
    radius: float | None = None
    text: str | None = None

    def to_doc(self) -> dict:
        doc = {"verb": self.verb}
        for name in _FIELDS:
            val = getattr(self, name)
            if val is not None:
                doc[name] = list(val) if name == "point" else val
        return doc

    @staticmethod
    def from_doc(doc: dict) -> "Behavior":
        point = doc.get("point")
        if point is not None:
            point = tuple(float(v) for v in point)
        radius = doc.get("radius")
        return Behavior(
            verb=str(doc["verb"]),
            node=None if doc.get("node") is None else str(doc["node"]),
            point=point,
            radius=None if radius is None else float(radius),
            text=None if doc.get("text") is None else str(doc["text"]),
        )


def goto(node: str) -> Behavior:
    return Behavior("goto", node=node)


def map_region(node: str) -> Behavior:
    return Behavior("map_region", node=node)


def explore(point, radius: float = 20.0) -> Behavior:
    return Behavior("explore", point=(float(point[0]), float(point[1])), radius=float(radius))


def inspect(node: str, query: str | None = None) -> Behavior:
    return Behavior("inspect", node=node, text=query)


def answer(text: str) -> Behavior:
    return Behavior("answer", text=text)


def clarify(text: str) -> Behavior:
    return Behavior("clarify", text=text)


@dataclass(frozen=True)
class ValidationFeedback:
    verdict: str  # "valid" | "invalid"
    reasons: tuple = ()  # (behavior index, code, message)

    @property
    def valid(self) -> bool:
        return self.verdict == "valid"

    def to_doc(self) -> dict:
        return {"verdict": self.verdict, "reasons": [list(r) for r in self.reasons]}


def validate(plan, graph: SemanticGraph, pose, observation_radius: float = 30.0) -> ValidationFeedback:
    """Screen a behavior sequence against the current graph.

    Per behavior the first failing check is reported, in this order:
    verb known, arity, referenced node exists, goto target reachable over
    traversable edges from the region nearest the robot, map_region
    target has a region vantage within observation_radius.
    """
    reasons = []
    for i, b in enumerate(plan):
        hit = _check_one(b, graph, pose, observation_radius)
        if hit is not None:
            reasons.append((i, hit[0], hit[1]))
    return ValidationFeedback("invalid" if reasons else "valid", tuple(reasons))


def _check_one(b, graph, pose, obs_r):
    verb = getattr(b, "verb", None)
    if verb not in VERBS:
        return (UNKNOWN_VERB, f"unknown verb {verb!r}")
    required = _ARITY[verb]
    optional = _OPTIONAL.get(verb, ())
    for name in _FIELDS:
        val = getattr(b, name)
        if name in required:
            if val is None:
                return (BAD_ARITY, f"{verb} needs {name}")
        elif name not in optional and val is not None:
            return (BAD_ARITY, f"{verb} takes no {name}")
    if verb == "explore":
        if len(b.point) != 2:
            return (BAD_ARITY, "explore point must be (x, y)")
        if not b.radius > 0:
            return (BAD_ARITY, "explore radius must be positive")
    if verb in ("answer", "clarify") and not b.text.strip():
        return (BAD_ARITY, f"{verb} needs non-empty text")
    if b.node is not None and b.node not in graph.nodes:
        return (UNKNOWN_NODE, f"no node {b.node!r} in graph")
    if verb == "goto":
        start = nearest_node(graph, pose, kind=REGION)
        if start is None:
            return (UNREACHABLE, "graph has no region to start from")
        try:
            path = shortest_path(graph, start, b.node)
        except NotARegion:
            return (UNREACHABLE, f"{b.node!r} is not a region")
        if path is None:
            return (UNREACHABLE, f"no route from {start!r} to {b.node!r}")
    if verb == "map_region":
        tgt = graph.nodes[b.node]
        has_vantage = any(
            n.kind == REGION and math.hypot(n.x - tgt.x, n.y - tgt.y) <= obs_r
            for n in graph.nodes.values()
        )
        if not has_vantage:
            return (NO_VANTAGE, f"no region within {obs_r:g} m of {b.node!r}")
    return None


def correct_map(graph: SemanticGraph, failed_edge) -> GraphDelta:
    """Delta removing the traversable edge the controller could not follow."""
    edge = Edge(failed_edge[0], failed_edge[1], TRAVERSABLE)
    if edge not in graph.edges:
        raise UnknownEdge(f"{failed_edge[0]}-{failed_edge[1]}")
    return GraphDelta(removed_edges=(edge,))


@dataclass
class MissionContext:
    """Running account of one mission on one robot."""

    mission: str
    labels: frozenset = frozenset()
    prior: tuple | None = None
    history: list = field(default_factory=list)
    pending_user: list = field(default_factory=list)
    graph_version: int = 0
    api_call_count: int = 0
    removed_edge_count: int = 0
    autonomous_ticks: int = 0
    takeover_ticks: int = 0
    answer_text: str | None = None

    def record(self, behavior: Behavior, outcome: "ExecOutcome"):
        self.history.append({"behavior": behavior.to_doc(), "outcome": outcome.to_doc()})

    def autonomy_fraction(self) -> float:
        total = self.autonomous_ticks + self.takeover_ticks
        return 1.0 if total == 0 else self.autonomous_ticks / total


def plan_iteration(ctx: MissionContext, graph: SemanticGraph, pose, backend, observation_radius: float = 30.0):
    """One receding-horizon planning round: ask the backend, validate, and on
    an invalid plan re-ask once with the feedback attached.  A second failure
    degrades to a clarify question for the operator.

    Returns (behavior list, justification text)."""
    from .reasoner import PlanRequest, ReasonerUnavailable, summarize_graph

    request = PlanRequest(
        mission=ctx.mission,
        summary=summarize_graph(graph, pose),
        pose=(float(pose[0]), float(pose[1])),
        labels=ctx.labels,
        history=tuple(ctx.history),
        prior=ctx.prior,
    )
    for attempt in range(2):
        try:
            ctx.api_call_count += 1
            resp = backend.generate_plan(request)
        except ReasonerUnavailable as exc:
            return [clarify(f"planner unavailable ({exc}); awaiting instructions")], "planner backend down"
        if resp.label_update:
            ctx.labels = frozenset(resp.label_update)
        fb = validate(resp.behaviors, graph, pose, observation_radius)
        if fb.valid:
            return list(resp.behaviors), resp.justification
        request = replace(
            request,
            labels=ctx.labels,
            feedback={
                "behaviors": [b.to_doc() for b in resp.behaviors],
                "reasons": [list(r) for r in fb.reasons],
            },
        )
    detail = "; ".join(f"{code}: {msg}" for _, code, msg in fb.reasons)
    return [clarify(f"cannot form a valid plan ({detail}); please advise")], "validation failed twice"


@dataclass
class Track:
    label: str
    x: float
    y: float
    hits: int = 1
    first_t: float = 0.0
    last_t: float = 0.0
    confirmed: bool = False


class ObjectTracker:
    """Gated nearest-neighbor association with hit-count confirmation.

    Detections beyond the gate spawn new tracks, so jitter larger than
    the gate fragments an object into many unconfirmed tracks; those age
    out into the missed list, which is the logged failure mode."""

    def __init__(self, gate: float = 2.0, confirm_hits: int = 3, max_age: float = 5.0):
        self.gate = gate
        self.confirm_hits = confirm_hits
        self.max_age = max_age
        self.tracks: list[Track] = []
        self.missed: list[Track] = []

    def update(self, detections, t: float):
        """Associate one sensor frame; returns tracks confirmed just now."""
        confirmed_now = []
        for det in detections:
            best = None
            for tr in self.tracks:
                if tr.label != det.label:
                    continue
                d = math.hypot(tr.x - det.x, tr.y - det.y)
                if d <= self.gate and (best is None or d < best[0]):
                    best = (d, tr)
            if best is None:
                self.tracks.append(Track(det.label, det.x, det.y, 1, t, t))
                continue
            tr = best[1]
            tr.hits += 1
            tr.x += (det.x - tr.x) / tr.hits
            tr.y += (det.y - tr.y) / tr.hits
            tr.last_t = t
            if not tr.confirmed and tr.hits >= self.confirm_hits:
                tr.confirmed = True
                confirmed_now.append(tr)
        keep = []
        for tr in self.tracks:
            if not tr.confirmed and t - tr.last_t > self.max_age:
                self.missed.append(tr)
            else:
                keep.append(tr)
        self.tracks = keep
        return confirmed_now


@dataclass(frozen=True)
class ControllerConfig:
    speed: float = 1.5
    corridor_half_width: float = 5.0
    t_ctrl: float = 30.0
    arrival_radius: float = 2.0
    breadcrumb_spacing: float = 10.0
    observation_radius: float = 30.0
    orbit_radius: float = 10.0
    merge_radius: float = 3.0
    sense_range: float = 15.0
    sense_every: int = 2  # ticks between sensor frames (5 Hz at dt=0.1)


@dataclass
class ExecOutcome:
    status: str  # "success" | "failed_edge" | "blocked"
    edge: tuple | None = None
    findings: list = field(default_factory=list)

    def to_doc(self) -> dict:
        return {"status": self.status, "edge": list(self.edge) if self.edge else None, "findings": list(self.findings)}


def _seg_dist(p, a, b) -> float:
    ax, ay = a
    bx, by = b
    px, py = p
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return math.hypot(px - ax, py - ay)
    u = max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / L2))
    return math.hypot(px - (ax + u * dx), py - (ay + u * dy))


# Detour angles tried in order when the direct step is blocked.
_DETOUR_DEG = (0.0, 30.0, -30.0, 60.0, -60.0, 90.0, -90.0)


class BehaviorExecutor:
    """Drives one ground robot through one behavior at a time.

    The executor owns the robot's local graph copy; graph changes it
    makes (breadcrumb regions while exploring, tracked objects,
    inspection captions) are applied locally and queued in the outbox
    for the comms layer to gossip."""

    def __init__(self, world, graph: SemanticGraph, pose, robot_id: str = "ugv1",
                 cfg: ControllerConfig | None = None, labels=(), noise=None):
        self.world = world
        self.graph = graph
        self.x = float(pose[0])
        self.y = float(pose[1])
        self.heading = float(pose[2]) if len(pose) > 2 else 0.0
        self.robot_id = robot_id
        self.cfg = cfg or ControllerConfig()
        self.labels = set(labels)
        self.noise = noise
        self.tracker = ObjectTracker(gate=2.0, confirm_hits=3)
        self.alloc = NodeIdAllocator(prefix=f"{robot_id}.")
        self.outbox: list[GraphDelta] = []
        self.distance = 0.0
        self.active: Behavior | None = None
        self._seq = 0
        self._tick = 0
        self._st: dict = {}

    @property
    def pose(self):
        return (self.x, self.y, self.heading)

    def set_labels(self, labels):
        self.labels = set(labels)

    def ingest(self, delta: GraphDelta):
        """Apply a remotely produced delta to the local graph copy."""
        from .semgraph import merge_remote

        self.graph = merge_remote(self.graph, [delta])

    def start(self, behavior: Behavior, t: float = 0.0):
        self.active = behavior
        st = {"findings": [], "elapsed": 0.0, "stall": 0.0, "t0": t, "start_pose": (self.x, self.y)}
        verb = behavior.verb
        if verb == "goto":
            origin = nearest_node(self.graph, (self.x, self.y), kind=REGION)
            st["path"] = shortest_path(self.graph, origin, behavior.node) or [behavior.node]
            st["wp"] = 0
            st["edge_elapsed"] = 0.0
        elif verb == "map_region":
            center = self.graph.nodes[behavior.node].position
            st["center"] = center
            st["ring"] = self._ring(center, self.cfg.orbit_radius, 12)
            st["wp"] = 0
            d = math.hypot(center[0] - self.x, center[1] - self.y)
            lap = 2 * math.pi * self.cfg.orbit_radius
            st["deadline"] = 3.0 * (d + lap) / self.cfg.speed + 30.0
        elif verb == "inspect":
            node = self.graph.nodes.get(behavior.node)
            d = math.hypot(node.x - self.x, node.y - self.y) if node else 0.0
            st["deadline"] = 3.0 * d / self.cfg.speed + 20.0
        elif verb == "explore":
            st["phase"] = "transit"
            st["ring"] = self._ring(behavior.point, behavior.radius, 8)
            st["wp"] = 0
            st["since_crumb"] = self.cfg.breadcrumb_spacing  # drop one immediately
            d = math.hypot(behavior.point[0] - self.x, behavior.point[1] - self.y)
            st["deadline"] = 3.0 * d / self.cfg.speed + 20.0
        self._st = st

    def _ring(self, center, radius, n):
        a0 = math.atan2(self.y - center[1], self.x - center[0])
        return [
            (center[0] + radius * math.cos(a0 + k * 2 * math.pi / n),
             center[1] + radius * math.sin(a0 + k * 2 * math.pi / n))
            for k in range(n + 1)
        ]

    def step(self, t: float, dt: float = 0.1):
        """Advance the active behavior one tick; ExecOutcome when finished."""
        if self.active is None:
            return None
        self._tick += 1
        if self.labels and self._tick % self.cfg.sense_every == 0:
            self._sense(t)
        out = getattr(self, f"_step_{self.active.verb}")(self.active, t, dt)
        if out is not None:
            self.active = None
        return out

    # --- shared motion primitive ----------------------------------------------

    def _move_toward(self, target, dt, corridor=None):
        """One controller step.  Tries the direct heading first, then detour
        headings; a corridor (a, b) caps lateral deviation from that segment.
        Returns "arrived" | "moved" | "stuck"."""
        dist = math.hypot(target[0] - self.x, target[1] - self.y)
        if dist <= self.cfg.arrival_radius:
            return "arrived"
        step = min(self.cfg.speed * dt, dist)
        ux, uy = (target[0] - self.x) / dist, (target[1] - self.y) / dist
        for deg in _DETOUR_DEG:
            rad = math.radians(deg)
            c, s = math.cos(rad), math.sin(rad)
            nx = self.x + (ux * c - uy * s) * step
            ny = self.y + (ux * s + uy * c) * step
            if corridor is not None and deg != 0.0:
                if _seg_dist((nx, ny), corridor[0], corridor[1]) > self.cfg.corridor_half_width:
                    continue
            if self.world.traversable((self.x, self.y), (nx, ny)):
                self.heading = math.atan2(ny - self.y, nx - self.x)
                self.x, self.y = nx, ny
                self.distance += step
                return "moved"
        return "stuck"

    # --- sensing and track registration ----------------------------------------

    def _sense(self, t: float):
        detections, _ = self.world.ugv_sense(
            (self.x, self.y, self.heading), self.labels, noise=self.noise,
            sense_range=self.cfg.sense_range,
        )
        for track in self.tracker.update(detections, t):
            self._register_track(track)

    def _register_track(self, track: Track):
        existing = None
        for node in self.graph.objects():
            if node.label != track.label:
                continue
            d = math.hypot(node.x - track.x, node.y - track.y)
            if d <= self.cfg.merge_radius and (existing is None or d < existing[0]):
                existing = (d, node)
        if existing is not None:
            node_id = existing[1].id
            if existing[1].attributes.get("source") == "prior":
                # A hint is only a hint until a sensor agrees with it.
                self._emit(GraphDelta(updated_nodes=((node_id, {"source": self.robot_id}),)))
        else:
            node_id = self.alloc.next(track.label)
            node = Node(node_id, OBJECT, track.x, track.y, track.label, {"source": self.robot_id})
            region = nearest_node(self.graph, (track.x, track.y), kind=REGION)
            edges = (Edge(node_id, region, OBSERVABLE),) if region else ()
            self._emit(GraphDelta(added_nodes=(node,), added_edges=edges))
        self._st["findings"].append(
            {"node": node_id, "label": track.label, "position": [round(track.x, 2), round(track.y, 2)]}
        )

    def _emit(self, delta: GraphDelta):
        self._seq += 1
        delta = replace(delta, sequence=self._seq)
        self.graph = apply_delta(self.graph, delta)
        self.outbox.append(delta)

    def _drop_breadcrumb(self):
        rid = self.alloc.next("ground")
        node = Node(rid, REGION, self.x, self.y, "ground", {"source": self.robot_id})
        near = nearest_node(self.graph, (self.x, self.y), kind=REGION)
        edges = ()
        if near is not None:
            other = self.graph.nodes[near]
            # Only claim traversability we actually drove.
            if math.hypot(other.x - self.x, other.y - self.y) <= 1.6 * self.cfg.breadcrumb_spacing:
                edges = (Edge(rid, near, TRAVERSABLE),)
        self._emit(GraphDelta(added_nodes=(node,), added_edges=edges))

    # --- behavior steppers ------------------------------------------------------

    def _step_goto(self, b, t, dt):
        st = self._st
        path = st["path"]
        i = st["wp"]
        if any(nid not in self.graph.nodes for nid in path):
            return ExecOutcome("blocked", findings=st["findings"])
        target = self.graph.nodes[path[i]].position
        anchor = self.graph.nodes[path[i - 1]].position if i > 0 else st["start_pose"]
        st["edge_elapsed"] += dt
        res = self._move_toward(target, dt, corridor=(anchor, target))
        if res == "arrived":
            if i == len(path) - 1:
                return ExecOutcome("success", findings=st["findings"])
            st["wp"] += 1
            st["edge_elapsed"] = 0.0
        elif st["edge_elapsed"] > self.cfg.t_ctrl:
            if i == 0:
                return ExecOutcome("blocked", findings=st["findings"])
            return ExecOutcome("failed_edge", edge=(path[i - 1], path[i]), findings=st["findings"])
        return None

    def _step_map_region(self, b, t, dt):
        st = self._st
        st["elapsed"] += dt
        ring = st["ring"]
        i = st["wp"]
        res = self._move_toward(ring[i], dt)
        # Keep the sensor trained on the area being mapped, not the path.
        self.heading = math.atan2(st["center"][1] - self.y, st["center"][0] - self.x)
        if res == "arrived":
            st["wp"] += 1
            st["stall"] = 0.0
        elif res == "stuck":
            st["stall"] += dt
            if st["stall"] > self.cfg.t_ctrl / 2:
                st["wp"] += 1  # skip an unreachable ring point
                st["stall"] = 0.0
        if st["wp"] >= len(ring) or st["elapsed"] > st["deadline"]:
            return ExecOutcome("success", findings=st["findings"])
        return None

    def _step_explore(self, b, t, dt):
        st = self._st
        st["elapsed"] += dt
        before = self.distance
        if st["phase"] == "transit":
            res = self._move_toward(b.point, dt)
            self._crumb_progress(self.distance - before)
            if res == "arrived":
                st["phase"] = "loop"
            elif res == "stuck":
                st["stall"] += dt
                if st["stall"] > self.cfg.t_ctrl:
                    return ExecOutcome("blocked", findings=st["findings"])
            if st["elapsed"] > st["deadline"]:
                return ExecOutcome("blocked", findings=st["findings"])
        else:
            i = st["wp"]
            if i >= len(st["ring"]):
                return ExecOutcome("success", findings=st["findings"])
            res = self._move_toward(st["ring"][i], dt)
            self._crumb_progress(self.distance - before)
            if res == "arrived":
                st["wp"] += 1
                st["stall"] = 0.0
            elif res == "stuck":
                st["stall"] += dt
                if st["stall"] > self.cfg.t_ctrl / 2:
                    st["wp"] += 1
                    st["stall"] = 0.0
        if any(f["label"] in self.labels for f in st["findings"] if "label" in f):
            # A target sighting ends the sweep early; the next planning
            # round will route to it directly.
            return ExecOutcome("success", findings=st["findings"])
        return None

    def _crumb_progress(self, moved: float):
        st = self._st
        st["since_crumb"] = st.get("since_crumb", 0.0) + moved
        if st["since_crumb"] >= self.cfg.breadcrumb_spacing:
            self._drop_breadcrumb()
            st["since_crumb"] = 0.0

    def _step_inspect(self, b, t, dt):
        st = self._st
        if b.node not in self.graph.nodes:
            return ExecOutcome("blocked", findings=st["findings"])
        target = self.graph.nodes[b.node].position
        dist = math.hypot(target[0] - self.x, target[1] - self.y)
        if dist > 3.0:
            st["elapsed"] += dt
            res = self._move_toward(target, dt)
            if res == "stuck":
                st["stall"] += dt
            # Sliding along an obstacle counts as motion, so a wall between
            # here and the target would otherwise never trip the stall check.
            gave_up = (res == "stuck" and st["stall"] > self.cfg.t_ctrl) or (
                res != "arrived" and st["elapsed"] > st["deadline"]
            )
            if gave_up:
                # A node deep inside a wide footprint is never reachable to
                # 3 m; pressed against the thing itself is close enough.
                if dist <= self.cfg.sense_range / 2.0:
                    pass
                else:
                    return ExecOutcome("blocked", findings=st["findings"])
            elif res != "arrived":
                return None
        obj = self.world.annotation_near(target)
        if obj is None:
            caption = "nothing notable here"
            verdict = None
        else:
            traits = ", ".join(f"{k}={v}" for k, v in sorted(obj.attributes.items()))
            caption = f"{obj.label}" + (f" ({traits})" if traits else "")
            verdict = self._answer_query(b.text, obj) if b.text else None
        self._emit(GraphDelta(updated_nodes=((b.node, {"caption": caption, "inspected": "yes"}),)))
        finding = {"node": b.node, "caption": caption}
        if b.text:
            finding["query"] = b.text
            finding["verdict"] = verdict
        st["findings"].append(finding)
        return ExecOutcome("success", findings=st["findings"])

    @staticmethod
    def _answer_query(query: str, obj) -> str:
        want = query.rstrip("?").split()[-1].lower()
        values = {str(v).lower() for v in obj.attributes.values()}
        return "yes" if want in values or want == obj.label.lower() else "no"

    def _step_answer(self, b, t, dt):
        st = self._st
        st["findings"].append({"answer": b.text})
        return ExecOutcome("success", findings=st["findings"])

    def _step_clarify(self, b, t, dt):
        st = self._st
        st["findings"].append({"clarify": b.text})
        return ExecOutcome("success", findings=st["findings"])


def execute_behavior(behavior: Behavior, world, graph: SemanticGraph, pose,
                     labels=(), cfg: ControllerConfig | None = None, noise=None,
                     start_t: float = 0.0, max_time: float = 1200.0, robot_id: str = "ugv1"):
    """Run one behavior to completion on a private executor.

    Returns (outcome, executor); the executor exposes the final pose,
    the mutated graph, queued deltas, and distance traveled."""
    ex = BehaviorExecutor(world, graph, pose, robot_id=robot_id, cfg=cfg, labels=labels, noise=noise)
    ex.start(behavior, start_t)
    t = start_t
    dt = 0.1
    while t < start_t + max_time:
        t += dt
        world.step(t)
        out = ex.step(t, dt)
        if out is not None:
            return out, ex
    return ExecOutcome("blocked", findings=ex._st.get("findings", [])), ex
