"""Mission reasoning: label inference from mission text and plan generation.

Three interchangeable backends produce plans from the same PlanRequest:
a deterministic rule cascade (the default), a scripted sequence for
tests, and an adapter that shells out to an external planner process
over a JSON pipe.  Whatever the backend, the autonomy layer validates
every plan the same way before executing it.

Graph nodes carrying the attribute source="prior" are operator hints
loaded from a scenario file; everything else counts as an observation.
The rule cascade treats only observations as confirmation that a target
actually exists.
"""

from __future__ import annotations

import json
import math
import re
import subprocess
from dataclasses import dataclass, field

from .autonomy import Behavior, answer, clarify, explore, goto, inspect, map_region
from .semgraph import OBJECT, OBSERVABLE, REGION, TRAVERSABLE, SemanticGraph, nearest_node


class ReasonerError(Exception):
    pass


class ReasonerUnavailable(ReasonerError):
    pass


class AdapterTimeout(ReasonerError):
    pass


class AdapterParseError(ReasonerError):
    pass


# Trigger phrase -> semantic labels worth configuring the detectors for.
DEFAULT_LEXICON = {
    "chemical spill": ("barrel", "person"),
    "spill": ("barrel",),
    "hazmat": ("barrel", "person"),
    "barrel": ("barrel",),
    "drum": ("barrel",),
    "activity": ("person",),
    "person": ("person",),
    "people": ("person",),
    "injured": ("person",),
    "casualty": ("person",),
    "survivor": ("person",),
    "vehicle": ("car",),
    "car": ("car",),
    "truck": ("truck",),
    "bridge": ("bridge",),
    "blocked": ("car",),
    "blockage": ("car",),
    "house": ("building",),
    "building": ("building",),
    "gate": ("gate",),
    "parking lot": ("parking lot",),
    "driveway": ("driveway",),
    "road": ("road",),
    "construction": (
        "crane",
        "bulldozer",
        "cement mixer",
        "construction sign",
        "scaffolding",
        "excavator",
        "hard hat",
        "construction worker",
        "truck",
        "barrier",
    ),
}

_SQ2 = math.sqrt(0.5)
_DIRECTIONS = {
    "north": (0.0, 1.0),
    "south": (0.0, -1.0),
    "east": (1.0, 0.0),
    "west": (-1.0, 0.0),
    "northeast": (_SQ2, _SQ2),
    "northwest": (-_SQ2, _SQ2),
    "southeast": (_SQ2, -_SQ2),
    "southwest": (-_SQ2, -_SQ2),
}

_PRIOR_RE = re.compile(
    r"(\d+(?:\.\d+)?)\s*(?:m\b|meters?\b)\s*(?:to\s+the\s+)?"
    r"(northeast|northwest|southeast|southwest|north|south|east|west)"
    r"(?:\s+of\s+(?:the\s+)?([a-z][a-z ]*?))?(?=[\s.,;?]|$)"
)

_NEAR_RE = re.compile(
    r"(?:near|around|beside|next\s+to)\s+(?:the\s+)?([a-z][a-z ]*?)(?=[\s.,;?]|$)"
)

_STOPWORDS = {"the", "a", "an", "this", "that", "of", "to", "near", "at", "some", "any"}


@dataclass(frozen=True)
class SemanticInference:
    labels: frozenset
    uav_labels: tuple  # what the aerial camera is asked to look for
    needs_clarify: bool


def infer_semantics(text: str, lexicon: dict | None = None) -> SemanticInference:
    """Union of label sets for every trigger phrase found in the text.

    The UAV list always includes "road" because the ground robot always
    needs traversable regions, whatever the mission is about."""
    if not text or not text.strip():
        raise ValueError("empty mission text")
    lex = DEFAULT_LEXICON if lexicon is None else lexicon
    low = text.lower()
    labels: set[str] = set()
    for trigger, labs in lex.items():
        if trigger in low:
            labels.update(labs)
    return SemanticInference(frozenset(labels), tuple(sorted(labels | {"road"})), not labels)


@dataclass(frozen=True)
class LocationPrior:
    dx: float
    dy: float
    anchor: str | None = None  # node label the offset is measured from


def parse_location_prior(text: str) -> LocationPrior | None:
    """Pull "<N> meters <direction> [of the <label>]" out of mission text.

    "near the <label>" and friends parse as a zero-offset prior: the label
    is a datum to search around, not a distance to pace off."""
    low = text.lower()
    m = _PRIOR_RE.search(low)
    if m:
        dist = float(m.group(1))
        ux, uy = _DIRECTIONS[m.group(2)]
        anchor = m.group(3).strip() if m.group(3) else None
        return LocationPrior(dist * ux, dist * uy, anchor)
    m = _NEAR_RE.search(low)
    if m:
        return LocationPrior(0.0, 0.0, m.group(1).strip())
    return None


def location_qualifier(text: str) -> str | None:
    """Spatial word that picks among same-label candidates."""
    low = text.lower()
    for word, qual in (
        ("end", "far"), ("start", "near"), ("beginning", "near"),
        ("northern", "north"), ("southern", "south"),
        ("eastern", "east"), ("western", "west"),
    ):
        if re.search(rf"\b{word}\b", low):
            return qual
    return None


@dataclass(frozen=True)
class NodeView:
    id: str
    kind: str
    label: str
    x: float
    y: float
    source: str
    reachable: bool
    observers: tuple = ()  # for objects: region ids sorted by distance

    def to_doc(self) -> dict:
        return {
            "id": self.id, "kind": self.kind, "label": self.label,
            "x": self.x, "y": self.y, "source": self.source,
            "reachable": self.reachable, "observers": list(self.observers),
        }

    @staticmethod
    def from_doc(doc: dict) -> "NodeView":
        return NodeView(
            str(doc["id"]), str(doc["kind"]), str(doc["label"]),
            float(doc["x"]), float(doc["y"]), str(doc["source"]),
            bool(doc["reachable"]), tuple(doc.get("observers", ())),
        )


@dataclass(frozen=True)
class GraphSummary:
    nodes: tuple = ()
    start_region: str | None = None

    def objects(self):
        return [v for v in self.nodes if v.kind == OBJECT]

    def regions(self):
        return [v for v in self.nodes if v.kind == REGION]

    def to_doc(self) -> dict:
        return {"nodes": [v.to_doc() for v in self.nodes], "start_region": self.start_region}

    @staticmethod
    def from_doc(doc: dict) -> "GraphSummary":
        return GraphSummary(
            tuple(NodeView.from_doc(d) for d in doc["nodes"]),
            doc.get("start_region"),
        )


def summarize_graph(graph: SemanticGraph, pose) -> GraphSummary:
    """Planner-facing view: positions, sources, and reachability from the
    region nearest the robot over traversable edges."""
    start = nearest_node(graph, pose, kind=REGION)
    adjacency: dict[str, list[str]] = {}
    observers: dict[str, list[str]] = {}
    for e in graph.edges:
        if e.kind == TRAVERSABLE:
            adjacency.setdefault(e.a, []).append(e.b)
            adjacency.setdefault(e.b, []).append(e.a)
        else:
            obj, reg = (e.a, e.b) if graph.nodes[e.a].kind == OBJECT else (e.b, e.a)
            observers.setdefault(obj, []).append(reg)
    reachable: set[str] = set()
    if start is not None:
        frontier = [start]
        reachable.add(start)
        while frontier:
            cur = frontier.pop()
            for nxt in adjacency.get(cur, ()):
                if nxt not in reachable:
                    reachable.add(nxt)
                    frontier.append(nxt)
    views = []
    for node in sorted(graph.nodes.values(), key=lambda n: n.id):
        if node.kind == REGION:
            obs = ()
            reach = node.id in reachable
        else:
            obs = tuple(sorted(
                observers.get(node.id, ()),
                key=lambda rid: (math.hypot(graph.nodes[rid].x - node.x, graph.nodes[rid].y - node.y), rid),
            ))
            reach = any(r in reachable for r in obs)
        views.append(NodeView(
            node.id, node.kind, node.label, node.x, node.y,
            node.attributes.get("source", "observed"), reach, obs,
        ))
    return GraphSummary(tuple(views), start)


@dataclass(frozen=True)
class PlanRequest:
    mission: str
    summary: GraphSummary
    pose: tuple
    labels: frozenset = frozenset()
    history: tuple = ()
    feedback: dict | None = None  # {"behaviors": [...], "reasons": [[i, code, msg], ...]}
    prior: tuple | None = None  # absolute (x, y) hint, already resolved

    def to_doc(self) -> dict:
        return {
            "mission": self.mission,
            "summary": self.summary.to_doc(),
            "pose": list(self.pose),
            "labels": sorted(self.labels),
            "history": [dict(h) for h in self.history],
            "feedback": self.feedback,
            "prior": list(self.prior) if self.prior else None,
        }

    @staticmethod
    def from_doc(doc: dict) -> "PlanRequest":
        prior = doc.get("prior")
        return PlanRequest(
            mission=str(doc["mission"]),
            summary=GraphSummary.from_doc(doc["summary"]),
            pose=tuple(float(v) for v in doc["pose"]),
            labels=frozenset(doc.get("labels", ())),
            history=tuple(doc.get("history", ())),
            feedback=doc.get("feedback"),
            prior=None if prior is None else (float(prior[0]), float(prior[1])),
        )


@dataclass(frozen=True)
class PlanResponse:
    behaviors: tuple
    justification: str
    label_update: frozenset | None = None

    def to_doc(self) -> dict:
        return {
            "behaviors": [b.to_doc() for b in self.behaviors],
            "justification": self.justification,
            "label_update": sorted(self.label_update) if self.label_update else None,
        }

    @staticmethod
    def from_doc(doc: dict) -> "PlanResponse":
        behaviors = tuple(Behavior.from_doc(d) for d in doc["behaviors"])
        justification = str(doc.get("justification", "")).strip()
        if not justification:
            raise ValueError("empty justification")
        update = doc.get("label_update")
        return PlanResponse(behaviors, justification, None if update is None else frozenset(update))


def _excluded_nodes(feedback) -> set:
    """Node ids the validator rejected last round."""
    out: set[str] = set()
    if not feedback:
        return out
    behaviors = feedback.get("behaviors", [])
    for idx, _code, _msg in feedback.get("reasons", []):
        if 0 <= idx < len(behaviors):
            node = behaviors[idx].get("node")
            if node:
                out.add(node)
    return out


def _blocked_gotos(history) -> set:
    """Vantages the robot already failed to reach; proposing them again
    just repeats the same dead end."""
    out: set[str] = set()
    for item in history:
        beh = item.get("behavior", {})
        if beh.get("verb") == "goto" and item.get("outcome", {}).get("status") == "blocked":
            node = beh.get("node")
            if node:
                out.add(node)
    return out


class RuleBasedReasoner:
    """Deterministic plan policy standing in for a language model.

    The cascade: (1) an observed object of a target label gets a
    goto-inspect-answer plan; (2) a node whose label matches the mission
    gets a goto + map_region survey; (3) a location prior seeds an
    explore; (4) otherwise ask the operator.  Validation feedback
    excludes the offending nodes and the cascade reruns."""

    def __init__(self, lexicon: dict | None = None, explore_radius: float = 20.0):
        self.lexicon = DEFAULT_LEXICON if lexicon is None else dict(lexicon)
        self.explore_radius = explore_radius

    def generate_plan(self, request: PlanRequest) -> PlanResponse:
        labels = set(request.labels)
        label_update = None
        if not labels:
            inferred = infer_semantics(request.mission, self.lexicon)
            labels = set(inferred.labels)
            if labels:
                label_update = frozenset(labels)
        excluded = _excluded_nodes(request.feedback) | _blocked_gotos(request.history)
        surveyed = self._surveyed_nodes(request.history)
        prior = self._resolve_prior(request)

        # "30 m east of the bridge" names the bridge as a datum, not as the
        # thing to report.  Keep it out of the answerable set while other
        # labels remain, and stop re-surveying it once one survey succeeded.
        anchor_labs: set[str] = set()
        parsed = parse_location_prior(request.mission)
        if parsed is not None and parsed.anchor:
            anchor_labs = set(self.lexicon.get(parsed.anchor, ())) | {parsed.anchor}
        confirm_labels = labels - anchor_labs if labels - anchor_labs else labels
        if anchor_labs and any(
            v.label in anchor_labs for v in request.summary.nodes if v.id in surveyed
        ):
            excluded = excluded | {
                v.id for v in request.summary.nodes if v.label in anchor_labs
            }

        plan = self._rule_confirmed(request, confirm_labels, excluded)
        if plan is None:
            plan = self._rule_keyword(request, labels, excluded, surveyed, prior)
        if plan is None:
            plan = self._rule_prior(request, prior)
        if plan is None:
            why = "no label matched the mission text; " if not labels else "nothing matching found so far; "
            plan = ((clarify(why + "please give a location or more detail"),),
                    "no target, no matching node, no usable prior: asking the operator")
        behaviors, justification = plan
        return PlanResponse(tuple(behaviors), justification, label_update)

    # --- cascade pieces ---------------------------------------------------------

    @staticmethod
    def _vantage_for(request, target, excluded):
        regions = {v.id: v for v in request.summary.regions() if v.reachable}
        for rid in target.observers:  # already sorted by distance
            if rid not in excluded and rid in regions:
                return rid
        candidates = [v for v in regions.values() if v.id not in excluded]
        if not candidates:
            return None
        best = min(candidates, key=lambda v: (math.hypot(v.x - target.x, v.y - target.y), v.id))
        return best.id

    @staticmethod
    def _surveyed_nodes(history) -> set:
        done = set()
        for item in history:
            beh = item.get("behavior", {})
            if beh.get("verb") == "map_region" and item.get("outcome", {}).get("status") == "success":
                done.add(beh.get("node"))
        return done

    def _resolve_prior(self, request: PlanRequest):
        if request.prior is not None:
            return tuple(request.prior)
        parsed = parse_location_prior(request.mission)
        if parsed is None:
            return None
        base = request.pose
        if parsed.anchor:
            # "house" should find nodes labeled "building" too.
            synonyms = set(self.lexicon.get(parsed.anchor, ()))
            anchors = [
                v for v in request.summary.nodes
                if v.label and (v.label in parsed.anchor or v.label in synonyms)
            ]
            if anchors:
                a = min(anchors, key=lambda v: (math.hypot(v.x - request.pose[0], v.y - request.pose[1]), v.id))
                base = (a.x, a.y)
        return (base[0] + parsed.dx, base[1] + parsed.dy)

    def _rule_confirmed(self, request, labels, excluded):
        px, py = request.pose
        candidates = [
            v for v in request.summary.objects()
            if v.label in labels and v.source != "prior" and v.id not in excluded
        ]
        if not candidates:
            return None
        target = min(candidates, key=lambda v: (not v.reachable, math.hypot(v.x - px, v.y - py), v.id))
        query = self._inspect_query(request.mission, target.label)
        report = answer(f"{target.label} at ({target.x:.1f}, {target.y:.1f})")
        vantage = self._vantage_for(request, target, excluded)
        if vantage is None:
            if math.hypot(target.x - px, target.y - py) <= 15.0:
                # Nowhere reachable to stage, but the object is right here.
                plan = (inspect(target.id, query), report)
                return plan, f"{target.label} is right here; inspecting and reporting"
            return None
        plan = (goto(vantage), inspect(target.id, query), report)
        return plan, (
            f"{target.label} was observed at ({target.x:.1f}, {target.y:.1f}); "
            f"moving to {vantage} to inspect and report"
        )

    def _rule_keyword(self, request, labels, excluded, surveyed, prior):
        low = request.mission.lower()
        matches = [
            v for v in request.summary.nodes
            if v.id not in excluded and v.id not in surveyed and v.label != "ground"
            and (v.label in labels or (len(v.label) > 2 and v.label in low))
        ]
        if not matches:
            return None
        target = self._pick_by_qualifier(matches, request, prior)
        px, py = request.pose
        if math.hypot(target.x - px, target.y - py) <= 15.0:
            return (map_region(target.id),), f"{target.label} {target.id} is close by; surveying it in place"
        # Stage at a nearby region rather than the survey target itself; the
        # orbit starts from there.  A region target is its own last resort.
        regions = [v for v in request.summary.regions() if v.id not in excluded and v.id != target.id]
        vantage = None
        if regions:
            near = min(regions, key=lambda v: (math.hypot(v.x - target.x, v.y - target.y), v.id))
            if math.hypot(near.x - target.x, near.y - target.y) <= 30.0:
                vantage = near.id
        if vantage is None and target.kind == "region":
            vantage = target.id
        if vantage is None:
            # The match is an island: extend the graph toward it instead.
            plan = (explore((target.x, target.y), self.explore_radius),)
            return plan, f"{target.label} {target.id} matches the mission but has no vantage; exploring toward it"
        plan = (goto(vantage), map_region(target.id))
        return plan, f"{target.label} {target.id} matches the mission; surveying it from {vantage}"

    @staticmethod
    def _pick_by_qualifier(matches, request, prior):
        px, py = request.pose
        qual = location_qualifier(request.mission)
        keys = {
            "far": lambda v: (-math.hypot(v.x - px, v.y - py), v.id),
            "near": lambda v: (math.hypot(v.x - px, v.y - py), v.id),
            "north": lambda v: (-v.y, v.id),
            "south": lambda v: (v.y, v.id),
            "east": lambda v: (-v.x, v.id),
            "west": lambda v: (v.x, v.id),
        }
        if qual in keys:
            return min(matches, key=keys[qual])
        if prior is not None:
            return min(matches, key=lambda v: (math.hypot(v.x - prior[0], v.y - prior[1]), v.id))
        return min(matches, key=keys["near"])

    def _rule_prior(self, request, prior):
        if prior is None:
            return None
        for item in request.history:
            beh = item.get("behavior", {})
            if beh.get("verb") != "explore" or beh.get("point") is None:
                continue
            ex, ey = beh["point"]
            if math.hypot(ex - prior[0], ey - prior[1]) <= self.explore_radius:
                return None  # that area was already swept
        plan = (explore(prior, self.explore_radius),)
        return plan, f"no matching node yet; sweeping the hinted area around ({prior[0]:.0f}, {prior[1]:.0f})"

    def _inspect_query(self, mission: str, label: str) -> str:
        low = mission.lower()
        surface = label
        for trigger, labs in self.lexicon.items():
            if label in labs and trigger in low:
                surface = trigger
                break
        m = re.search(rf"([a-z]+)\s+{re.escape(surface)}", low)
        if m and m.group(1) not in _STOPWORDS:
            return f"is this {surface} {m.group(1)}"
        return f"describe the {surface}"


class ScriptedReasoner:
    """Canned responses in order; raises when the script runs out."""

    def __init__(self, responses):
        self._responses = list(responses)
        self.calls = 0

    def generate_plan(self, request: PlanRequest) -> PlanResponse:
        self.calls += 1
        if not self._responses:
            raise ReasonerUnavailable("scripted responses exhausted")
        return self._responses.pop(0)


class AdapterReasoner:
    """Bridges plan requests to an external planner process.

    The wire format is one JSON document on stdin (PlanRequest.to_doc)
    answered by one JSON document on stdout (PlanResponse fields).  A
    timeout or an unparseable reply degrades to the rule cascade when
    fallback is enabled, otherwise the error propagates."""

    def __init__(self, argv, timeout: float = 5.0, fallback: bool = True, lexicon: dict | None = None):
        self.argv = list(argv)
        self.timeout = timeout
        self.fallback = RuleBasedReasoner(lexicon) if fallback else None

    def generate_plan(self, request: PlanRequest) -> PlanResponse:
        try:
            return self._roundtrip(request)
        except (AdapterTimeout, AdapterParseError, ReasonerUnavailable):
            if self.fallback is not None:
                return self.fallback.generate_plan(request)
            raise

    def _roundtrip(self, request: PlanRequest) -> PlanResponse:
        payload = json.dumps(request.to_doc()) + "\n"
        try:
            proc = subprocess.run(
                self.argv, input=payload, capture_output=True, text=True, timeout=self.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise AdapterTimeout(f"no reply within {self.timeout:g} s") from exc
        except OSError as exc:
            raise ReasonerUnavailable(str(exc)) from exc
        if proc.returncode != 0:
            raise ReasonerUnavailable(f"adapter exited {proc.returncode}")
        try:
            doc = json.loads(proc.stdout.strip().splitlines()[-1])
            return PlanResponse.from_doc(doc)
        except (IndexError, ValueError, KeyError, TypeError) as exc:
            raise AdapterParseError(f"bad adapter reply: {exc}") from exc


def build_reasoner(kind: str, **kwargs):
    if kind == "rules":
        return RuleBasedReasoner(lexicon=kwargs.get("lexicon"))
    if kind == "adapter":
        return AdapterReasoner(
            kwargs["argv"],
            timeout=kwargs.get("timeout", 5.0),
            fallback=kwargs.get("fallback", True),
            lexicon=kwargs.get("lexicon"),
        )
    raise ValueError(f"unknown reasoner kind {kind!r}")
