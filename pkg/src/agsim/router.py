"""UAV executive: the air-router mode machine and waypoint bookkeeping.

Four modes: INIT (preflight hold), SEARCH (fly toward where a ground
robot most plausibly is), COMM (loiter on a live link and drain queues),
EXPL (resume the coverage plan).  Guards are two inputs sampled every
tick, `found` (debounced link to some ground peer) and `comm_end` (no
pending traffic with the contacted peer), plus per-mode dwell timers.
A link found at the same tick the search timer expires wins: COMM is
checked before the timeout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

INIT = "INIT"
SEARCH = "SEARCH"
COMM = "COMM"
EXPL = "EXPL"
MODES = (INIT, SEARCH, COMM, EXPL)

ARRIVAL_RADIUS = 5.0


@dataclass
class TimerConfig:
    t_init: float = 300.0
    t_search: float = 120.0
    t_comm: float = 60.0
    t_explore: float = 180.0

    @staticmethod
    def from_doc(doc: dict) -> "TimerConfig":
        return TimerConfig(
            t_init=float(doc.get("t_init", 300.0)),
            t_search=float(doc.get("t_search", 120.0)),
            t_comm=float(doc.get("t_comm", 60.0)),
            t_explore=float(doc.get("t_explore", 180.0)),
        )


@dataclass
class ContactRecord:
    last_contact_t: float = -math.inf
    pose: tuple | None = None
    pose_t: float = -math.inf
    goal: tuple | None = None
    goal_t: float = -math.inf


@dataclass
class WaypointPlan:
    waypoints: list
    loop: bool = False
    cursor: int = 0

    def current(self):
        if self.cursor >= len(self.waypoints):
            return None
        return self.waypoints[self.cursor]

    def advance_if_reached(self, pos, radius=ARRIVAL_RADIUS):
        wp = self.current()
        if wp is None:
            return None
        if math.hypot(pos[0] - wp[0], pos[1] - wp[1]) <= radius:
            self.cursor += 1
            if self.cursor >= len(self.waypoints) and self.loop and self.waypoints:
                self.cursor = 0
        return self.current()


class AirRouter:
    def __init__(self, timers: TimerConfig | None = None, plan: WaypointPlan | None = None, start=(0.0, 0.0)):
        self.timers = timers or TimerConfig()
        self.plan = plan or WaypointPlan([])
        self.start = (float(start[0]), float(start[1]))
        self.mode = INIT
        self.entered_at = 0.0
        self.records: dict[str, ContactRecord] = {}
        self.contact_peer: str | None = None
        self.contact_anchor: tuple | None = None
        self.transitions: list[dict] = []

    # --- peer bookkeeping ---------------------------------------------------

    def register_peer(self, ugv_id: str):
        self.records.setdefault(ugv_id, ContactRecord())

    def note_odometry(self, ugv_id: str, pose, t: float):
        rec = self.records.setdefault(ugv_id, ContactRecord())
        if t >= rec.pose_t:
            rec.pose = (float(pose[0]), float(pose[1]))
            rec.pose_t = t

    def note_goal(self, ugv_id: str, goal, t: float):
        rec = self.records.setdefault(ugv_id, ContactRecord())
        if t >= rec.goal_t:
            rec.goal = (float(goal[0]), float(goal[1]))
            rec.goal_t = t

    def note_contact(self, ugv_id: str, t: float):
        rec = self.records.setdefault(ugv_id, ContactRecord())
        rec.last_contact_t = max(rec.last_contact_t, t)

    # --- mode machine ---------------------------------------------------------

    def tick(self, now: float, pose, found_peer: str | None, comm_end: bool):
        """Advance the machine one tick; returns (transition or None, goal).

        found_peer names the ground robot with a debounced live link, or
        None.  comm_end only matters in COMM.  At most one transition per
        tick, so a mode dwell never exceeds its timer by more than a tick.
        """
        dwell = now - self.entered_at
        transition = None
        if self.mode == INIT:
            if dwell > self.timers.t_init:
                transition = self._go(SEARCH, now, "t>t_init")
        elif self.mode == SEARCH:
            if found_peer is not None:
                self.contact_peer = found_peer
                self.contact_anchor = (float(pose[0]), float(pose[1]))
                transition = self._go(COMM, now, "found")
            elif dwell > self.timers.t_search:
                transition = self._go(EXPL, now, "t>t_search")
        elif self.mode == COMM:
            if comm_end:
                transition = self._go(EXPL, now, "comm_end")
            elif dwell > self.timers.t_comm:
                transition = self._go(EXPL, now, "t>t_comm")
            if transition is not None:
                self.contact_peer = None
                self.contact_anchor = None
        elif self.mode == EXPL:
            if dwell > self.timers.t_explore:
                transition = self._go(SEARCH, now, "t>t_explore")
        return transition, self.goal(pose)

    def _go(self, mode: str, now: float, guard: str) -> dict:
        event = {"t": now, "from": self.mode, "to": mode, "guard": guard}
        self.mode = mode
        self.entered_at = now
        self.transitions.append(event)
        return event

    def goal(self, pose):
        if self.mode == INIT:
            return self.start
        if self.mode == SEARCH:
            return self.search_target()
        if self.mode == COMM:
            return self.contact_anchor or (float(pose[0]), float(pose[1]))
        wp = self.plan.advance_if_reached(pose)
        return wp  # None when the plan is exhausted without loop

    def search_target(self):
        """Where to look for the least-recently-contacted ground robot."""
        if not self.records:
            return self.start
        peer = min(self.records, key=lambda k: (self.records[k].last_contact_t, k))
        rec = self.records[peer]
        if rec.goal is not None and rec.goal_t > rec.pose_t:
            return rec.goal
        if rec.pose is not None:
            return rec.pose
        return self.start


def lawnmower(bounds, spacing: float, margin: float = 0.0):
    """Boustrophedon waypoints covering a rectangle; adjacent pass rows are
    `spacing` apart so no point is farther than spacing/2 from a pass."""
    xmin, ymin, xmax, ymax = bounds
    xmin += margin
    ymin += margin
    xmax -= margin
    ymax -= margin
    rows = max(1, int(math.ceil((ymax - ymin) / spacing)) + 1)
    pts = []
    for i in range(rows):
        y = min(ymin + i * spacing, ymax)
        if i % 2 == 0:
            pts.append((xmin, y))
            pts.append((xmax, y))
        else:
            pts.append((xmax, y))
            pts.append((xmin, y))
    return pts
