"""Store-and-forward messaging between robots.

Every robot owns a MessageDB keyed by (origin, topic, seq).  When the
radio check says two robots are in range they run a budgeted two-way
sync: fixed-cost header exchange first, then whole messages in priority
order until the per-contact byte budget runs out.  Partially transferred
messages are never committed, so a message either exists in a store in
full or not at all.  A UAV carrying a store between two ground robots
that never meet is the delivery path for everything they exchange.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

TASK = "task"
LABEL_SET = "label_set"
REPORT = "report"
UGV_ODOMETRY = "ugv_odometry"
AERIAL_GRAPH = "aerial_graph"

# Lower value syncs first.  Tasking and label sets are tiny and urgent;
# bulk graph deltas go last so they cannot starve the rest.
TOPIC_PRIORITY = {
    TASK: 0,
    LABEL_SET: 1,
    REPORT: 2,
    UGV_ODOMETRY: 3,
    AERIAL_GRAPH: 4,
}

HEADER_BYTES = 16
DEFAULT_BUDGET = 32768
DEFAULT_RSSI_THRESHOLD = -85.0


class CommsError(Exception):
    pass


class DuplicateKey(CommsError):
    pass


@dataclass(frozen=True)
class Message:
    origin: str
    topic: str
    seq: int
    payload: bytes
    created_at: float
    priority: int = -1

    def __post_init__(self):
        if self.topic not in TOPIC_PRIORITY:
            raise CommsError(f"unknown topic {self.topic!r}")
        if self.priority < 0:
            object.__setattr__(self, "priority", TOPIC_PRIORITY[self.topic])
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))

    @property
    def key(self):
        return (self.origin, self.topic, self.seq)

    def order_key(self):
        return (self.priority, self.created_at, self.origin, self.topic, self.seq)


class MessageDB:
    def __init__(self, owner: str):
        self.owner = owner
        self.store: dict[tuple, Message] = {}
        self._seq: dict[tuple, int] = {}

    def __len__(self):
        return len(self.store)

    def next_seq(self, origin: str, topic: str) -> int:
        key = (origin, topic)
        self._seq[key] = self._seq.get(key, 0) + 1
        return self._seq[key]

    def messages(self, origin=None, topic=None):
        out = [
            m
            for m in self.store.values()
            if (origin is None or m.origin == origin) and (topic is None or m.topic == topic)
        ]
        out.sort(key=Message.order_key)
        return out

    def headers(self):
        """(priority, created_at)-ordered view of store keys."""
        return [m.key for m in sorted(self.store.values(), key=Message.order_key)]


def publish(db: MessageDB, message: Message):
    """Author a message into the local store.  Raises DuplicateKey when the
    (origin, topic, seq) key already exists."""
    if message.key in db.store:
        raise DuplicateKey(str(message.key))
    _insert(db, message)


def _superseded(db: MessageDB, message: Message) -> bool:
    # Odometry is keep-latest: a store holding a newer seq from the same
    # origin has no use for this one.
    if message.topic != UGV_ODOMETRY:
        return False
    return any(
        k[0] == message.origin and k[1] == UGV_ODOMETRY and k[2] >= message.seq for k in db.store
    )


def _insert(db: MessageDB, message: Message):
    if message.key in db.store:
        return
    if _superseded(db, message):
        return
    if message.topic == UGV_ODOMETRY:
        stale = [k for k in db.store if k[0] == message.origin and k[1] == UGV_ODOMETRY and k[2] < message.seq]
        for k in stale:
            del db.store[k]
    db.store[message.key] = message


def wants(db: MessageDB, message: Message) -> bool:
    return message.key not in db.store and not _superseded(db, message)


def pending_between(a: MessageDB, b: MessageDB) -> int:
    """How many messages either side still lacks (the comm_end guard)."""
    return sum(1 for m in a.store.values() if wants(b, m)) + sum(
        1 for m in b.store.values() if wants(a, m)
    )


def link_trigger(rssi_dbm: float, threshold: float = DEFAULT_RSSI_THRESHOLD) -> bool:
    return rssi_dbm >= threshold


@dataclass
class SyncResult:
    bytes_transferred: int
    a_to_b: list = field(default_factory=list)
    b_to_a: list = field(default_factory=list)

    @property
    def delivered(self) -> int:
        return len(self.a_to_b) + len(self.b_to_a)


def sync(a: MessageDB, b: MessageDB, byte_budget: int = DEFAULT_BUDGET) -> SyncResult:
    """One contact: exchange header vectors, then ship missing messages.

    Header exchange costs HEADER_BYTES per stored message on both sides
    and comes out of the same budget.  Missing messages from both
    directions merge into one (priority, created_at) queue; transfer
    stops at the first message that no longer fits, which models a
    partial transfer that is discarded.
    """
    header_cost = HEADER_BYTES * (len(a.store) + len(b.store))
    budget = byte_budget - header_cost
    result = SyncResult(bytes_transferred=header_cost)
    if budget <= 0:
        return result
    queue = [(m, b, result.a_to_b) for m in a.store.values() if wants(b, m)]
    queue += [(m, a, result.b_to_a) for m in b.store.values() if wants(a, m)]
    queue.sort(key=lambda item: item[0].order_key())
    for message, dst, tally in queue:
        size = len(message.payload)
        if size > budget:
            break
        _insert(dst, message)
        budget -= size
        result.bytes_transferred += size
        tally.append(message)
    return result


def delivered(db: MessageDB, origin: str, topic: str) -> int:
    """Highest contiguous sequence number received, counting from 1."""
    seqs = {k[2] for k in db.store if k[0] == origin and k[1] == topic}
    n = 0
    while (n + 1) in seqs:
        n += 1
    return n


# --- payload builders ---------------------------------------------------------

def odometry_message(db: MessageDB, origin: str, x: float, y: float, heading: float, t: float) -> Message:
    payload = json.dumps(
        {"x": round(x, 2), "y": round(y, 2), "heading": round(heading, 3), "t": round(t, 2)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    assert len(payload) <= 128
    return Message(origin, UGV_ODOMETRY, db.next_seq(origin, UGV_ODOMETRY), payload, t)


def label_set_message(db: MessageDB, origin: str, labels, t: float) -> Message:
    payload = json.dumps(sorted(set(labels)), separators=(",", ":")).encode()
    return Message(origin, LABEL_SET, db.next_seq(origin, LABEL_SET), payload, t)


def graph_delta_message(db: MessageDB, origin: str, delta_json: str, t: float) -> Message:
    return Message(origin, AERIAL_GRAPH, db.next_seq(origin, AERIAL_GRAPH), delta_json.encode(), t)


def report_message(db: MessageDB, origin: str, body: dict, t: float) -> Message:
    payload = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return Message(origin, REPORT, db.next_seq(origin, REPORT), payload, t)


def task_message(db: MessageDB, origin: str, body: dict, t: float) -> Message:
    payload = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return Message(origin, TASK, db.next_seq(origin, TASK), payload, t)
