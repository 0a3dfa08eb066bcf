"""Simulated stateful security nodes.

Detection is tag based: a packet carries the attacks it contains and each
group kind drops the tags in its detection set. Capacity is enforced per
fixed one-second window; arrivals beyond capacity are dropped uninspected.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .topology import GroupKind

DETECTION_SETS: dict[GroupKind, frozenset[str]] = {
    GroupKind.FW: frozenset({"SYNFLOOD", "DDOS"}),
    GroupKind.WAF: frozenset({"SQLI", "XSS"}),
    GroupKind.AS: frozenset({"SPAM", "VIRUSMAIL"}),
    GroupKind.IDS: frozenset({"MALWARE"}),
    GroupKind.AV: frozenset({"VIRUSMAIL", "MALWARE"}),
    GroupKind.SSLVPN: frozenset(),
}


class Role(str, enum.Enum):
    ACTIVE = "active"
    STANDBY = "standby"


def canonical_key(five_tuple: tuple) -> tuple:
    src_ip, src_port, dst_ip, dst_port, proto = five_tuple
    a, b = sorted([(src_ip, src_port), (dst_ip, dst_port)])
    return (a, b, proto)


@dataclass(slots=True)
class PacketDescriptor:
    five_tuple: tuple
    service: str
    direction: str
    hop_index: int
    size: int
    attack_tags: frozenset
    encrypted: bool = False
    timestamp_ms: int = 0
    key: tuple = ()
    bucket: int = 0
    latency_ms: float = 0.0

    def __post_init__(self) -> None:
        if not self.key:
            self.key = canonical_key(self.five_tuple)


@dataclass(slots=True)
class SessionEntry:
    key: tuple
    established_at: int
    last_seen: int
    packets: int = 1


class VerdictKind(str, enum.Enum):
    FORWARD = "forward"
    DROP_DETECTED = "drop_detected"
    DROP_OVERLOAD = "drop_overload"


class Verdict(NamedTuple):
    kind: VerdictKind
    tag: str | None = None


FORWARD = Verdict(VerdictKind.FORWARD)
DROP_OVERLOAD = Verdict(VerdictKind.DROP_OVERLOAD)


class WrongGroup(AssertionError):
    pass


class StaleUpdate(RuntimeError):
    pass


@dataclass
class NodeState:
    node_id: str
    role: Role
    sessions: int
    processed_in_window: int
    capacity: float
    cpu_utilization: float
    memory_utilization: float
    window: int


@dataclass
class StateUpdate:
    origin: str
    seq: int
    added: dict[tuple, SessionEntry] = field(default_factory=dict)
    removed: list[tuple] = field(default_factory=list)
    full: bool = False


class Middlebox:
    """One security node of a group (active or standby)."""

    def __init__(self, node_id: str, group: str, kind: GroupKind, capacity: float,
                 role: Role = Role.ACTIVE, window_ms: int = 1000,
                 session_table_limit: int = 1_000_000, sslvpn_latency_ms: float = 0.4):
        self.node_id = node_id
        self.group = group
        self.kind = kind
        self.capacity = capacity
        self.role = role
        self.alive = True
        self.window_ms = window_ms
        self.session_table_limit = session_table_limit
        self.sslvpn_latency_ms = sslvpn_latency_ms
        self.detects = DETECTION_SETS[kind]
        self._window_cap = capacity * window_ms / 1000.0
        self.sessions: dict[tuple, SessionEntry] = {}
        self._window = 0
        self._count = 0
        self._history: dict[int, int] = {}
        # hot-standby bookkeeping
        self._export_seq = 0
        self._pending_added: dict[tuple, SessionEntry] = {}
        self._pending_removed: list[tuple] = []
        self.partitions: dict[str, dict[tuple, SessionEntry]] = {}
        self._import_seq: dict[str, int] = {}
        self.on_session_created: Callable[[Middlebox, SessionEntry], None] | None = None
        self.verdicts = {k: 0 for k in VerdictKind}
        self.sessions_created = 0

    def __repr__(self) -> str:
        return f"Middlebox({self.node_id}, {self.role.value}, alive={self.alive})"

    # --- data path -----------------------------------------------------------

    def _roll(self, now_ms: int) -> None:
        w = now_ms // self.window_ms
        if w != self._window:
            self._history[self._window] = self._count
            if len(self._history) > 4:
                del self._history[min(self._history)]
            self._window = w
            self._count = 0

    def process(self, packet: PacketDescriptor, now_ms: int, group: str | None = None) -> Verdict:
        if group is not None and group != self.group:
            raise WrongGroup(f"{self.node_id} belongs to {self.group}, not {group}")
        self._roll(now_ms)
        self._count += 1
        if self._count > self._window_cap:
            self.verdicts[VerdictKind.DROP_OVERLOAD] += 1
            return DROP_OVERLOAD
        tags = packet.attack_tags
        if tags:
            hit = tags & self.detects
            if hit:
                self.verdicts[VerdictKind.DROP_DETECTED] += 1
                return Verdict(VerdictKind.DROP_DETECTED, min(hit))
        entry = self.sessions.get(packet.key)
        if entry is None:
            entry = SessionEntry(packet.key, now_ms, now_ms)
            self.sessions[packet.key] = entry
            self.sessions_created += 1
            self._pending_added[packet.key] = entry
            if self.on_session_created is not None:
                self.on_session_created(self, entry)
        else:
            entry.last_seen = now_ms
            entry.packets += 1
        if self.kind is GroupKind.SSLVPN:
            packet.encrypted = True
            packet.latency_ms += self.sslvpn_latency_ms
        self.verdicts[VerdictKind.FORWARD] += 1
        return FORWARD

    # --- state reporting -----------------------------------------------------

    def window_count(self, window: int) -> int:
        if window == self._window:
            return self._count
        return self._history.get(window, 0)

    def utilization(self, now_ms: int) -> NodeState:
        """Snapshot for the last completed window before ``now_ms``."""
        self._roll(now_ms)
        w = now_ms // self.window_ms - 1
        count = self.window_count(w)
        return NodeState(
            node_id=self.node_id, role=self.role, sessions=len(self.sessions),
            processed_in_window=count, capacity=self.capacity,
            cpu_utilization=count / self._window_cap if self._window_cap else 0.0,
            memory_utilization=len(self.sessions) / self.session_table_limit,
            window=w,
        )

    # --- replication -----------------------------------------------------------

    def export_update(self, full: bool = False) -> StateUpdate:
        self._export_seq += 1
        if full:
            added = dict(self.sessions)
            removed: list[tuple] = []
        else:
            added = self._pending_added
            removed = self._pending_removed
        self._pending_added = {}
        self._pending_removed = []
        return StateUpdate(self.node_id, self._export_seq, added, removed, full)

    def forget_sessions(self, keys) -> None:
        for k in keys:
            if self.sessions.pop(k, None) is not None:
                self._pending_added.pop(k, None)
                self._pending_removed.append(k)

    def import_update(self, update: StateUpdate) -> None:
        """Merge an update into the per-origin partition.

        Raises :class:`StaleUpdate` on a sequence gap; the caller should
        request a full snapshot.
        """
        last = self._import_seq.get(update.origin)
        if update.full:
            self.partitions[update.origin] = dict(update.added)
        else:
            if last is None or update.seq != last + 1:
                raise StaleUpdate(f"{self.node_id}: gap from {update.origin} "
                                  f"(have {last}, got {update.seq})")
            part = self.partitions.setdefault(update.origin, {})
            part.update(update.added)
            for k in update.removed:
                part.pop(k, None)
        self._import_seq[update.origin] = update.seq

    def drop_partition(self, origin: str) -> None:
        self.partitions.pop(origin, None)
        self._import_seq.pop(origin, None)

    def promote(self, failed: str) -> int:
        """Standby takes over ``failed``: adopt its partition as the live table."""
        adopted = self.partitions.get(failed, {})
        self.sessions = {k: SessionEntry(e.key, e.established_at, e.last_seen, e.packets)
                         for k, e in adopted.items()}
        self.partitions = {}
        self._import_seq = {}
        self._pending_added = {}
        self._pending_removed = []
        self._export_seq = 0
        self.role = Role.ACTIVE
        return len(self.sessions)

    def crash(self) -> None:
        self.alive = False
