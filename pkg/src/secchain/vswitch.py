"""Forwarding element: flow table, hop-by-hop chain traversal, traffic stats."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .chain_compiler import Action, DeliverToService, Drop, ForwardTo, RuleDelta, RuleSet, dump_rules
from .middlebox import Middlebox, PacketDescriptor, VerdictKind

logger = logging.getLogger(__name__)


class Outcome(str, enum.Enum):
    DELIVERED = "delivered"
    DROPPED_SWITCH = "dropped_switch"
    DROPPED_OVERLOAD = "dropped_overload"
    DROPPED_DETECTED = "dropped_detected"


@dataclass
class FlowTable:
    rules: RuleSet = field(default_factory=dict)
    generation: int = 0

    def dump(self) -> str:
        return f"# generation {self.generation}\n" + dump_rules(self.rules)


@dataclass
class TrafficStats:
    window_start_ms: int
    window_end_ms: int
    packets: dict[str, int] = field(default_factory=dict)
    bytes: dict[str, int] = field(default_factory=dict)
    # (group, bucket) -> packets forwarded into that group for that bucket
    bucket_packets: dict[tuple[str, int], int] = field(default_factory=dict)

    @property
    def total_forwarded(self) -> int:
        return sum(self.packets.values())


class VSwitch:
    """Holds the flow table and walks packets through their chain.

    Forwarding to a node that is down counts as a switch drop (egress port
    down). A table miss is a switch drop as well and is reported through
    ``on_miss``.
    """

    def __init__(self, nodes: Mapping[str, Middlebox], hop_groups: Mapping[str, tuple[str, ...]],
                 on_miss: Callable[[PacketDescriptor], None] | None = None,
                 window_ms: int = 1000):
        self.nodes = nodes
        self.hop_groups = hop_groups
        self.table = FlowTable()
        self.on_miss = on_miss
        self.window_ms = window_ms
        self._windows: dict[int, TrafficStats] = {}
        self._last_reported = -1
        # round-robin session dispatch (baseline load balancer mode)
        self.rr_groups: dict[str, list[str]] = {}
        self._rr_next: dict[str, int] = {}
        self._rr_pins: dict[tuple[str, tuple], str] = {}
        self.lookups_forward = 0
        self.port_down_drops = 0
        self.miss_drops = 0

    # --- control plane ---------------------------------------------------------

    def apply_delta(self, delta: RuleDelta) -> int:
        rules = self.table.rules
        for r in delta.remove:
            if rules.get(r.match) == r.action:
                del rules[r.match]
            else:
                logger.debug("remove of missing rule %s ignored", r)
        for r in delta.add:
            rules[r.match] = r.action
        self.table.generation += 1
        return self.table.generation

    def set_round_robin(self, group: str, members: list[str]) -> None:
        self.rr_groups[group] = list(members)
        self._rr_next.setdefault(group, 0)

    # --- data plane ------------------------------------------------------------

    def lookup(self, packet: PacketDescriptor) -> Action:
        return self.table.rules.get(
            (packet.service, packet.direction, packet.bucket, packet.hop_index), Drop)

    def _rr_pick(self, group: str, key: tuple) -> str:
        pin = self._rr_pins.get((group, key))
        members = self.rr_groups[group]
        if pin is None or not self.nodes[pin].alive:
            i = self._rr_next[group]
            pin = members[i % len(members)]
            self._rr_next[group] = i + 1
            self._rr_pins[(group, key)] = pin
        return pin

    def route(self, packet: PacketDescriptor, now_ms: int) -> tuple[Outcome, str | None]:
        """Carry one packet from ingress to delivery or drop.

        Returns the outcome plus the attack tag detected, if any.
        """
        rules = self.table.rules
        hops = self.hop_groups.get(packet.service, ())
        svc, direction, bucket = packet.service, packet.direction, packet.bucket
        w = now_ms // self.window_ms
        stats = self._windows.get(w)
        if stats is None:
            stats = self._windows[w] = TrafficStats(w * self.window_ms, (w + 1) * self.window_ms)
        while True:
            action = rules.get((svc, direction, bucket, packet.hop_index), Drop)
            if type(action) is ForwardTo:
                group = hops[packet.hop_index]
                node_id = action.node
                if self.rr_groups and group in self.rr_groups:
                    node_id = self._rr_pick(group, packet.key)
                node = self.nodes.get(node_id)
                self.lookups_forward += 1
                stats.packets[node_id] = stats.packets.get(node_id, 0) + 1
                stats.bytes[node_id] = stats.bytes.get(node_id, 0) + packet.size
                gb = (group, bucket)
                stats.bucket_packets[gb] = stats.bucket_packets.get(gb, 0) + 1
                if node is None or not node.alive:
                    self.port_down_drops += 1
                    return Outcome.DROPPED_SWITCH, None
                verdict = node.process(packet, now_ms, group)
                kind = verdict.kind
                if kind is VerdictKind.FORWARD:
                    packet.hop_index += 1
                    continue
                if kind is VerdictKind.DROP_DETECTED:
                    return Outcome.DROPPED_DETECTED, verdict.tag
                return Outcome.DROPPED_OVERLOAD, None
            if type(action) is DeliverToService:
                return Outcome.DELIVERED, None
            self.miss_drops += 1
            if self.on_miss is not None:
                self.on_miss(packet)
            return Outcome.DROPPED_SWITCH, None

    def report_stats(self, now_ms: int) -> TrafficStats:
        """Counters of the last completed window; that window is then discarded."""
        w = now_ms // self.window_ms - 1
        stats = self._windows.pop(w, None)
        if stats is None:
            stats = TrafficStats(w * self.window_ms, (w + 1) * self.window_ms)
        for old in [k for k in self._windows if k < w]:
            del self._windows[old]
        self._last_reported = w
        return stats
