"""Many-to-one hot standby: bidirectional heartbeats between each active and
its group's single standby, per-update session replication, and the
standby side of switchover."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .middlebox import Middlebox, SessionEntry, StaleUpdate
from .protocol import Message, MessageKind

if TYPE_CHECKING:
    from .simengine import Simulation


@dataclass
class HeartbeatState:
    """One probing direction of an (active, standby) pair."""

    prober: str
    target: str
    threshold: int
    last_request_ms: int | None = None
    last_response_ms: int | None = None
    misses: int = 0
    awaiting: bool = False
    declared: bool = False

    def tick(self, now_ms: int) -> bool:
        """Advance one interval. True exactly once, when misses reach the threshold."""
        if self.awaiting:
            self.misses += 1
            if self.misses == self.threshold and not self.declared:
                self.declared = True
                return True
        self.awaiting = True
        self.last_request_ms = now_ms
        return False

    def response(self, now_ms: int, request_ms: int | None = None) -> None:
        """Any answer proves liveness; only the answer to the latest probe ends the wait."""
        if request_ms is None or request_ms == self.last_request_ms:
            self.awaiting = False
        self.misses = 0
        self.last_response_ms = now_ms


@dataclass(frozen=True)
class SwitchoverRecord:
    failed: str
    standby: str
    t_failure_ms: int
    t_detect_ms: int
    t_replace_sent_ms: int
    t_rules_installed_ms: int

    @property
    def total_s(self) -> float:
        return (self.t_rules_installed_ms - self.t_failure_ms) / 1000.0

    @property
    def detection_s(self) -> float:
        return (self.t_detect_ms - self.t_failure_ms) / 1000.0


class HotStandby:
    """Owns heartbeat state for every pair and drives replication."""

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.timers = sim.cfg.timers
        self.standby: dict[str, str | None] = {}
        self.actives: dict[str, list[str]] = {}
        self.pairs: dict[tuple[str, str], HeartbeatState] = {}
        self.records: list[SwitchoverRecord] = []
        self.provisioned: dict[str, int] = {}
        self._replace_pending: set[str] = set()

    # --- membership ----------------------------------------------------------------

    def standby_of(self, group: str) -> str | None:
        return self.standby.get(group)

    def _pair(self, active: str, standby: str) -> None:
        n = self.timers.missed_heartbeats_for_failure
        self.pairs[(active, standby)] = HeartbeatState(active, standby, n)
        self.pairs[(standby, active)] = HeartbeatState(standby, active, n)

    def _unpair(self, node: str) -> None:
        for key in [k for k in self.pairs if node in k]:
            del self.pairs[key]

    def register_group(self, group: str, actives: list[str], standby: str | None) -> None:
        self.actives[group] = []
        self.standby[group] = None
        for a in actives:
            self.add_active(group, a)
        if standby is not None:
            self.provision_standby(group, standby)

    def add_active(self, group: str, node_id: str) -> None:
        self.actives[group].append(node_id)
        sb = self.standby[group]
        if sb is not None:
            self._pair(node_id, sb)
            self._send_update(node_id, sb, full=True)

    def remove_active(self, group: str, node_id: str) -> None:
        if node_id in self.actives.get(group, []):
            self.actives[group].remove(node_id)
        self._unpair(node_id)
        sb = self.standby.get(group)
        if sb is not None:
            self.sim.nodes[sb].drop_partition(node_id)

    def provision_standby(self, group: str, node_id: str | None) -> None:
        if node_id is None:
            self.sim.log(group, "critical", "fault", f"group={group} standby provisioning failed")
            return
        self.standby[group] = node_id
        self.provisioned[group] = self.provisioned.get(group, 0) + 1
        for a in self.actives[group]:
            self._pair(a, node_id)
            self._send_update(a, node_id, full=True)

    def after_switchover(self, group: str, record: SwitchoverRecord) -> None:
        self.records.append(record)
        self.sim.log(record.standby, "critical", "switchover",
                     f"group={group} failed={record.failed} standby={record.standby} "
                     f"total_s={record.total_s:.3f} detect_s={record.detection_s:.3f}")
        self.sim.create_node(group, "standby", lambda nid: self.provision_standby(group, nid))

    # --- heartbeats ----------------------------------------------------------------

    def tick(self) -> None:
        now = self.sim.now_ms
        nodes = self.sim.nodes
        for key in sorted(self.pairs):
            st = self.pairs.get(key)
            if st is None or not nodes[st.prober].alive:
                continue
            if st.tick(now):
                self._declare(st)
                continue
            if st.declared:
                continue
            self.sim.send(Message(MessageKind.REQ_HEARTBEAT, st.prober, st.target,
                                  {"ID_Node": st.prober, "t_req": now}))

    def _declare(self, st: HeartbeatState) -> None:
        group = self.sim.nodes[st.target].group
        if self.standby.get(group) == st.prober:
            # the standby noticed an active going silent
            failed = st.target
            if failed in self._replace_pending:
                return
            self._replace_pending.add(failed)
            sessions = len(self.sim.nodes[st.prober].partitions.get(failed, {}))
            self.sim.log(st.prober, "critical", "fault",
                         f"group={group} node={failed} missed {st.misses} heartbeats; "
                         f"sending replace")
            self.sim.send(Message(MessageKind.REQ_REPLACE, st.prober, "md",
                                  {"ID_active": failed, "ID_standby": st.prober,
                                   "sessions": sessions, "t_detect_ms": self.sim.now_ms}),
                          latency_ms=round(self.timers.replace_latency_s * 1000))
        elif self.standby.get(group) == st.target:
            standby = st.target
            self.sim.log(st.prober, "critical", "fault",
                         f"group={group} standby={standby} lost; group unprotected")
            self.pairs.pop((st.prober, standby), None)
            self.pairs.pop((standby, st.prober), None)
            if not any(standby in k for k in self.pairs):
                self.standby[group] = None

    # --- replication ----------------------------------------------------------------

    def replicate(self, node: Middlebox, entry: SessionEntry | None = None) -> None:
        sb = self.standby.get(node.group)
        if sb is None or (node.node_id, sb) not in self.pairs:
            return
        self._send_update(node.node_id, sb, full=False)

    def _send_update(self, active: str, standby: str, full: bool) -> None:
        update = self.sim.nodes[active].export_update(full=full)
        self.sim.send(Message(MessageKind.REQ_INFORM, active, standby,
                              {"ID_Node": active, "update": update}))

    # --- messages -------------------------------------------------------------------

    def on_message(self, msg: Message) -> None:
        kind = msg.kind
        node = self.sim.nodes[msg.receiver]
        if kind is MessageKind.REQ_HEARTBEAT:
            self.sim.send(msg.reply(MessageKind.RES_HEARTBEAT, ID_Node=msg.receiver,
                                    t_req=msg.body.get("t_req")))
        elif kind is MessageKind.RES_HEARTBEAT:
            st = self.pairs.get((msg.receiver, msg.sender))
            if st is not None:
                st.response(self.sim.now_ms, msg.body.get("t_req"))
        elif kind is MessageKind.REQ_INFORM:
            if self.standby.get(node.group) != node.node_id:
                self.sim.send(msg.reply(MessageKind.RES_INFORM, ID_Node=msg.receiver, ok=False))
                return
            try:
                node.import_update(msg.body["update"])
            except StaleUpdate as exc:
                self.sim.log(node.node_id, "warn", "protocol", f"{exc}; requesting resync")
                self.sim.send(msg.reply(MessageKind.RES_INFORM, ID_Node=msg.receiver,
                                        resync=True))
                return
            self.sim.send(msg.reply(MessageKind.RES_INFORM, ID_Node=msg.receiver, ok=True))
        elif kind is MessageKind.RES_INFORM:
            if msg.body.get("resync") and (msg.receiver, msg.sender) in self.pairs:
                self._send_update(msg.receiver, msg.sender, full=True)
        elif kind is MessageKind.RES_REPLACE:
            self._on_replace_result(node, msg)

    def _on_replace_result(self, node: Middlebox, msg: Message) -> None:
        failed = msg.body.get("ID_active")
        if failed is None:
            return
        self._replace_pending.discard(failed)
        group = node.group
        if msg.body.get("accepted"):
            adopted = node.promote(failed)
            self.standby[group] = None
            self._unpair(node.node_id)
            self._unpair(failed)
            if failed in self.actives[group]:
                self.actives[group].remove(failed)
            self.actives[group].append(node.node_id)
            self.sim.mark_active(node.node_id)
            self.sim.log(node.node_id, "info", "switchover",
                         f"group={group} promoted, adopted {adopted} sessions of {failed}")
        else:
            node.drop_partition(failed)
            self._unpair(failed)
            if failed in self.actives[group]:
                self.actives[group].remove(failed)
            self.sim.log(node.node_id, "info", "switchover",
                         f"group={group} replace of {failed} rejected; standing down")
