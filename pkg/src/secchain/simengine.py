"""Deterministic discrete-event core: clock, event queue, message bus,
workload generation and fault injection.

Time is kept in integer milliseconds. Events are ordered by
``(time_ms, seq)`` where ``seq`` is assigned at schedule time.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

from .chain_compiler import session_bucket
from .controller import Controller
from .hotstandby import HotStandby
from .middlebox import Middlebox, PacketDescriptor, Role, SessionEntry, canonical_key
from .protocol import Message, MessageKind
from .records import LogStore, MetricPoint
from .topology import FaultSpec, ScenarioConfig, WorkloadSpec, initial_node_ids
from .vswitch import Outcome, VSwitch

__all__ = ["Event", "EventQueue", "EventOverflow", "Simulation", "Message", "WorkloadSpec",
           "FaultSpec", "generate_workload", "inject_fault", "run"]

_SERVICE_PORTS = {"web": 80, "email": 25, "udp": 53, "ftp": 21}


class EventOverflow(RuntimeError):
    pass


class Event(NamedTuple):
    time_ms: int
    seq: int
    target: Callable[..., Any]
    payload: tuple


class EventQueue:
    def __init__(self, cap: int = 100_000_000):
        self._heap: list[Event] = []
        self._seq = 0
        self.cap = cap
        self.processed = 0
        self.last: tuple[int, int] = (-1, -1)

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, time_ms: int, target: Callable[..., Any], *payload: Any) -> Event:
        ev = Event(time_ms, self._seq, target, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def peek_time(self) -> int | None:
        return self._heap[0].time_ms if self._heap else None

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        key = (ev.time_ms, ev.seq)
        if key <= self.last:
            raise AssertionError(f"event {key} processed after {self.last}")
        self.last = key
        self.processed += 1
        if self.processed > self.cap:
            raise EventOverflow(f"event cap {self.cap} exceeded at t={ev.time_ms / 1000:.3f}s")
        return ev


@dataclass
class Client:
    """One persistent session of a workload."""

    five_tuple: tuple
    key: tuple
    bucket: int
    direction: str
    next_arrival: float  # next arrival in cumulative-request units


@dataclass
class WorkloadStream:
    """Slot-aligned arrival generator for one workload.

    Client ``c`` has exactly one arrival in every unit interval ``[j, j+1)``
    of its cumulative request count, at a seeded offset inside that interval.
    A window that spans an integral number of requests therefore receives
    exactly that many arrivals from each client.
    """

    index: int
    spec: WorkloadSpec
    service: str
    rng: random.Random
    clients: list[Client] = field(default_factory=list)
    tag_table: list[tuple[float, str]] = field(default_factory=list)

    def cumulative(self, t: float) -> float:
        """Requests per client issued by time ``t``."""
        s = self.spec
        end = s.end_s if s.end_s is not None else math.inf
        tau = min(max(t - s.start_s, 0.0), end - s.start_s)
        a = s.per_client_rate / s.rate_divisor
        if s.per_client_rate_end is None or s.end_s is None:
            return a * tau
        slope = (s.per_client_rate_end - s.per_client_rate) / s.rate_divisor / (end - s.start_s)
        return a * tau + 0.5 * slope * tau * tau

    def inverse(self, x: float) -> float:
        s = self.spec
        a = s.per_client_rate / s.rate_divisor
        if s.per_client_rate_end is None or s.end_s is None:
            return s.start_s + x / a
        slope = (s.per_client_rate_end - s.per_client_rate) / s.rate_divisor / (s.end_s - s.start_s)
        if abs(slope) < 1e-15:
            return s.start_s + x / a
        return s.start_s + (-a + math.sqrt(max(a * a + 2.0 * slope * x, 0.0))) / slope

    def draw_tags(self) -> frozenset:
        if not self.tag_table:
            return frozenset()
        r = self.rng.random()
        for edge, tag in self.tag_table:
            if r < edge:
                return frozenset((tag,))
        return frozenset()

    def arrivals(self, k: int, window_ms: int) -> list[tuple[int, int, int, frozenset]]:
        """Arrivals in window ``k`` as ``(time_ms, workload, client, tags)``."""
        lo_ms, hi_ms = k * window_ms, (k + 1) * window_ms
        hi = self.cumulative(hi_ms / 1000.0)
        out = []
        for c, cl in enumerate(self.clients):
            while cl.next_arrival < hi:
                t_ms = math.floor(self.inverse(cl.next_arrival) * 1000.0)
                t_ms = min(max(t_ms, lo_ms), hi_ms - 1)
                out.append((t_ms, self.index, c, self.draw_tags()))
                cl.next_arrival = math.floor(cl.next_arrival) + 1 + self.rng.random()
        return out


def _service_port(kind: str) -> int:
    return _SERVICE_PORTS.get(kind, 80)


def generate_workload(cfg: ScenarioConfig, index: int, buckets: int) -> WorkloadStream:
    """Build the seeded client population of workload ``index``."""
    spec = cfg.workloads[index]
    rng = random.Random(f"{cfg.seed}:{index}")
    svc_idx = next(i for i, s in enumerate(cfg.services) if s.id == spec.service)
    svc = cfg.services[svc_idx]
    dst_ip = f"192.168.{svc_idx}.10"
    dst_port = _service_port(svc.kind)
    proto = "udp" if svc.kind == "udp" else "tcp"
    stream = WorkloadStream(index, spec, svc.id, rng)
    edge = 0.0
    for tag, frac in sorted(spec.attack_mix.items()):
        if frac > 0:
            edge += frac
            stream.tag_table.append((edge, tag))
    for c in range(spec.clients):
        src_ip = f"10.{index + 1}.{c // 250}.{c % 250 + 1}"
        src_port = rng.randrange(1024, 65536)
        direction = "external" if rng.random() < spec.external_fraction else "internal"
        ft = (src_ip, src_port, dst_ip, dst_port, proto)
        stream.clients.append(Client(ft, canonical_key(ft), session_bucket(ft, buckets),
                                     direction, rng.random()))
    return stream


def inject_fault(sim: Simulation, spec: FaultSpec) -> str:
    """Crash the fault's target; returns the resolved node id."""
    target = spec.target
    if target.startswith("random-active-in("):
        group = target[len("random-active-in("):-1]
        candidates = sorted(sim.md.members.get(group, []))
        if not candidates:
            sim.log("sim", "warn", "fault", f"no active node in {group} to crash")
            return ""
        target = sim.rng.choice(candidates)
    node = sim.nodes[target]
    if not node.alive:
        return target
    node.crash()
    sim.crash_times[target] = sim.now_ms
    sim.mark_inactive(target)
    sim.log(target, "critical", "fault", f"injected {spec.kind} of {target} ({node.role.value})")
    return target


@dataclass
class WindowCounters:
    attacks_sent: int = 0
    attacks_detected: int = 0
    delivered: int = 0
    latency_sum: float = 0.0
    overload_drops: int = 0
    switch_drops: int = 0


class Simulation:
    """One run of one scenario. Build, then call :meth:`run`."""

    def __init__(self, cfg: ScenarioConfig, scenario: str | None = None):
        self.cfg = cfg
        self.scenario = scenario or cfg.name
        t = cfg.timers
        self.queue = EventQueue(t.event_cap)
        self.now_ms = 0
        self.window_ms = round(t.stats_report_period_s * 1000)
        self.end_ms = round(cfg.duration_s * 1000)
        self.rng = random.Random(f"{cfg.seed}:sim")
        self.logs = LogStore()
        self.metrics: list[MetricPoint] = []
        self.nodes: dict[str, Middlebox] = {}
        self._ordinal: dict[str, int] = {}
        self.active_since: dict[str, int] = {}
        self.active_intervals: list[tuple[str, str, int, int]] = []
        self.crash_times: dict[str, int] = {}
        self.create_failures = 0
        hop_groups = {s.id: cfg.chain(s.chain).hops for s in cfg.services}
        self._hops = {s: len(h) for s, h in hop_groups.items()}
        self.vswitch = VSwitch(self.nodes, hop_groups, self._on_miss, self.window_ms)
        self.md = Controller(self)
        self.hs = HotStandby(self)
        self.streams: list[WorkloadStream] = []
        self.injected = 0
        self.delivered = 0
        self.dropped_switch = 0
        self.dropped_overload = 0
        self.dropped_detected = 0
        self.attacks_sent = 0
        self.attacks_detected = 0
        self.attacks_missed = 0
        self.in_flight = 0
        self.ever_established: set[tuple] = set()
        self.reestablished = 0
        self._windows: dict[int, WindowCounters] = {}
        self.messages_sent = 0
        self.messages_dropped = 0
        self._ran = False

    # --- context used by controller / hot standby --------------------------------

    def schedule(self, delay_ms: int, target: Callable[..., Any], *payload: Any) -> None:
        self.queue.push(self.now_ms + delay_ms, target, *payload)

    def send(self, msg: Message, latency_ms: int | None = None) -> None:
        if latency_ms is None:
            latency_ms = round(self.cfg.timers.control_latency_s * 1000)
        msg.sent_ms = self.now_ms
        self.messages_sent += 1
        msg.msg_id = self.messages_sent
        self.schedule(latency_ms, self._deliver, msg)

    def log(self, source: str, severity: str, kind: str, payload: str) -> None:
        self.logs.emit(self.now_ms / 1000.0, source, severity, kind, payload)

    def metric(self, series: str, value: float, time_ms: int | None = None) -> None:
        t = self.now_ms if time_ms is None else time_ms
        self.metrics.append(MetricPoint(t / 1000.0, self.scenario, series, float(value)))

    def failure_time(self, node_id: str, default: int) -> int:
        return self.crash_times.get(node_id, default)

    def mark_active(self, node_id: str) -> None:
        self.active_since.setdefault(node_id, self.now_ms)

    def mark_inactive(self, node_id: str, at_ms: int | None = None) -> None:
        start = self.active_since.pop(node_id, None)
        if start is not None:
            node = self.nodes[node_id]
            end = self.now_ms if at_ms is None else at_ms
            self.active_intervals.append((node_id, node.group, start, end))

    def _new_node(self, group: str, role: Role) -> Middlebox:
        spec = self.cfg.group(group)
        self._ordinal[group] = self._ordinal.get(group, 0) + 1
        node_id = f"{group.lower()}-{self._ordinal[group]}"
        t = self.cfg.timers
        node = Middlebox(node_id, group, spec.kind, spec.node_capacity, role, self.window_ms,
                         t.session_table_limit, t.sslvpn_latency_ms)
        node.on_session_created = self._session_created
        self.nodes[node_id] = node
        if role is Role.ACTIVE:
            self.mark_active(node_id)
        return node

    def create_node(self, group: str, role: str, ready: Callable[[str | None], None]) -> None:
        """Provision a node after the configured creation latency."""
        def done() -> None:
            if self.create_failures > 0:
                self.create_failures -= 1
                self.log("md", "warn", "fault", f"creation of {role} node in {group} failed")
                ready(None)
                return
            node = self._new_node(group, Role(role))
            self.log("md", "info", "decision", f"group={group} created {role} {node.node_id}")
            ready(node.node_id)
        self.schedule(round(self.cfg.timers.node_create_latency_s * 1000), done)

    def destroy_node(self, node_id: str, at_ms: int | None = None) -> None:
        """Remove a node; ``at_ms`` backdates the end of its service to the
        moment traffic stopped reaching it."""
        node = self.nodes[node_id]
        self.hs.remove_active(node.group, node_id)
        node.alive = False
        self.mark_inactive(node_id, at_ms)
        self.log("md", "info", "decision", f"group={node.group} destroyed {node_id}")

    # --- message bus ----------------------------------------------------------------

    def _deliver(self, msg: Message) -> None:
        r = msg.receiver
        if r == "md":
            self.md.on_message(msg)
            return
        if r == "vswitch":
            self._switch_message(msg)
            return
        node = self.nodes.get(r)
        if node is None or not node.alive:
            self.messages_dropped += 1
            self.log("bus", "info", "protocol",
                     f"{msg.kind.value} from {msg.sender} to {r} dropped: receiver down")
            return
        if msg.kind is MessageKind.REQ_QUERY:
            st = node.utilization(self.now_ms)
            self.send(msg.reply(MessageKind.RES_QUERY, ID_Node=r, CPU=st.cpu_utilization,
                                memory=st.memory_utilization, sessions=st.sessions,
                                processed=st.processed_in_window, window=st.window))
        else:
            self.hs.on_message(msg)

    def _switch_message(self, msg: Message) -> None:
        if msg.kind is MessageKind.REQ_RELEASE:
            gen = self.vswitch.apply_delta(msg.body["delta"])
            self.send(msg.reply(MessageKind.RES_RELEASE, op=msg.body["op"], generation=gen,
                                installed_ms=self.now_ms))

    # --- data plane -------------------------------------------------------------------

    def _on_miss(self, packet: PacketDescriptor) -> None:
        self.log("vswitch", "warn", "drop",
                 f"no rule for {packet.service} {packet.direction} bucket={packet.bucket} "
                 f"hop={packet.hop_index}")

    def _session_created(self, node: Middlebox, entry: SessionEntry) -> None:
        if entry.key in self.ever_established:
            self.reestablished += 1
        else:
            self.ever_established.add(entry.key)
        self.hs.replicate(node, entry)

    def _counters(self, w: int) -> WindowCounters:
        c = self._windows.get(w)
        if c is None:
            c = self._windows[w] = WindowCounters()
        return c

    def _traffic_chunk(self, k: int) -> None:
        arrivals = []
        for s in self.streams:
            arrivals.extend(s.arrivals(k, self.window_ms))
        arrivals.sort(key=lambda a: (a[0], a[1], a[2]))
        i = 0
        while i < len(arrivals):
            t = arrivals[i][0]
            j = i
            while j < len(arrivals) and arrivals[j][0] == t:
                j += 1
            self.queue.push(t, self._packets, arrivals[i:j])
            i = j
        if (k + 1) * self.window_ms < self.end_ms:
            self.queue.push((k + 1) * self.window_ms, self._traffic_chunk, k + 1)

    def _packets(self, batch: list) -> None:
        now = self.now_ms
        counters = self._counters(now // self.window_ms)
        t = self.cfg.timers
        route = self.vswitch.route
        for _, w, c, tags in batch:
            stream = self.streams[w]
            cl = stream.clients[c]
            size = stream.spec.packet_size
            pkt = PacketDescriptor(cl.five_tuple, stream.service, cl.direction, 0, size, tags,
                                   False, now, cl.key, cl.bucket)
            self.injected += 1
            if tags:
                self.attacks_sent += 1
                counters.attacks_sent += 1
            outcome, _tag = route(pkt, now)
            if outcome is Outcome.DELIVERED:
                self.delivered += 1
                counters.delivered += 1
                counters.latency_sum += (t.baseline_service_latency_ms
                                         + t.per_hop_latency_ms * self._hops[stream.service]
                                         + pkt.latency_ms)
            elif outcome is Outcome.DROPPED_DETECTED:
                self.dropped_detected += 1
                self.attacks_detected += 1
                counters.attacks_detected += 1
            elif outcome is Outcome.DROPPED_OVERLOAD:
                self.dropped_overload += 1
                counters.overload_drops += 1
                if tags:
                    self.attacks_missed += 1
            else:
                self.dropped_switch += 1
                counters.switch_drops += 1
                if tags:
                    self.attacks_missed += 1

    # --- periodic work -------------------------------------------------------------------

    def _heartbeat(self) -> None:
        self.hs.tick()
        nxt = self.now_ms + round(self.cfg.timers.heartbeat_interval_s * 1000)
        if nxt <= self.end_ms:
            self.queue.push(nxt, self._heartbeat)

    def _window(self) -> None:
        now = self.now_ms
        stats = self.vswitch.report_stats(now)
        self.send(Message(MessageKind.REQ_REPORT, "vswitch", "md", {"stats": stats}))
        self._emit_window_metrics(now // self.window_ms - 1)
        self.md.on_window(now)
        if now + self.window_ms <= self.end_ms:
            self.queue.push(now + self.window_ms, self._window)

    def _active_capacity(self, lo: int, hi: int) -> float:
        """Active node capacity integrated over ``[lo, hi)`` ms, in requests."""
        total = 0.0
        spans = [(n, s, e) for n, _, s, e in self.active_intervals]
        spans += [(n, s, hi) for n, s in self.active_since.items()]
        for n, s, e in spans:
            overlap = min(e, hi) - max(s, lo)
            if overlap > 0:
                total += self.nodes[n].capacity * overlap / 1000.0
        return total

    def _emit_window_metrics(self, w: int) -> None:
        start, end = w * self.window_ms, (w + 1) * self.window_ms
        c = self._windows.pop(w, WindowCounters())
        window_s = self.window_ms / 1000.0
        if c.attacks_sent:
            self.metric("detection_rate", c.attacks_detected / c.attacks_sent, start)
        offered = sum(n.window_count(w) for n in self.nodes.values())
        cap = self._active_capacity(start, end)
        if cap > 0:
            self.metric("utilization", offered / cap, start)
        if c.delivered:
            self.metric("latency_ms", c.latency_sum / c.delivered, start)
        self.metric("throughput_rps", c.delivered / window_s, start)
        actives = sum(1 for n in self.nodes.values() if n.alive and n.role is Role.ACTIVE)
        if actives:
            self.metric("standby_ratio", len(self.cfg.groups) / actives, start)
        if c.overload_drops or c.switch_drops:
            self.log("vswitch", "warn", "drop",
                     f"window={w} overload_drops={c.overload_drops} switch_drops={c.switch_drops}")

    # --- run ------------------------------------------------------------------------------

    def _setup(self) -> None:
        cfg = self.cfg
        for f in cfg.faults:
            self.queue.push(round(f.time_s * 1000), inject_fault, self, f)
        members: dict[str, list[str]] = {}
        standbys: dict[str, str] = {}
        for g in cfg.groups:
            actives, standby = initial_node_ids(g)
            members[g.id] = [self._new_node(g.id, Role.ACTIVE).node_id for _ in actives]
            standbys[g.id] = self._new_node(g.id, Role.STANDBY).node_id
        self.md.bootstrap(members)
        for g in cfg.groups:
            self.hs.register_group(g.id, members[g.id], standbys[g.id])
        buckets = cfg.policy.bucket_count
        self.streams = [generate_workload(cfg, i, buckets) for i in range(len(cfg.workloads))]
        self.queue.push(0, self._heartbeat)
        if self.window_ms <= self.end_ms:
            self.queue.push(self.window_ms, self._window)
        if self.streams and self.end_ms > 0:
            self.queue.push(0, self._traffic_chunk, 0)

    def run(self) -> Simulation:
        if self._ran:
            raise RuntimeError("simulation already ran")
        self._ran = True
        self._setup()
        q = self.queue
        while q._heap and q._heap[0].time_ms <= self.end_ms:
            ev = q.pop()
            self.now_ms = ev.time_ms
            ev.target(*ev.payload)
        self.now_ms = self.end_ms
        for n in list(self.active_since):
            self.mark_inactive(n)
        return self

    # --- summaries -------------------------------------------------------------------------

    def conservation(self) -> dict[str, int]:
        return {"injected": self.injected, "delivered": self.delivered,
                "dropped_switch": self.dropped_switch, "dropped_overload": self.dropped_overload,
                "dropped_detected": self.dropped_detected, "in_flight": self.in_flight}


def run(cfg: ScenarioConfig, scenario: str | None = None) -> Simulation:
    return Simulation(cfg, scenario).run()
