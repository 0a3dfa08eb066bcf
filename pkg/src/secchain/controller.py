"""Management domain: load-balance, scaling and failure policy, and the
decision loop that turns decisions into installed rule deltas."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping

from .chain_compiler import AssignmentPlan, RuleSet, compile_rules, diff
from .protocol import Message, MessageKind
from .topology import PolicyConfig

if TYPE_CHECKING:
    from .simengine import Simulation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoadSample:
    node_id: str
    cpu_utilization: float
    memory_utilization: float
    sessions: int
    packets_forwarded: int
    window: int
    source: str = "node-query"
    time_ms: int = 0


class DecisionKind(str, enum.Enum):
    NONE = "none"
    REBALANCE = "rebalance"
    SCALE_OUT = "scale_out"
    SCALE_IN = "scale_in"


@dataclass(frozen=True)
class ScalingDecision:
    kind: DecisionKind
    group: str
    plan: AssignmentPlan | None = None
    victim: str | None = None
    trigger: Mapping[str, float] = field(default_factory=dict)


class FailureKind(str, enum.Enum):
    SWITCHOVER = "switchover"
    REBALANCE_ONTO = "rebalance_onto"
    EMERGENCY_SCALE_OUT = "emergency_scale_out"


@dataclass(frozen=True)
class FailureResponse:
    kind: FailureKind
    failed: str
    standby: str | None = None
    survivors: tuple[str, ...] = ()


class CreateFailed(RuntimeError):
    pass


# --- pure policy -------------------------------------------------------------------


# utilizations are ratios of integer counts; differences below this are ties
_EPS = 1e-9


def _argmax(utils: Mapping[str, float]) -> str:
    return min(utils, key=lambda n: (-utils[n], n))


def _argmin(utils: Mapping[str, float]) -> str:
    return min(utils, key=lambda n: (utils[n], n))


def rebalance_plan(plan: AssignmentPlan, group: str, src: str, dst: str,
                   utils: Mapping[str, float], bucket_loads: Mapping[int, float]) -> AssignmentPlan:
    """Move buckets from ``src`` to ``dst``, largest first (ties: lowest index),
    taking a bucket only if it strictly narrows the gap between the two."""
    new = plan.copy()
    u_src, u_dst = utils.get(src, 0.0), utils.get(dst, 0.0)
    for b in sorted(new.buckets_of(group, src), key=lambda b: (-bucket_loads.get(b, 0.0), b)):
        load = bucket_loads.get(b, 0.0)
        if 0.0 < load < u_src - u_dst - _EPS:
            new.groups[group][b] = dst
            u_src -= load
            u_dst += load
    return new


def spread_plan(plan: AssignmentPlan, group: str, new_node: str,
                utils: Mapping[str, float], bucket_loads: Mapping[int, float]) -> AssignmentPlan:
    """Fill a freshly created node by repeatedly pulling from the busiest node."""
    new = plan.copy()
    u = {n: utils.get(n, 0.0) for n in new.nodes(group)}
    u[new_node] = 0.0
    moved = True
    while moved:
        moved = False
        donors = sorted((n for n in u if n != new_node), key=lambda n: (-u[n], n))
        for src in donors:
            gap = u[src] - u[new_node]
            for b in sorted(new.buckets_of(group, src), key=lambda b: (-bucket_loads.get(b, 0.0), b)):
                load = bucket_loads.get(b, 0.0)
                if 0.0 < load < gap - _EPS:
                    new.groups[group][b] = new_node
                    u[src] -= load
                    u[new_node] += load
                    moved = True
                    break
            if moved:
                break
    if new_node not in new.groups[group]:
        # no traffic to move: still hand the new node an equal share of buckets
        n = len(u)
        src_buckets = [b for b in range(new.buckets) if b % n == n - 1]
        for b in src_buckets:
            new.groups[group][b] = new_node
    return new


def drain_plan(plan: AssignmentPlan, group: str, victim: str, survivors: list[str],
               utils: Mapping[str, float], bucket_loads: Mapping[int, float]) -> AssignmentPlan:
    """Reassign every bucket of ``victim``, largest first, to the least-loaded survivor."""
    if not survivors:
        raise ValueError(f"no survivors to drain {victim} onto")
    new = plan.copy()
    u = {n: utils.get(n, 0.0) for n in survivors}
    for b in sorted(new.buckets_of(group, victim), key=lambda b: (-bucket_loads.get(b, 0.0), b)):
        dst = _argmin(u)
        new.groups[group][b] = dst
        u[dst] += bucket_loads.get(b, 0.0)
    return new


def replace_node(plan: AssignmentPlan, group: str, old: str, new_node: str) -> AssignmentPlan:
    new = plan.copy()
    new.groups[group] = [new_node if n == old else n for n in new.groups[group]]
    return new


def plan_scaling(group: str, utils: Mapping[str, float], plan: AssignmentPlan,
                 bucket_loads: Mapping[int, float], policy: PolicyConfig,
                 max_active: int) -> ScalingDecision:
    """Evaluate the group policy in order: rebalance, scale out, scale in, nothing.

    Scale-in additionally requires that the consolidated load stays at or
    below the overload threshold; otherwise the next window would scale out
    again.
    """
    if not utils:
        return ScalingDecision(DecisionKind.NONE, group)
    hi, lo = _argmax(utils), _argmin(utils)
    n = len(utils)
    total = sum(utils.values())
    mean = total / n
    trigger = {"max": utils[hi], "min": utils[lo], "mean": mean}
    if policy.rebalance and n > 1 and utils[hi] - utils[lo] > policy.imbalance_threshold:
        new = rebalance_plan(plan, group, hi, lo, utils, bucket_loads)
        if new.groups[group] != plan.groups[group]:
            return ScalingDecision(DecisionKind.REBALANCE, group, new, trigger=trigger)
    if not policy.autoscale:
        return ScalingDecision(DecisionKind.NONE, group, trigger=trigger)
    if n < max_active and all(u > policy.overload_threshold for u in utils.values()):
        return ScalingDecision(DecisionKind.SCALE_OUT, group, trigger=trigger)
    if n > 1 and mean < policy.scale_in_threshold and total / (n - 1) <= policy.overload_threshold:
        victim = _argmin(utils)
        survivors = sorted(x for x in utils if x != victim)
        new = drain_plan(plan, group, victim, survivors, utils, bucket_loads)
        return ScalingDecision(DecisionKind.SCALE_IN, group, new, victim, trigger=trigger)
    return ScalingDecision(DecisionKind.NONE, group, trigger=trigger)


def can_absorb(survivor_utils: Mapping[str, float], failed_util: float, threshold: float) -> bool:
    if not survivor_utils:
        return False
    return (sum(survivor_utils.values()) + failed_util) / len(survivor_utils) <= threshold


def handle_node_failure(failed: str, survivor_utils: Mapping[str, float], failed_util: float,
                        standby: str | None, policy: PolicyConfig) -> FailureResponse:
    survivors = tuple(sorted(survivor_utils))
    if can_absorb(survivor_utils, failed_util, policy.overload_threshold):
        return FailureResponse(FailureKind.REBALANCE_ONTO, failed, None, survivors)
    if standby is not None:
        return FailureResponse(FailureKind.SWITCHOVER, failed, standby, survivors)
    return FailureResponse(FailureKind.EMERGENCY_SCALE_OUT, failed, None, survivors)


# --- decision loop -------------------------------------------------------------------


@dataclass
class ResponseRecord:
    """Completed control action with its sub-phase breakdown (seconds)."""

    kind: str
    group: str
    trigger_ms: int
    installed_ms: int
    phases: dict[str, float]

    @property
    def elapsed_s(self) -> float:
        return (self.installed_ms - self.trigger_ms) / 1000.0


@dataclass
class _Op:
    op_id: int
    kind: str
    group: str
    trigger_ms: int
    phases: dict[str, float]
    on_installed: Callable[[int], None] | None = None


class Controller:
    """The MD. Driven entirely by simulation events and protocol messages."""

    name = "md"

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.cfg = sim.cfg
        self.policy = sim.cfg.policy
        self.timers = sim.cfg.timers
        self.members: dict[str, list[str]] = {}
        self.plan = AssignmentPlan(self.policy.bucket_count)
        self.rules: RuleSet = {}
        self.samples: dict[str, LoadSample] = {}
        self.bucket_stats = None
        self.busy: dict[str, _Op | None] = {}
        self.queued: dict[str, list[Message]] = {}
        self.last_change: dict[str, int] = {}
        self.failed: set[str] = set()
        self.responses: list[ResponseRecord] = []
        self.decisions: list[tuple[int, ScalingDecision]] = []
        self.switchovers: list = []
        self._ops: dict[int, _Op] = {}
        self._next_op = 0
        self._last_query_sessions: dict[str, int] = {}

    # --- helpers -------------------------------------------------------------

    def group_of(self, node_id: str) -> str:
        return self.sim.nodes[node_id].group

    def _ms(self, seconds: float) -> int:
        return round(seconds * 1000)

    def _capacity(self, group: str) -> float:
        return self.cfg.group(group).node_capacity

    def utils(self, group: str, nodes: list[str] | None = None) -> dict[str, float]:
        nodes = self.members[group] if nodes is None else nodes
        return {n: self.samples[n].cpu_utilization if n in self.samples else 0.0 for n in nodes}

    def bucket_loads(self, group: str) -> dict[int, float]:
        stats = self.bucket_stats
        if stats is None:
            return {}
        window_s = (stats.window_end_ms - stats.window_start_ms) / 1000.0 or 1.0
        cap = self._capacity(group) * window_s
        return {b: c / cap for (g, b), c in stats.bucket_packets.items() if g == group}

    def _alive_members(self) -> list[str]:
        return [n for nodes in self.members.values() for n in nodes]

    # --- bootstrap -------------------------------------------------------------

    def bootstrap(self, members: dict[str, list[str]]) -> None:
        """Initial routing, installed before any traffic flows."""
        self.members = {g: list(v) for g, v in members.items()}
        self.plan = AssignmentPlan.round_robin(self.members, self.policy.bucket_count)
        self.rules = compile_rules(self.cfg, self.plan, self._alive_members())
        self.sim.vswitch.apply_delta(diff({}, self.rules))
        for g in self.members:
            self.busy[g] = None
            self.queued[g] = []
            self.last_change[g] = 0
            if self.policy.dispatch == "round_robin":
                self.sim.vswitch.set_round_robin(g, self.members[g])

    # --- periodic evaluation -----------------------------------------------------

    def on_window(self, now_ms: int) -> None:
        for g in self.members:
            for n in self.members[g]:
                self.sim.send(Message(MessageKind.REQ_QUERY, self.name, n, {"ID_Node": n}))
        self.sim.schedule(self._ms(self.timers.detect_s), self.evaluate, now_ms)

    def evaluate(self, poll_ms: int) -> None:
        window = poll_ms // self.sim.window_ms - 1
        for g in list(self.members):
            if self.busy[g] is not None:
                continue
            members = self.members[g]
            missing = [n for n in members
                       if n not in self.samples or self.samples[n].window != window]
            if missing:
                if self.sim.hs.standby_of(g) is None:
                    self._poll_failure(g, missing[0], poll_ms)
                continue
            if self.policy.dispatch == "round_robin":
                continue
            if window * self.sim.window_ms < self.last_change[g]:
                continue
            decision = plan_scaling(g, self.utils(g), self.plan, self.bucket_loads(g),
                                    self.policy, self.cfg.group(g).max_active)
            if decision.kind is not DecisionKind.NONE:
                self.decisions.append((self.sim.now_ms, decision))
                self.execute(decision, poll_ms)

    def execute(self, decision: ScalingDecision, trigger_ms: int) -> None:
        g = decision.group
        t = self.timers
        if decision.kind is DecisionKind.SCALE_OUT:
            op = self._begin(g, "create", trigger_ms, {"detect": t.detect_s,
                             "create": t.node_create_latency_s, "generate": t.generate_s,
                             "install": t.rule_install_latency_s})
            self._scale_out(op, retries=1)
            return
        kind = "rebalance" if decision.kind is DecisionKind.REBALANCE else "scale_in"
        op = self._begin(g, kind, trigger_ms, {"detect": t.detect_s, "generate": t.generate_s,
                                               "install": t.rule_install_latency_s})
        if decision.kind is DecisionKind.SCALE_IN:
            victim = decision.victim

            def finish(installed_ms: int) -> None:
                self.members[g] = [n for n in self.members[g] if n != victim]
                self.samples.pop(victim, None)
                self.sim.destroy_node(victim, installed_ms)
            op.on_installed = finish
        self.sim.schedule(self._ms(t.generate_s), self._install, op, decision.plan)

    def _scale_out(self, op: _Op, retries: int) -> None:
        g = op.group

        def ready(node_id: str | None) -> None:
            if node_id is None:
                if retries > 0:
                    self.sim.log("md", "warn", "decision", f"group={g} create failed, retrying")
                    self._scale_out(op, retries - 1)
                else:
                    self.sim.log("md", "warn", "decision", f"group={g} create failed twice, giving up")
                    self._finish(op, None)
                return
            self.members[g].append(node_id)
            self.sim.hs.add_active(g, node_id)
            self.sim.schedule(self._ms(self.timers.generate_s), self._generate_spread, op, node_id)

        self.sim.create_node(g, "active", ready)

    def _generate_spread(self, op: _Op, node_id: str) -> None:
        g = op.group
        old = [n for n in self.members[g] if n != node_id]
        plan = spread_plan(self.plan, g, node_id, self.utils(g, old), self.bucket_loads(g))
        self._install(op, plan)

    def _begin(self, group: str, kind: str, trigger_ms: int, phases: dict[str, float]) -> _Op:
        self._next_op += 1
        op = _Op(self._next_op, kind, group, trigger_ms, phases)
        self._ops[op.op_id] = op
        self.busy[group] = op
        return op

    def _install(self, op: _Op, plan: AssignmentPlan) -> None:
        self.plan = plan
        new_rules = compile_rules(self.cfg, plan, self._alive_members())
        delta = diff(self.rules, new_rules)
        self.rules = new_rules
        self.sim.send(Message(MessageKind.REQ_RELEASE, self.name, "vswitch",
                              {"delta": delta, "op": op.op_id}),
                      latency_ms=self._ms(self.timers.rule_install_latency_s))

    def _finish(self, op: _Op, installed_ms: int | None) -> None:
        g = op.group
        self._ops.pop(op.op_id, None)
        self.busy[g] = None
        if installed_ms is not None:
            if op.on_installed is not None:
                op.on_installed(installed_ms)
            if self.policy.dispatch == "round_robin":
                self.sim.vswitch.set_round_robin(g, self.members[g])
            self.last_change[g] = installed_ms
            rec = ResponseRecord(op.kind, g, op.trigger_ms, installed_ms, op.phases)
            self.responses.append(rec)
            self.sim.metric("response_time_s", rec.elapsed_s)
            phases = " ".join(f"{k}={v:g}" for k, v in op.phases.items())
            self.sim.log("md", "critical" if op.kind == "emergency_create" else "info",
                         "switchover" if op.kind == "switchover" else "decision",
                         f"group={g} action={op.kind} elapsed_s={rec.elapsed_s:.3f} {phases}")
        while self.queued[g] and self.busy[g] is None:
            self._handle_replace(self.queued[g].pop(0))

    # --- messages ----------------------------------------------------------------

    def on_message(self, msg: Message) -> None:
        kind = msg.kind
        if kind is MessageKind.RES_QUERY:
            b = msg.body
            self.samples[b["ID_Node"]] = LoadSample(
                b["ID_Node"], b["CPU"], b["memory"], b["sessions"], b["processed"],
                b["window"], "node-query", self.sim.now_ms)
        elif kind is MessageKind.REQ_REPORT:
            self.bucket_stats = msg.body["stats"]
            self.sim.send(msg.reply(MessageKind.RES_REPORT))
        elif kind is MessageKind.RES_RELEASE:
            op = self._ops.get(msg.body["op"])
            if op is not None:
                self._finish(op, msg.body["installed_ms"])
        elif kind is MessageKind.REQ_REPLACE:
            g = self.group_of(msg.body["ID_active"])
            if self.busy[g] is not None:
                self.queued[g].append(msg)
            else:
                self._handle_replace(msg)

    # --- failures ------------------------------------------------------------------

    def _mark_failed(self, g: str, failed: str) -> float:
        util = self.samples[failed].cpu_utilization if failed in self.samples else 0.0
        self.failed.add(failed)
        self.members[g] = [n for n in self.members[g] if n != failed]
        self.samples.pop(failed, None)
        return util

    def _handle_replace(self, msg: Message) -> None:
        failed, standby = msg.body["ID_active"], msg.body["ID_standby"]
        g = self.group_of(failed)
        if failed not in self.members[g]:
            self.sim.send(msg.reply(MessageKind.RES_REPLACE, accepted=False,
                                    ID_active=failed, ID_standby=standby),
                          latency_ms=self._ms(self.timers.replace_latency_s))
            return
        failed_util = self._mark_failed(g, failed)
        usable = standby if self.sim.hs.standby_of(g) == standby else None
        resp = handle_node_failure(failed, self.utils(g), failed_util, usable, self.policy)
        self.sim.log("md", "info", "decision",
                     f"group={g} failure={failed} response={resp.kind.value}")
        accepted = resp.kind is FailureKind.SWITCHOVER
        self.sim.send(msg.reply(MessageKind.RES_REPLACE, accepted=accepted,
                                ID_active=failed, ID_standby=standby),
                      latency_ms=self._ms(self.timers.replace_latency_s))
        now = self.sim.now_ms
        if accepted:
            self._switchover(g, failed, standby, msg.body.get("t_detect_ms", now), now)
            return
        self.sim.metric("sessions_lost", float(msg.body.get("sessions", 0)))
        for n in self.members[g]:
            self.sim.send(Message(MessageKind.REQ_QUERY, self.name, n, {"ID_Node": n}))
        self.sim.schedule(self._ms(self.timers.detect_s), self._respond_to_failure,
                          g, failed, resp, now, failed_util)
        self.busy[g] = _Op(0, "pending", g, now, {})

    def _poll_failure(self, g: str, failed: str, poll_ms: int) -> None:
        sessions = self._last_sessions(failed)
        failed_util = self._mark_failed(g, failed)
        resp = handle_node_failure(failed, self.utils(g), failed_util, None, self.policy)
        self.sim.log("md", "critical", "fault",
                     f"group={g} node={failed} unresponsive to query; no standby; "
                     f"response={resp.kind.value}")
        self.sim.metric("sessions_lost", float(sessions))
        self._respond_to_failure(g, failed, resp, poll_ms, failed_util)

    def _last_sessions(self, node: str) -> int:
        s = self.samples.get(node)
        return s.sessions if s is not None else 0

    def _respond_to_failure(self, g: str, failed: str, resp: FailureResponse,
                            trigger_ms: int, failed_util: float) -> None:
        t = self.timers
        self.busy[g] = None
        if resp.kind is FailureKind.REBALANCE_ONTO:
            survivors = list(self.members[g])
            loads = self.bucket_loads(g)
            utils = self.utils(g)
            op = self._begin(g, "rebalance", trigger_ms, {"detect": t.detect_s,
                             "generate": t.generate_s, "install": t.rule_install_latency_s})
            plan = drain_plan(self.plan, g, failed, survivors, utils, loads)
            self.sim.schedule(self._ms(t.generate_s), self._install, op, plan)
            return
        op = self._begin(g, "emergency_create", trigger_ms, {"detect": t.detect_s,
                         "create": t.node_create_latency_s, "generate": t.generate_s,
                         "install": t.rule_install_latency_s})
        self.sim.log("md", "critical", "decision",
                     f"group={g} no standby alive and survivors saturated: emergency scale-out")

        def ready(node_id: str | None) -> None:
            if node_id is None:
                self.sim.log("md", "critical", "decision", f"group={g} emergency create failed")
                self._finish(op, None)
                return
            self.members[g].append(node_id)
            self.sim.hs.add_active(g, node_id)
            plan = replace_node(self.plan, g, failed, node_id)
            self.sim.schedule(self._ms(t.generate_s), self._install, op, plan)

        self.sim.create_node(g, "active", ready)

    def _switchover(self, g: str, failed: str, standby: str, t_detect_ms: int, now: int) -> None:
        t = self.timers
        replace_rt = self._ms(t.replace_latency_s)
        op = self._begin(g, "switchover", self.sim.failure_time(failed, t_detect_ms), {
            "detect": round(t.heartbeat_interval_s * t.missed_heartbeats_for_failure, 6),
            "replace": 2 * t.replace_latency_s, "install": t.rule_install_latency_s})
        t_replace_sent = t_detect_ms

        def issue() -> None:
            self.members[g].append(standby)
            self._install(op, replace_node(self.plan, g, failed, standby))

        def finish(installed_ms: int) -> None:
            from .hotstandby import SwitchoverRecord
            rec = SwitchoverRecord(failed, standby, op.trigger_ms, t_detect_ms, t_replace_sent,
                                   installed_ms)
            self.switchovers.append(rec)
            self.sim.hs.after_switchover(g, rec)

        op.on_installed = finish
        self.sim.schedule(replace_rt, issue)
