"""RouteGen: compile service chains and bucket assignments into flow rules,
and compute minimal deltas between rule sets."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Union

from .topology import ScenarioConfig


class Direction(str, enum.Enum):
    EXTERNAL = "external"
    INTERNAL = "internal"


DIRECTIONS = (Direction.EXTERNAL, Direction.INTERNAL)


class FlowMatch(NamedTuple):
    service: str
    direction: Direction
    session_bucket: int
    hop_index: int


class ForwardTo(NamedTuple):
    node: str

    def __str__(self) -> str:
        return f"forward {self.node}"


class DeliverToService(NamedTuple):
    service: str

    def __str__(self) -> str:
        return f"deliver {self.service}"


class _Drop:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Drop"

    def __str__(self) -> str:
        return "drop"

    def __reduce__(self):
        return (_Drop, ())


Drop = _Drop()

Action = Union[ForwardTo, DeliverToService, _Drop]


class FlowRule(NamedTuple):
    match: FlowMatch
    action: Action


RuleSet = dict  # FlowMatch -> Action


class IncompletePlan(ValueError):
    pass


class DanglingNode(ValueError):
    pass


@dataclass
class AssignmentPlan:
    """Per group, the active node serving each session bucket."""

    buckets: int
    groups: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def round_robin(cls, members: Mapping[str, list[str]], buckets: int) -> AssignmentPlan:
        return cls(buckets, {g: [nodes[b % len(nodes)] for b in range(buckets)]
                             for g, nodes in members.items()})

    def copy(self) -> AssignmentPlan:
        return AssignmentPlan(self.buckets, {g: list(v) for g, v in self.groups.items()})

    def node_for(self, group: str, bucket: int) -> str:
        return self.groups[group][bucket]

    def buckets_of(self, group: str, node: str) -> list[int]:
        return [b for b, n in enumerate(self.groups[group]) if n == node]

    def nodes(self, group: str) -> list[str]:
        return sorted(set(self.groups[group]))


@dataclass
class RuleDelta:
    add: list[FlowRule] = field(default_factory=list)
    remove: list[FlowRule] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.add or self.remove)

    def inverse(self) -> RuleDelta:
        return RuleDelta(add=list(self.remove), remove=list(self.add))


def session_bucket(five_tuple: tuple, buckets: int) -> int:
    """Stable bucket for a session; both directions of a flow map to the same value.

    ``five_tuple`` is ``(src_ip, src_port, dst_ip, dst_port, proto)``.
    """
    src_ip, src_port, dst_ip, dst_port, proto = five_tuple
    a, b = sorted([(str(src_ip), int(src_port)), (str(dst_ip), int(dst_port))])
    key = f"{a[0]}:{a[1]}|{b[0]}:{b[1]}|{str(proto).lower()}".encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") % buckets


def compile_rules(cfg: ScenarioConfig, plan: AssignmentPlan,
                  alive: Iterable[str] | None = None) -> RuleSet:
    """Expand every (service, direction, bucket) into its full hop sequence."""
    alive_set = None if alive is None else set(alive)
    rules: RuleSet = {}
    chains = {c.id: c.hops for c in cfg.chains}
    for svc in cfg.services:
        hops = chains[svc.chain]
        for g in hops:
            assigned = plan.groups.get(g)
            if assigned is None or len(assigned) != plan.buckets:
                raise IncompletePlan(f"group {g} not fully covered by plan")
            if alive_set is not None:
                for n in assigned:
                    if n not in alive_set:
                        raise DanglingNode(f"plan assigns bucket of {g} to dead node {n}")
        deliver = DeliverToService(svc.id)
        for direction in DIRECTIONS:
            for b in range(plan.buckets):
                for i, g in enumerate(hops):
                    rules[FlowMatch(svc.id, direction, b, i)] = ForwardTo(plan.groups[g][b])
                rules[FlowMatch(svc.id, direction, b, len(hops))] = deliver
    return rules


def diff(old: RuleSet, new: RuleSet) -> RuleDelta:
    delta = RuleDelta()
    for m, a in old.items():
        b = new.get(m)
        if b != a:
            delta.remove.append(FlowRule(m, a))
    for m, b in new.items():
        if old.get(m) != b:
            delta.add.append(FlowRule(m, b))
    return delta


def apply_delta(rules: RuleSet, delta: RuleDelta) -> RuleSet:
    out = dict(rules)
    for r in delta.remove:
        if out.get(r.match) == r.action:
            del out[r.match]
    for r in delta.add:
        out[r.match] = r.action
    return out


def _rule_line(m: FlowMatch, a: Action) -> str:
    return f"{m.service} {m.direction.value} {m.session_bucket} {m.hop_index} -> {a}"


def dump_rules(rules: RuleSet) -> str:
    """One rule per line, lexicographically sorted."""
    return "".join(line + "\n" for line in sorted(_rule_line(m, a) for m, a in rules.items()))
