"""Static domain model: security groups, inspection chains, services, and
scenario configuration parsing/validation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from typing import Any, Mapping


class GroupKind(str, enum.Enum):
    FW = "FW"
    WAF = "WAF"
    AS = "AS"
    SSLVPN = "SSLVPN"
    IDS = "IDS"
    AV = "AV"


ATTACK_TAGS = ("SQLI", "XSS", "SYNFLOOD", "DDOS", "SPAM", "MALWARE", "VIRUSMAIL")


class ConfigError(ValueError):
    """Base class for configuration problems. ``errors`` holds every issue found."""

    def __init__(self, message: str, path: str = "", errors: list[ConfigError] | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message
        self.errors = errors if errors is not None else [self]


class SchemaError(ConfigError):
    pass


class ConfigReferenceError(ConfigError):
    pass


class RangeError(ConfigError):
    pass


class UnknownService(KeyError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    id: str
    kind: GroupKind
    initial_active: int = 1
    max_active: int = 1
    node_capacity: float = 1000.0
    standby_count: int = 1


@dataclass(frozen=True)
class ChainSpec:
    id: str
    hops: tuple[str, ...] = ()


@dataclass(frozen=True)
class ServiceSpec:
    id: str
    kind: str
    chain: str


@dataclass(frozen=True)
class NodeId:
    """Stable node identity. Role is runtime state on the node itself, so the
    id survives a standby-to-active switchover unchanged."""

    group: str
    ordinal: int

    def __str__(self) -> str:
        return f"{self.group.lower()}-{self.ordinal}"


def initial_node_ids(group: GroupSpec) -> tuple[list[str], str]:
    """Active ids 1..n and the standby id n+1 created at simulation start."""
    actives = [str(NodeId(group.id, i)) for i in range(1, group.initial_active + 1)]
    return actives, str(NodeId(group.id, group.initial_active + 1))


@dataclass(frozen=True)
class TimerConfig:
    heartbeat_interval_s: float = 0.2
    missed_heartbeats_for_failure: int = 3
    state_sync_mode: str = "per-update"
    rule_install_latency_s: float = 0.4
    node_create_latency_s: float = 2.0
    stats_report_period_s: float = 1.0
    per_hop_latency_ms: float = 0.25
    baseline_service_latency_ms: float = 5.0
    sslvpn_latency_ms: float = 0.4
    detect_s: float = 0.4
    generate_s: float = 0.2
    control_latency_s: float = 0.05
    replace_latency_s: float = 0.1
    session_table_limit: int = 1_000_000
    event_cap: int = 100_000_000


@dataclass(frozen=True)
class PolicyConfig:
    overload_threshold: float = 0.8
    scale_in_threshold: float = 0.5
    imbalance_threshold: float = 0.2
    autoscale: bool = True
    rebalance: bool = True
    dispatch: str = "bucket"
    bucket_count: int = 64


@dataclass(frozen=True)
class WorkloadSpec:
    service: str
    clients: int
    per_client_rate: float
    per_client_rate_end: float | None = None
    start_s: float = 0.0
    end_s: float | None = None
    attack_mix: Mapping[str, float] = field(default_factory=dict)
    external_fraction: float = 1.0
    rate_divisor: float = 1.0
    packet_size: int = 512

    def rate_at(self, t: float) -> float:
        """Per-client request rate at time ``t`` after division."""
        end = self.per_client_rate if self.per_client_rate_end is None else self.per_client_rate_end
        if self.end_s is None or self.end_s <= self.start_s:
            r = self.per_client_rate
        else:
            frac = min(max((t - self.start_s) / (self.end_s - self.start_s), 0.0), 1.0)
            r = self.per_client_rate + (end - self.per_client_rate) * frac
        return r / self.rate_divisor


@dataclass(frozen=True)
class FaultSpec:
    target: str
    time_s: float
    kind: str = "crash"


@dataclass(frozen=True)
class ScenarioConfig:
    groups: tuple[GroupSpec, ...]
    chains: tuple[ChainSpec, ...]
    services: tuple[ServiceSpec, ...]
    workloads: tuple[WorkloadSpec, ...] = ()
    faults: tuple[FaultSpec, ...] = ()
    timers: TimerConfig = TimerConfig()
    policy: PolicyConfig = PolicyConfig()
    seed: int = 0
    duration_s: float = 10.0
    name: str = "custom"

    def group(self, group_id: str) -> GroupSpec:
        for g in self.groups:
            if g.id == group_id:
                return g
        raise KeyError(group_id)

    def service(self, service_id: str) -> ServiceSpec:
        for s in self.services:
            if s.id == service_id:
                return s
        raise UnknownService(service_id)

    def chain(self, chain_id: str) -> ChainSpec:
        for c in self.chains:
            if c.id == chain_id:
                return c
        raise KeyError(chain_id)


def chain_for_service(cfg: ScenarioConfig, service: str) -> ChainSpec:
    return cfg.chain(cfg.service(service).chain)


# --- parsing -----------------------------------------------------------------

_TOP_KEYS = {"groups", "chains", "services", "workloads", "faults", "timers", "policy",
             "seed", "duration_s", "name"}


class _Collector:
    def __init__(self) -> None:
        self.errors: list[ConfigError] = []

    def add(self, cls: type[ConfigError], path: str, message: str) -> None:
        self.errors.append(cls(message, path))


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check_fields(obj: Any, allowed: set[str], required: set[str], path: str,
                  col: _Collector) -> bool:
    if not isinstance(obj, Mapping):
        col.add(SchemaError, path, f"expected object, got {type(obj).__name__}")
        return False
    for k in obj:
        if k not in allowed:
            col.add(SchemaError, f"{path}.{k}" if path else str(k), "unknown field")
    for k in sorted(required):
        if k not in obj:
            col.add(SchemaError, f"{path}.{k}" if path else k, "missing required field")
    return True


def _num(obj: Mapping, key: str, path: str, col: _Collector, default: Any = None,
         integer: bool = False, positive: bool = False, minimum: float | None = None) -> Any:
    if key not in obj:
        return default
    v = obj[key]
    p = f"{path}.{key}" if path else key
    if integer:
        if not isinstance(v, int) or isinstance(v, bool):
            col.add(SchemaError, p, f"expected integer, got {v!r}")
            return default
    elif not _is_number(v):
        col.add(SchemaError, p, f"expected number, got {v!r}")
        return default
    if positive and v <= 0:
        col.add(RangeError, p, f"must be positive, got {v!r}")
    if minimum is not None and v < minimum:
        col.add(RangeError, p, f"must be >= {minimum}, got {v!r}")
    return v


def _str(obj: Mapping, key: str, path: str, col: _Collector, default: Any = None) -> Any:
    if key not in obj:
        return default
    v = obj[key]
    if not isinstance(v, str) or not v:
        col.add(SchemaError, f"{path}.{key}", f"expected non-empty string, got {v!r}")
        return default
    return v


def _list(doc: Mapping, key: str, col: _Collector) -> list:
    v = doc.get(key, [])
    if not isinstance(v, list):
        col.add(SchemaError, key, "expected list")
        return []
    return v


def _parse_groups(doc: Mapping, col: _Collector) -> list[GroupSpec]:
    out = []
    seen: set[str] = set()
    allowed = {"id", "kind", "initial_active", "max_active", "node_capacity", "standby_count"}
    for i, g in enumerate(_list(doc, "groups", col)):
        path = f"groups[{i}]"
        if not _check_fields(g, allowed, {"id", "kind"}, path, col):
            continue
        gid = _str(g, "id", path, col)
        if gid is not None:
            path = f"groups.{gid}"
            if gid in seen:
                col.add(SchemaError, path, "duplicate group id")
            seen.add(gid)
        kind = None
        if "kind" in g:
            try:
                kind = GroupKind(g["kind"])
            except ValueError:
                col.add(SchemaError, f"{path}.kind", f"unknown group kind {g['kind']!r}")
        initial = _num(g, "initial_active", path, col, 1, integer=True, minimum=1)
        max_active = _num(g, "max_active", path, col, initial, integer=True, minimum=1)
        cap = _num(g, "node_capacity", path, col, 1000.0, positive=True)
        standby = _num(g, "standby_count", path, col, 1, integer=True)
        if standby != 1:
            col.add(RangeError, f"{path}.standby_count", "exactly one standby per group")
        if isinstance(initial, int) and isinstance(max_active, int) and initial > max_active:
            col.add(RangeError, f"{path}.max_active", "must be >= initial_active")
        if gid is not None and kind is not None:
            out.append(GroupSpec(gid, kind, initial, max_active, float(cap), 1))
    return out


def _parse_chains(doc: Mapping, groups: set[str], col: _Collector) -> list[ChainSpec]:
    out = []
    seen: set[str] = set()
    for i, c in enumerate(_list(doc, "chains", col)):
        path = f"chains[{i}]"
        if not _check_fields(c, {"id", "hops"}, {"id"}, path, col):
            continue
        cid = _str(c, "id", path, col)
        if cid is None:
            continue
        path = f"chains.{cid}"
        if cid in seen:
            col.add(SchemaError, path, "duplicate chain id")
        seen.add(cid)
        hops = c.get("hops", [])
        if not isinstance(hops, list) or not all(isinstance(h, str) for h in hops):
            col.add(SchemaError, f"{path}.hops", "expected list of group ids")
            continue
        used: set[str] = set()
        for j, h in enumerate(hops):
            if h not in groups:
                col.add(ConfigReferenceError, f"{path}.hops[{j}]", f"unknown group {h!r}")
            if h in used:
                col.add(SchemaError, f"{path}.hops[{j}]", f"group {h!r} repeated in chain")
            used.add(h)
        out.append(ChainSpec(cid, tuple(hops)))
    return out


def _parse_services(doc: Mapping, chains: set[str], col: _Collector) -> list[ServiceSpec]:
    out = []
    seen: set[str] = set()
    for i, s in enumerate(_list(doc, "services", col)):
        path = f"services[{i}]"
        if not _check_fields(s, {"id", "kind", "chain"}, {"id", "chain"}, path, col):
            continue
        sid = _str(s, "id", path, col)
        if sid is None:
            continue
        path = f"services.{sid}"
        if sid in seen:
            col.add(SchemaError, path, "duplicate service id")
        seen.add(sid)
        chain = _str(s, "chain", path, col)
        if chain is not None and chain not in chains:
            col.add(ConfigReferenceError, f"{path}.chain", f"unknown chain {chain!r}")
        out.append(ServiceSpec(sid, _str(s, "kind", path, col, "web"), chain or ""))
    return out


_WORKLOAD_KEYS = {f.name for f in fields(WorkloadSpec)}


def _parse_workloads(doc: Mapping, services: set[str], col: _Collector) -> list[WorkloadSpec]:
    out = []
    for i, w in enumerate(_list(doc, "workloads", col)):
        path = f"workloads[{i}]"
        if not _check_fields(w, _WORKLOAD_KEYS, {"service", "clients", "per_client_rate"},
                             path, col):
            continue
        svc = _str(w, "service", path, col)
        if svc is not None and svc not in services:
            col.add(ConfigReferenceError, f"{path}.service", f"unknown service {svc!r}")
        clients = _num(w, "clients", path, col, 0, integer=True, minimum=0)
        rate = _num(w, "per_client_rate", path, col, 0.0, positive=True)
        rate_end = _num(w, "per_client_rate_end", path, col, None, positive=True)
        start = _num(w, "start_s", path, col, 0.0, minimum=0)
        end = _num(w, "end_s", path, col, None, positive=True)
        if end is not None and start is not None and end <= start:
            col.add(RangeError, f"{path}.end_s", "must be after start_s")
        ext = _num(w, "external_fraction", path, col, 1.0, minimum=0)
        if ext is not None and ext > 1:
            col.add(RangeError, f"{path}.external_fraction", "must be in [0, 1]")
        mix = w.get("attack_mix", {})
        if not isinstance(mix, Mapping):
            col.add(SchemaError, f"{path}.attack_mix", "expected object")
            mix = {}
        total = 0.0
        for tag, frac in mix.items():
            if tag not in ATTACK_TAGS:
                col.add(SchemaError, f"{path}.attack_mix.{tag}", "unknown attack tag")
            if not _is_number(frac) or not 0 <= frac <= 1:
                col.add(RangeError, f"{path}.attack_mix.{tag}", "fraction must be in [0, 1]")
            else:
                total += frac
        if total > 1 + 1e-12:
            col.add(RangeError, f"{path}.attack_mix", "attack fractions sum above 1")
        div = _num(w, "rate_divisor", path, col, 1.0, positive=True)
        size = _num(w, "packet_size", path, col, 512, integer=True, positive=True)
        out.append(WorkloadSpec(
            service=svc or "", clients=clients, per_client_rate=float(rate),
            per_client_rate_end=None if rate_end is None else float(rate_end),
            start_s=float(start), end_s=None if end is None else float(end),
            attack_mix=dict(sorted(mix.items())), external_fraction=float(ext),
            rate_divisor=float(div), packet_size=size,
        ))
    return out


def _parse_faults(doc: Mapping, groups: list[GroupSpec], duration: float,
                  col: _Collector) -> list[FaultSpec]:
    known = set()
    for g in groups:
        actives, standby = initial_node_ids(g)
        known.update(actives)
        known.add(standby)
    group_ids = {g.id for g in groups}
    out = []
    for i, f in enumerate(_list(doc, "faults", col)):
        path = f"faults[{i}]"
        if not _check_fields(f, {"target", "time_s", "kind"}, {"target", "time_s"}, path, col):
            continue
        target = _str(f, "target", path, col)
        if target is not None:
            if target.startswith("random-active-in(") and target.endswith(")"):
                if target[len("random-active-in("):-1] not in group_ids:
                    col.add(ConfigReferenceError, f"{path}.target", f"unknown group in {target!r}")
            elif target not in known:
                col.add(ConfigReferenceError, f"{path}.target", f"unknown node {target!r}")
        t = _num(f, "time_s", path, col, 0.0, minimum=0)
        if t is not None and duration is not None and t > duration:
            col.add(RangeError, f"{path}.time_s", "fault after end of run")
        kind = _str(f, "kind", path, col, "crash")
        if kind != "crash":
            col.add(SchemaError, f"{path}.kind", f"unsupported fault kind {kind!r}")
        if target is not None:
            out.append(FaultSpec(target, float(t), "crash"))
    return out


def _parse_section(doc: Mapping, key: str, cls: type, col: _Collector) -> Any:
    raw = doc.get(key, {})
    if not _check_fields(raw, {f.name for f in fields(cls)}, set(), key, col):
        return cls()
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        v = raw[f.name]
        p = f"{key}.{f.name}"
        default = f.default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                col.add(SchemaError, p, "expected boolean")
                continue
        elif isinstance(default, int):
            if not isinstance(v, int) or isinstance(v, bool):
                col.add(SchemaError, p, "expected integer")
                continue
            if v <= 0:
                col.add(RangeError, p, "must be positive")
        elif isinstance(default, float):
            if not _is_number(v):
                col.add(SchemaError, p, "expected number")
                continue
            if v <= 0 and key == "timers":
                col.add(RangeError, p, "must be positive")
            if v < 0:
                col.add(RangeError, p, "must be non-negative")
            v = float(v)
        elif isinstance(default, str):
            if not isinstance(v, str):
                col.add(SchemaError, p, "expected string")
                continue
        kwargs[f.name] = v
    out = cls(**kwargs)
    if cls is PolicyConfig and out.dispatch not in ("bucket", "round_robin"):
        col.add(SchemaError, "policy.dispatch", f"unknown dispatch {out.dispatch!r}")
    if cls is TimerConfig and out.state_sync_mode != "per-update":
        col.add(SchemaError, "timers.state_sync_mode", "only 'per-update' is supported")
    return out


def parse_config(document: Mapping[str, Any]) -> ScenarioConfig:
    """Build a validated :class:`ScenarioConfig` from a JSON-like tree.

    Every problem found is collected; the raised exception is of the type of
    the first problem and carries the full list in ``errors``.
    """
    col = _Collector()
    if not isinstance(document, Mapping):
        raise SchemaError("expected object at top level")
    for k in document:
        if k not in _TOP_KEYS:
            col.add(SchemaError, str(k), "unknown field")
    seed = _num(document, "seed", "", col, 0, integer=True, minimum=0)
    duration = _num(document, "duration_s", "", col, 10.0, positive=True)
    name = document.get("name", "custom")
    if not isinstance(name, str):
        col.add(SchemaError, "name", "expected string")
        name = "custom"
    groups = _parse_groups(document, col)
    chains = _parse_chains(document, {g.id for g in groups}, col)
    services = _parse_services(document, {c.id for c in chains}, col)
    workloads = _parse_workloads(document, {s.id for s in services}, col)
    faults = _parse_faults(document, groups, duration, col)
    timers = _parse_section(document, "timers", TimerConfig, col)
    policy = _parse_section(document, "policy", PolicyConfig, col)
    if not groups and not col.errors:
        col.add(SchemaError, "groups", "at least one group required")
    if col.errors:
        first = col.errors[0]
        raise type(first)(first.message, first.path, col.errors)
    return ScenarioConfig(
        groups=tuple(groups), chains=tuple(chains), services=tuple(services),
        workloads=tuple(workloads), faults=tuple(faults), timers=timers, policy=policy,
        seed=seed, duration_s=float(duration), name=name,
    )


def serialize_config(cfg: ScenarioConfig) -> dict[str, Any]:
    def wl(w: WorkloadSpec) -> dict:
        d = {"service": w.service, "clients": w.clients, "per_client_rate": w.per_client_rate,
             "start_s": w.start_s, "attack_mix": dict(w.attack_mix),
             "external_fraction": w.external_fraction, "rate_divisor": w.rate_divisor,
             "packet_size": w.packet_size}
        if w.per_client_rate_end is not None:
            d["per_client_rate_end"] = w.per_client_rate_end
        if w.end_s is not None:
            d["end_s"] = w.end_s
        return d

    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "groups": [{"id": g.id, "kind": g.kind.value, "initial_active": g.initial_active,
                    "max_active": g.max_active, "node_capacity": g.node_capacity,
                    "standby_count": g.standby_count} for g in cfg.groups],
        "chains": [{"id": c.id, "hops": list(c.hops)} for c in cfg.chains],
        "services": [{"id": s.id, "kind": s.kind, "chain": s.chain} for s in cfg.services],
        "workloads": [wl(w) for w in cfg.workloads],
        "faults": [{"target": f.target, "time_s": f.time_s, "kind": f.kind} for f in cfg.faults],
        "timers": {f.name: getattr(cfg.timers, f.name) for f in fields(TimerConfig)},
        "policy": {f.name: getattr(cfg.policy, f.name) for f in fields(PolicyConfig)},
    }


def validate_topology(cfg: ScenarioConfig) -> list[str]:
    """Warnings for legal but suspicious settings."""
    warnings = []
    used = {h for c in cfg.chains for h in c.hops}
    for g in cfg.groups:
        if g.max_active == g.initial_active and g.id in used and cfg.policy.autoscale:
            warnings.append(f"group {g.id}: scale-out disabled (max_active == initial_active)")
        if g.id not in used:
            warnings.append(f"group {g.id}: not referenced by any chain")
    for s in cfg.services:
        if not cfg.chain(s.chain).hops:
            warnings.append(f"service {s.id}: service unprotected (empty chain)")
    served = {w.service for w in cfg.workloads}
    for s in cfg.services:
        if cfg.workloads and s.id not in served:
            warnings.append(f"service {s.id}: no workload targets it")
    return warnings
