"""Scenario runner: built-in scenarios, variant expansion, output files,
log queries and run-vs-baseline comparison."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from .records import SERIES, LogRecord, LogStore, MetricPoint
from .simengine import Simulation
from .topology import ConfigError, ScenarioConfig, SchemaError, parse_config, serialize_config

BUILTIN_SCENARIOS = ("burst7a", "scalein7b", "failure8", "web9", "email10")
CSV_HEADER = "time_s,scenario,series,value"


class UnknownScenario(ConfigError):
    pass


@dataclass
class ScenarioResult:
    scenario: str
    metrics: list[MetricPoint]
    logs: list[LogRecord]
    summary: dict[str, Any]
    sim: Simulation | None = field(default=None, repr=False)

    def series(self, name: str) -> list[tuple[float, float]]:
        return [(m.time_s, m.value) for m in self.metrics if m.series == name]

    def metrics_csv(self) -> str:
        return metrics_csv(self.metrics)

    def logs_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.logs)

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv(), newline="\n")
        (out / "logs.tsv").write_text(self.logs_text(), newline="\n")
        (out / "summary.json").write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n",
                                          newline="\n")
        if self.sim is not None:
            (out / "rules.txt").write_text(self.sim.vswitch.table.dump(), newline="\n")
        return out


def metrics_csv(points: Iterable[MetricPoint]) -> str:
    return CSV_HEADER + "\n" + "".join(p.csv_row() + "\n" for p in points)


def read_metrics_csv(text: str) -> list[MetricPoint]:
    rows = csv.DictReader(io.StringIO(text))
    return [MetricPoint(float(r["time_s"]), r["scenario"], r["series"], float(r["value"]))
            for r in rows]


# --- documents ------------------------------------------------------------------------


def deep_merge(base: Any, patch: Any) -> Any:
    """Objects merge recursively; anything else (lists included) is replaced."""
    if isinstance(base, Mapping) and isinstance(patch, Mapping):
        out = dict(base)
        for k, v in patch.items():
            out[k] = deep_merge(base[k], v) if k in base else copy.deepcopy(v)
        return out
    return copy.deepcopy(patch)


def load_scenario_document(name_or_path: str) -> dict[str, Any]:
    if name_or_path in BUILTIN_SCENARIOS:
        text = resources.files("secchain.scenarios").joinpath(f"{name_or_path}.json").read_text()
    else:
        p = Path(name_or_path)
        if not p.is_file():
            raise UnknownScenario(
                f"unknown scenario {name_or_path!r}; built-ins: {', '.join(BUILTIN_SCENARIOS)}")
        text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("expected object at top level")
    doc.setdefault("name", Path(name_or_path).stem)
    return doc


def apply_override(doc: dict[str, Any], assignment: str) -> None:
    """Apply ``dotted.path=value``; the value is parsed as JSON, else kept as a string.

    Numeric path segments index into lists.
    """
    if "=" not in assignment:
        raise SchemaError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node: Any = doc
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise SchemaError(f"bad list index {part!r}", key) from None
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[part] = value
            else:
                node = node.setdefault(part, {})
        else:
            raise SchemaError(f"cannot descend into {part!r}", key)


def expand_variants(doc: Mapping[str, Any]) -> list[tuple[str | None, dict[str, Any]]]:
    base = {k: v for k, v in doc.items() if k != "variants"}
    variants = doc.get("variants")
    if not variants:
        return [(None, dict(base))]
    if not isinstance(variants, Mapping):
        raise SchemaError("expected object", "variants")
    return [(name, deep_merge(base, patch)) for name, patch in variants.items()]


def workload_hash(cfg: ScenarioConfig) -> str:
    doc = serialize_config(cfg)
    key = {"seed": cfg.seed, "duration_s": cfg.duration_s, "workloads": doc["workloads"]}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def summarize(sim: Simulation, cfg: ScenarioConfig, scenario: str) -> dict[str, Any]:
    """Aggregates recomputable from the metric points plus run counters."""
    by_series: dict[str, list[float]] = {}
    for m in sim.metrics:
        by_series.setdefault(m.series, []).append(m.value)
    means = {s: statistics.fmean(v) for s, v in sorted(by_series.items())}
    util = by_series.get("utilization", [])
    det = by_series.get("detection_rate", [])
    return {
        "scenario": scenario,
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "workload_hash": workload_hash(cfg),
        "means": means,
        "counts": {s: len(v) for s, v in sorted(by_series.items())},
        "breaches": {
            "utilization_above_1": sum(1 for u in util if u > 1.0),
            "detection_below_1": sum(1 for d in det if d < 1.0),
        },
        "conservation": sim.conservation(),
        "attacks": {"sent": sim.attacks_sent, "detected": sim.attacks_detected,
                    "missed": sim.attacks_missed},
        "sessions": {"established": len(sim.ever_established),
                     "reestablished": sim.reestablished},
        "responses": [{"kind": r.kind, "group": r.group, "trigger_s": r.trigger_ms / 1000,
                       "installed_s": r.installed_ms / 1000, "elapsed_s": r.elapsed_s,
                       "phases": r.phases} for r in sim.md.responses],
        "switchovers": [{"failed": s.failed, "standby": s.standby, "total_s": s.total_s}
                        for s in sim.hs.records],
        "events": sim.queue.processed,
    }


def run_config(cfg: ScenarioConfig, scenario: str | None = None) -> ScenarioResult:
    label = scenario or cfg.name
    sim = Simulation(cfg, label).run()
    return ScenarioResult(label, list(sim.metrics), list(sim.logs), summarize(sim, cfg, label), sim)


def run_scenario(name_or_path: str | Mapping[str, Any], out_dir: str | Path | None = None,
                 seed: int | None = None, duration: float | None = None,
                 overrides: Iterable[str] = (), variants: Iterable[str] | None = None,
                 ) -> dict[str, ScenarioResult]:
    """Run every variant of a scenario; returns results keyed by variant name.

    A document without variants yields a single entry under its own name.
    With ``out_dir`` set, each variant writes into its own subdirectory
    (or directly into ``out_dir`` when there is only one).
    """
    if isinstance(name_or_path, Mapping):
        doc = copy.deepcopy(dict(name_or_path))
    else:
        doc = load_scenario_document(name_or_path)
    for o in overrides:
        apply_override(doc, o)
    if seed is not None:
        doc["seed"] = seed
    if duration is not None:
        doc["duration_s"] = duration
    name = str(doc.get("name", "custom"))
    wanted = None if variants is None else set(variants)
    results: dict[str, ScenarioResult] = {}
    expanded = expand_variants(doc)
    for variant, vdoc in expanded:
        if wanted is not None and variant not in wanted:
            continue
        label = name if variant is None else f"{name}/{variant}"
        cfg = parse_config(vdoc)
        result = run_config(cfg, label)
        results[variant or name] = result
        if out_dir is not None:
            target = Path(out_dir) if variant is None else Path(out_dir) / variant
            result.write(target)
    return results


# --- queries and comparison --------------------------------------------------------------


def query_logs(source: ScenarioResult | LogStore | str | Path, start: float | None = None,
               end: float | None = None, severity: str | None = None, kind: str | None = None,
               node: str | None = None) -> list[LogRecord]:
    if isinstance(source, ScenarioResult):
        store = LogStore(source.logs)
    elif isinstance(source, LogStore):
        store = source
    else:
        store = LogStore.read(source)
    return store.query(start, end, severity, node, kind)


def _load_run(run: ScenarioResult | str | Path) -> tuple[list[MetricPoint], dict[str, Any]]:
    if isinstance(run, ScenarioResult):
        return run.metrics, run.summary
    d = Path(run)
    metrics = read_metrics_csv((d / "metrics.csv").read_text())
    summary = json.loads((d / "summary.json").read_text())
    return metrics, summary


class WorkloadMismatch(ValueError):
    pass


def _mean(points: list[MetricPoint], series: str) -> float | None:
    vals = [p.value for p in points if p.series == series]
    return statistics.fmean(vals) if vals else None


def compare(run: ScenarioResult | str | Path, baseline: ScenarioResult | str | Path
            ) -> dict[str, Any]:
    """Relative overheads of ``run`` against ``baseline``, in percent."""
    m_run, s_run = _load_run(run)
    m_base, s_base = _load_run(baseline)
    if s_run.get("workload_hash") != s_base.get("workload_hash"):
        raise WorkloadMismatch("runs used different workloads "
                               f"({s_run.get('workload_hash')} vs {s_base.get('workload_hash')})")
    report: dict[str, Any] = {"run": s_run.get("scenario"), "baseline": s_base.get("scenario"),
                              "series": {}}
    for series in SERIES:
        a, b = _mean(m_run, series), _mean(m_base, series)
        if a is None or b is None:
            continue
        delta = a - b
        rel = 0.0 if delta == 0 else (delta / b * 100.0 if b else float("inf"))
        report["series"][series] = {"run": a, "baseline": b, "delta_pct": rel}
    lat = report["series"].get("latency_ms")
    thr = report["series"].get("throughput_rps")
    report["latency_overhead_pct"] = lat["delta_pct"] if lat else None
    report["throughput_overhead_pct"] = -thr["delta_pct"] if thr else None
    return report
