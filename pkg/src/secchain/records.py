"""ELMD log records, metric points, and the append-only log store."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

SERIES = ("detection_rate", "utilization", "latency_ms", "throughput_rps", "sessions_lost",
          "standby_ratio", "response_time_s")
SEVERITIES = ("info", "warn", "critical")
KINDS = ("decision", "switchover", "drop", "fault", "protocol")


@dataclass(frozen=True)
class MetricPoint:
    time_s: float
    scenario: str
    series: str
    value: float

    def __post_init__(self) -> None:
        if self.series not in SERIES:
            raise ValueError(f"unknown series {self.series!r}")

    def csv_row(self) -> str:
        return f"{self.time_s:.3f},{self.scenario},{self.series},{self.value!r}"


@dataclass(frozen=True)
class LogRecord:
    time_s: float
    source: str
    severity: str
    kind: str
    payload: str

    def __post_init__(self) -> None:
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")

    def line(self) -> str:
        payload = self.payload.replace("\t", " ").replace("\n", " ")
        return f"{self.time_s:.3f}\t{self.severity}\t{self.source}\t{self.kind}\t{payload}"

    @classmethod
    def parse(cls, line: str) -> LogRecord:
        t, sev, src, kind, payload = line.rstrip("\n").split("\t", 4)
        return cls(float(t), src, sev, kind, payload)


class LogStore:
    """Append-only ELMD store, ordered by (time, arrival)."""

    def __init__(self, records: Iterable[LogRecord] = ()) -> None:
        self._records: list[LogRecord] = []
        for r in records:
            self.append(r)

    def append(self, record: LogRecord) -> None:
        if self._records and record.time_s < self._records[-1].time_s:
            raise ValueError("log records must be appended in time order")
        self._records.append(record)

    def emit(self, time_s: float, source: str, severity: str, kind: str, payload: str) -> None:
        self.append(LogRecord(time_s, source, severity, kind, payload))

    def __iter__(self) -> Iterator[LogRecord]:
        return iter(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def query(self, start: float | None = None, end: float | None = None,
              severity: str | None = None, source: str | None = None,
              kind: str | None = None) -> list[LogRecord]:
        """Conjunctive filter; ``None`` means unconstrained."""
        return [r for r in self._records
                if (start is None or r.time_s >= start)
                and (end is None or r.time_s <= end)
                and (severity is None or r.severity == severity)
                and (source is None or r.source == source)
                and (kind is None or r.kind == kind)]

    def dumps(self) -> str:
        return "".join(r.line() + "\n" for r in self._records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), newline="\n")

    @classmethod
    def read(cls, path: str | Path) -> LogStore:
        text = Path(path).read_text()
        return cls(LogRecord.parse(line) for line in text.splitlines() if line)
