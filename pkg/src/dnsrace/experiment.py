"""Randomized raced-lookup trials and the per-replication-level analysis.

The run side follows a fixed protocol: repeatedly pick a random target
and a random replication level k, race the lookup, and record latency
plus exact traffic. The analysis side turns those records into per-k
aggregates, improvement percentages, savings per extra kilobyte of
traffic (in total and per added server), and a recommendation for how
many servers are worth racing at a given break-even threshold.

Trial records interchange as CSV (one row per trial, fixed header) with
an optional JSON sidecar carrying full per-server detail; records
measured by external tooling can be imported through the same CSV.
"""

from __future__ import annotations

import csv
import json
import math
import random
import warnings as _warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .codec import QuerySpec
from .economics import Threshold
from .resolver import (
    RankedServerList,
    ResolverError,
    ServerStats,
    Transport,
    resolve_raced,
)

CSV_HEADER = (
    "target",
    "k",
    "latency_ms",
    "timed_out",
    "bytes_sent_total",
    "bytes_received_total",
    "timestamp",
)

STATISTICS = ("mean", "p95")

BYTES_PER_KB = 1024.0


class ExperimentError(Exception):
    """Invalid experiment configuration or unusable record set."""


class AnalysisError(ExperimentError):
    """Record set violates an accounting precondition of the analysis."""


@dataclass(frozen=True)
class ExperimentConfig:
    targets: tuple[str, ...]
    trials: int
    k_max: int = 10
    timeout_ms: float = 30000.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets:
            raise ExperimentError("targets must be nonempty")
        if self.trials < 1:
            raise ExperimentError(f"trials must be >= 1, got {self.trials}")
        if self.k_max < 1:
            raise ExperimentError(f"k_max must be >= 1, got {self.k_max}")
        if self.timeout_ms <= 0:
            raise ExperimentError(f"timeout_ms must be positive, got {self.timeout_ms}")

    def to_dict(self) -> dict:
        return {
            "targets": list(self.targets),
            "trials": self.trials,
            "k_max": self.k_max,
            "timeout_ms": self.timeout_ms,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        return cls(
            targets=tuple(data["targets"]),
            trials=int(data["trials"]),
            k_max=int(data.get("k_max", 10)),
            timeout_ms=float(data.get("timeout_ms", 30000.0)),
            seed=int(data.get("seed", 0)),
        )


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


@dataclass
class TrialRecord:
    """One raced lookup: what was asked, how long it took, what it cost."""

    target: str
    k: int
    latency_ms: float | None
    timed_out: bool
    bytes_sent_total: int
    bytes_received_total: int
    timestamp: float
    query_bytes: int | None = None
    winner_wire_bytes: int | None = None
    per_server: list[ServerStats] | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ExperimentError(f"k must be >= 1, got {self.k}")
        if (self.latency_ms is None) != self.timed_out:
            raise ExperimentError("latency_ms must be present exactly when the trial did not time out")

    @property
    def has_detail(self) -> bool:
        return self.query_bytes is not None and self.winner_wire_bytes is not None

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "k": self.k,
            "latency_ms": self.latency_ms,
            "timed_out": self.timed_out,
            "bytes_sent_total": self.bytes_sent_total,
            "bytes_received_total": self.bytes_received_total,
            "timestamp": self.timestamp,
            "query_bytes": self.query_bytes,
            "winner_wire_bytes": self.winner_wire_bytes,
            "per_server": None
            if self.per_server is None
            else [s.to_dict() for s in self.per_server],
        }

    @classmethod
    def from_dict(cls, data: dict) -> TrialRecord:
        per_server = data.get("per_server")
        return cls(
            target=str(data["target"]),
            k=int(data["k"]),
            latency_ms=None if data["latency_ms"] is None else float(data["latency_ms"]),
            timed_out=bool(data["timed_out"]),
            bytes_sent_total=int(data["bytes_sent_total"]),
            bytes_received_total=int(data["bytes_received_total"]),
            timestamp=float(data["timestamp"]),
            query_bytes=None if data.get("query_bytes") is None else int(data["query_bytes"]),
            winner_wire_bytes=None
            if data.get("winner_wire_bytes") is None
            else int(data["winner_wire_bytes"]),
            per_server=None
            if per_server is None
            else [ServerStats.from_dict(s) for s in per_server],
        )


def run_experiment(
    cfg: ExperimentConfig,
    ranked: RankedServerList,
    transport: Transport | None = None,
) -> list[TrialRecord]:
    """Run cfg.trials sequential raced lookups with seeded randomization.

    Each trial draws a uniform target, a uniform k in [1, k_max], and a
    fresh 16-bit transaction id from the same seeded generator. A trial
    whose sends all fail is recorded as timed out with zero traffic
    rather than aborting the run.
    """
    if cfg.k_max > len(ranked):
        raise ExperimentError(
            f"k_max={cfg.k_max} exceeds the {len(ranked)} servers in the ranked list"
        )
    rng = random.Random(cfg.seed)
    records: list[TrialRecord] = []
    for _ in range(cfg.trials):
        target = rng.choice(cfg.targets)
        k = rng.randint(1, cfg.k_max)
        query = QuerySpec(target, id=rng.getrandbits(16))
        timestamp = transport.now_ms() if transport is not None else 0.0
        try:
            result = resolve_raced(
                query, ranked, k, deadline_ms=cfg.timeout_ms, transport=transport
            )
        except ResolverError:
            records.append(
                TrialRecord(
                    target=target,
                    k=k,
                    latency_ms=None,
                    timed_out=True,
                    bytes_sent_total=0,
                    bytes_received_total=0,
                    timestamp=timestamp,
                )
            )
            continue
        records.append(
            TrialRecord(
                target=target,
                k=k,
                latency_ms=result.latency_ms,
                timed_out=result.timed_out,
                bytes_sent_total=result.bytes_sent_total,
                bytes_received_total=result.bytes_received_total,
                timestamp=timestamp,
                query_bytes=result.query_bytes,
                winner_wire_bytes=result.winner_wire_bytes,
                per_server=result.per_server,
            )
        )
    return records


def extra_traffic_bytes(record: TrialRecord) -> float:
    """Traffic beyond what the unreplicated lookup would have cost.

    At k=1 the technique adds nothing by definition. With full detail
    the baseline is one query plus the winning response; from CSV-only
    records the baseline is estimated as a 1/k share of the total.
    """
    if record.k == 1:
        return 0.0
    total = record.bytes_sent_total + record.bytes_received_total
    if record.has_detail:
        return float(total - (record.query_bytes + record.winner_wire_bytes))
    return total * (record.k - 1) / record.k


@dataclass(frozen=True)
class ReplicationStats:
    """Latency and traffic aggregates for one replication level."""

    k: int
    n: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    mean_extra_kb: float

    def statistic(self, name: str) -> float:
        if name == "mean":
            return self.mean_ms
        if name == "p95":
            return self.p95_ms
        if name == "median":
            return self.median_ms
        raise AnalysisError(f"unknown statistic {name!r}")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n": self.n,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            "mean_extra_kb": self.mean_extra_kb,
        }


def nearest_rank(sorted_values: Sequence[float], percent: int) -> float:
    """Nearest-rank percentile: the value at index ceil(percent*n/100) - 1."""
    n = len(sorted_values)
    if n == 0:
        raise AnalysisError("cannot take a percentile of an empty sample")
    rank = max(1, (percent * n + 99) // 100)
    return sorted_values[rank - 1]


def aggregate(records: Sequence[TrialRecord]) -> list[ReplicationStats]:
    """Per-k aggregates, ascending in k.

    Timed-out trials carry no latency sample but their traffic still
    counts toward mean_extra_kb. A k whose trials all timed out is
    omitted with a warning.
    """
    if not records:
        raise AnalysisError("no records to aggregate")
    by_k: dict[int, list[TrialRecord]] = {}
    for record in records:
        by_k.setdefault(record.k, []).append(record)
    rows: list[ReplicationStats] = []
    for k in sorted(by_k):
        group = by_k[k]
        latencies = sorted(r.latency_ms for r in group if not r.timed_out)
        if not latencies:
            _warnings.warn(
                f"k={k}: all {len(group)} trials timed out; row omitted", stacklevel=2
            )
            continue
        n = len(latencies)
        rows.append(
            ReplicationStats(
                k=k,
                n=n,
                mean_ms=math.fsum(latencies) / n,
                median_ms=latencies[(n - 1) // 2],
                p95_ms=nearest_rank(latencies, 95),
                mean_extra_kb=math.fsum(extra_traffic_bytes(r) for r in group)
                / len(group)
                / BYTES_PER_KB,
            )
        )
    return rows


def _baseline(stats: Sequence[ReplicationStats]) -> ReplicationStats:
    for row in stats:
        if row.k == 1:
            return row
    raise AnalysisError("analysis requires a k=1 baseline row")


def relative_improvement(
    stats: Sequence[ReplicationStats], statistic: str = "mean"
) -> dict[int, float]:
    """Percent improvement over the k=1 baseline, per k."""
    base = _baseline(stats).statistic(statistic)
    if base <= 0:
        raise AnalysisError(f"baseline {statistic} must be positive, got {base}")
    return {
        row.k: 100.0 * (base - row.statistic(statistic)) / base for row in stats
    }


def normalized_savings(
    stats: Sequence[ReplicationStats], statistic: str = "mean"
) -> dict[int, float]:
    """Savings per extra KB relative to k=1, in ms/KB, for k >= 2."""
    base = _baseline(stats).statistic(statistic)
    out: dict[int, float] = {}
    for row in stats:
        if row.k == 1:
            continue
        if row.mean_extra_kb <= 0:
            raise AnalysisError(
                f"k={row.k} recorded no extra traffic; byte accounting is broken"
            )
        out[row.k] = (base - row.statistic(statistic)) / row.mean_extra_kb
    return out


def incremental_savings(
    stats: Sequence[ReplicationStats], statistic: str = "mean"
) -> dict[int, float]:
    """Savings per extra KB from the k-th server alone, in ms/KB.

    Defined for each k whose k-1 row is also present.
    """
    by_k = {row.k: row for row in stats}
    out: dict[int, float] = {}
    for k in sorted(by_k):
        if k == 1 or k - 1 not in by_k:
            continue
        prev, cur = by_k[k - 1], by_k[k]
        delta_kb = cur.mean_extra_kb - prev.mean_extra_kb
        if delta_kb <= 0:
            raise AnalysisError(
                f"extra traffic did not increase from k={k - 1} to k={k}; "
                "byte accounting is broken"
            )
        out[k] = (prev.statistic(statistic) - cur.statistic(statistic)) / delta_kb
    return out


def recommend_k(incremental: Mapping[int, float], threshold: Threshold | float) -> int:
    """Largest k whose servers each paid for themselves, scanning up from 2.

    Every step 2..k must clear the threshold; the first shortfall stops
    the scan, so a later profitable step cannot rescue a losing one.
    """
    cutoff = threshold.ms_per_kb if isinstance(threshold, Threshold) else float(threshold)
    best = 1
    j = 2
    while j in incremental and incremental[j] >= cutoff:
        best = j
        j += 1
    return best


@dataclass(frozen=True)
class AnalysisRow:
    k: int
    n: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    mean_extra_kb: float
    improvement_pct: dict[str, float]
    normalized_savings_ms_per_kb: dict[str, float] | None
    incremental_savings_ms_per_kb: dict[str, float] | None

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n": self.n,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            "mean_extra_kb": self.mean_extra_kb,
            "improvement_pct": self.improvement_pct,
            "normalized_savings_ms_per_kb": self.normalized_savings_ms_per_kb,
            "incremental_savings_ms_per_kb": self.incremental_savings_ms_per_kb,
        }


@dataclass(frozen=True)
class AnalysisReport:
    baseline: ReplicationStats
    rows: list[AnalysisRow]
    thresholds_ms_per_kb: dict[str, float] = field(default_factory=dict)
    recommended_k: dict[str, int] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline.to_dict(),
            "rows": [row.to_dict() for row in self.rows],
            "thresholds_ms_per_kb": self.thresholds_ms_per_kb,
            "recommended_k": self.recommended_k,
            "flags": self.flags,
            "warnings": self.warnings,
        }


def _check_telescoping(
    stats: Sequence[ReplicationStats], incremental: Mapping[int, float], statistic: str
) -> None:
    # total savings at k must equal the sum of its per-step savings
    # weighted by each step's traffic increment
    by_k = {row.k: row for row in stats}
    base = _baseline(stats).statistic(statistic)
    running = 0.0
    k = 2
    while k in by_k and k - 1 in by_k and k in incremental:
        delta_kb = by_k[k].mean_extra_kb - by_k[k - 1].mean_extra_kb
        running += incremental[k] * delta_kb
        lhs = base - by_k[k].statistic(statistic)
        tolerance = 1e-9 * max(1.0, abs(lhs), abs(running))
        if abs(lhs - running) > tolerance:
            raise AnalysisError(
                f"telescoping identity broken at k={k} ({statistic}): "
                f"direct savings {lhs} vs summed increments {running}"
            )
        k += 1


def build_report(
    records: Sequence[TrialRecord],
    thresholds: Mapping[str, Threshold | float] | None = None,
) -> AnalysisReport:
    """Aggregate records and derive the full analysis.

    thresholds maps a label (an incentive model name, a plan pair, any
    caller-chosen key) to a break-even value in ms/KB; one recommended k
    is computed per entry from the mean statistic.
    """
    with _warnings.catch_warnings(record=True) as caught:
        _warnings.simplefilter("always")
        stats = aggregate(records)
    warning_texts = [str(w.message) for w in caught]
    baseline = _baseline(stats)
    improvement = {s: relative_improvement(stats, s) for s in STATISTICS}
    normalized = {s: normalized_savings(stats, s) for s in STATISTICS}
    incremental = {s: incremental_savings(stats, s) for s in STATISTICS}
    for statistic in STATISTICS:
        _check_telescoping(stats, incremental[statistic], statistic)
    flags: list[str] = []
    rows: list[AnalysisRow] = []
    for row in stats:
        norm = None
        incr = None
        if row.k != 1:
            norm = {s: normalized[s][row.k] for s in STATISTICS if row.k in normalized[s]}
            incr = {s: incremental[s][row.k] for s in STATISTICS if row.k in incremental[s]}
            for s in STATISTICS:
                if norm and s in norm and norm[s] < 0:
                    flags.append(f"negative savings: normalized {s} at k={row.k}")
                if incr and s in incr and incr[s] < 0:
                    flags.append(f"negative savings: incremental {s} at k={row.k}")
        rows.append(
            AnalysisRow(
                k=row.k,
                n=row.n,
                mean_ms=row.mean_ms,
                median_ms=row.median_ms,
                p95_ms=row.p95_ms,
                mean_extra_kb=row.mean_extra_kb,
                improvement_pct={s: improvement[s][row.k] for s in STATISTICS},
                normalized_savings_ms_per_kb=norm,
                incremental_savings_ms_per_kb=incr,
            )
        )
    thresholds_out: dict[str, float] = {}
    recommended: dict[str, int] = {}
    for name, value in (thresholds or {}).items():
        cutoff = value.ms_per_kb if isinstance(value, Threshold) else float(value)
        thresholds_out[name] = cutoff
        recommended[name] = recommend_k(incremental["mean"], cutoff)
    return AnalysisReport(
        baseline=baseline,
        rows=rows,
        thresholds_ms_per_kb=thresholds_out,
        recommended_k=recommended,
        flags=flags,
        warnings=warning_texts,
    )


def _write_csv(fh, records: Sequence[TrialRecord]) -> None:
    writer = csv.writer(fh)
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow(
            [
                r.target,
                r.k,
                "" if r.latency_ms is None else repr(r.latency_ms),
                "true" if r.timed_out else "false",
                r.bytes_sent_total,
                r.bytes_received_total,
                repr(r.timestamp),
            ]
        )


def write_records_csv(records: Sequence[TrialRecord], dest) -> None:
    """Write records to a path or an open text stream."""
    if hasattr(dest, "write"):
        _write_csv(dest, records)
        return
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        _write_csv(fh, records)


def read_records_csv(path: str | Path) -> list[TrialRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(CSV_HEADER):
            raise ExperimentError(
                f"{path}: expected header {','.join(CSV_HEADER)}, got {header}"
            )
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ExperimentError(f"{path}: row has {len(row)} fields: {row!r}")
            records.append(
                TrialRecord(
                    target=row[0],
                    k=int(row[1]),
                    latency_ms=float(row[2]) if row[2] else None,
                    timed_out=row[3].strip().lower() == "true",
                    bytes_sent_total=int(row[4]),
                    bytes_received_total=int(row[5]),
                    timestamp=float(row[6]),
                )
            )
    return records


def sidecar_path(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".json")


def write_records_json(records: Sequence[TrialRecord], path: str | Path) -> None:
    payload = {"records": [r.to_dict() for r in records]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_records_json(path: str | Path) -> list[TrialRecord]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [TrialRecord.from_dict(entry) for entry in payload["records"]]


def load_records(path: str | Path) -> list[TrialRecord]:
    """Load trial records from a CSV or JSON path.

    Given a CSV whose JSON sidecar sits beside it, the sidecar wins: it
    carries the per-server detail the CSV cannot.
    """
    path = Path(path)
    if path.suffix == ".json":
        return read_records_json(path)
    sidecar = sidecar_path(path)
    if sidecar.exists():
        return read_records_json(sidecar)
    return read_records_csv(path)
