"""Break-even analysis for latency-for-bandwidth tradeoffs.

A technique that spends extra traffic to save latency pays off when the
savings per kilobyte of added traffic clear a threshold set by the price
of traffic and the dollar value of time. This module holds the rate
types, the unit conventions, the threshold computations for the four
incentive models, and the plan/value data file format.

Unit conventions (fixed):
  - binary prefixes: 1 GB = 2**30 bytes, 1 KB = 2**10 bytes
  - 1 hour = 3.6e6 ms
  - canonical internal units are $/byte and $/ms; $/GB and $/hr are
    display-layer conversions only
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path

BYTES_PER_KB = 1024.0
BYTES_PER_GB = 1024.0**3
MS_PER_HOUR = 3.6e6

DEFAULT_PLANS_RESOURCE = "plans-2014-08.json"


class EconomicsError(ValueError):
    """Invalid rate, plan, or threshold input."""


class UndefinedBreakEven(EconomicsError):
    """A required value-of-time rate is zero or missing, so no finite threshold exists."""


class Side(str, enum.Enum):
    SERVER = "server"
    CLIENT = "client"


class IncentiveModel(enum.Enum):
    """Whose cost/benefit books must each balance for the technique to be adopted."""

    SELFISH_CLIENT = "selfish-client"
    SELFISH_SERVER = "selfish-server"
    BOTH_SELFISH = "both-selfish"
    SERVER_VALUES_CLIENT = "server-values-client"


def _check_rate(value: float, what: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise EconomicsError(f"{what} must be finite and >= 0, got {value!r}")
    return value


@dataclass(frozen=True)
class CostRate:
    """Price of pushing one extra byte of traffic, in dollars."""

    dollars_per_byte: float

    def __post_init__(self) -> None:
        _check_rate(self.dollars_per_byte, "cost rate")

    @classmethod
    def per_gb(cls, dollars: float) -> CostRate:
        return cls(_check_rate(dollars, "cost rate") / BYTES_PER_GB)

    @classmethod
    def per_kb(cls, dollars: float) -> CostRate:
        return cls(_check_rate(dollars, "cost rate") / BYTES_PER_KB)

    @property
    def dollars_per_gb(self) -> float:
        return self.dollars_per_byte * BYTES_PER_GB

    @property
    def dollars_per_kb(self) -> float:
        return self.dollars_per_byte * BYTES_PER_KB


@dataclass(frozen=True)
class ValueRate:
    """Dollar value of one millisecond of latency saved."""

    dollars_per_ms: float

    def __post_init__(self) -> None:
        _check_rate(self.dollars_per_ms, "value rate")

    @classmethod
    def per_hour(cls, dollars: float) -> ValueRate:
        return cls(_check_rate(dollars, "value rate") / MS_PER_HOUR)

    @property
    def dollars_per_hour(self) -> float:
        return self.dollars_per_ms * MS_PER_HOUR


@dataclass(frozen=True)
class Threshold:
    """Break-even latency savings per KB of extra traffic, in ms/KB."""

    ms_per_kb: float

    def __post_init__(self) -> None:
        _check_rate(self.ms_per_kb, "threshold")


@dataclass(frozen=True)
class ServicePlan:
    """A priced source of extra-traffic cost on one side of the connection."""

    name: str
    side: Side
    cost: CostRate
    source_note: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise EconomicsError("plan name must be nonempty")


@dataclass(frozen=True)
class ValueEstimate:
    """An estimate of what one side earns per unit of latency saved."""

    name: str
    side: Side
    rate: ValueRate
    provenance: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise EconomicsError("value estimate name must be nonempty")


def break_even(p: CostRate, v: ValueRate) -> Threshold:
    """Latency savings per KB at which the traffic cost p is exactly repaid at value v.

    With p in $/GB and v in $/hr the result in ms/KB is p/v times
    3.6e6 / 2**20 (~3.433228).
    """
    if v.dollars_per_ms <= 0:
        raise UndefinedBreakEven("value rate is zero: break-even savings are undefined")
    return Threshold(p.dollars_per_byte * BYTES_PER_KB / v.dollars_per_ms)


def _require(model: IncentiveModel, **rates: object) -> None:
    for name, rate in rates.items():
        if rate is None:
            raise UndefinedBreakEven(f"{model.value} requires {name}, which is missing")


def combined_threshold(
    model: IncentiveModel,
    p_s: CostRate | None = None,
    v_s: ValueRate | None = None,
    p_c: CostRate | None = None,
    v_c: ValueRate | None = None,
) -> Threshold:
    """Break-even threshold under the given incentive model.

    selfish-client:        p_c / v_c
    selfish-server:        p_s / v_s
    both-selfish:          max(p_s / v_s, p_c / v_c)
    server-values-client:  max(p_s / (v_s + v_c), p_c / v_c)
    """
    if model is IncentiveModel.SELFISH_CLIENT:
        _require(model, p_c=p_c, v_c=v_c)
        return break_even(p_c, v_c)
    if model is IncentiveModel.SELFISH_SERVER:
        _require(model, p_s=p_s, v_s=v_s)
        return break_even(p_s, v_s)
    if model is IncentiveModel.BOTH_SELFISH:
        _require(model, p_s=p_s, v_s=v_s, p_c=p_c, v_c=v_c)
        return Threshold(max(break_even(p_s, v_s).ms_per_kb, break_even(p_c, v_c).ms_per_kb))
    if model is IncentiveModel.SERVER_VALUES_CLIENT:
        _require(model, p_s=p_s, v_s=v_s, p_c=p_c, v_c=v_c)
        if v_s.dollars_per_ms + v_c.dollars_per_ms <= 0:
            raise UndefinedBreakEven(f"{model.value}: v_s + v_c is zero")
        server_part = p_s.dollars_per_byte * BYTES_PER_KB / (v_s.dollars_per_ms + v_c.dollars_per_ms)
        return Threshold(max(server_part, break_even(p_c, v_c).ms_per_kb))
    raise EconomicsError(f"unknown incentive model {model!r}")


def value_from_revenue_study(
    revenue_per_query: float, relative_drop: float, delay_ms: float
) -> ValueRate:
    """Value-of-time rate implied by a study that added delay and measured lost queries.

    If adding delay_ms to each query cut query volume by relative_drop,
    each millisecond saved is worth revenue_per_query * relative_drop /
    delay_ms.
    """
    if delay_ms <= 0:
        raise EconomicsError(f"delay must be positive, got {delay_ms!r}")
    if not 0 <= relative_drop <= 1:
        raise EconomicsError(f"relative drop must be in [0, 1], got {relative_drop!r}")
    return ValueRate(_check_rate(revenue_per_query, "revenue") * relative_drop / delay_ms)


def format_threshold(ms_per_kb: float) -> str:
    """Render a threshold the way the reference cost table prints it.

    Half-up to 2 decimals at or above 0.10 ms/KB, 3 decimals below.
    """
    places = "0.01" if ms_per_kb >= 0.10 else "0.001"
    return str(Decimal(repr(ms_per_kb)).quantize(Decimal(places), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ThresholdEntry:
    plan: ServicePlan
    value: ValueEstimate
    threshold: Threshold

    @property
    def printed(self) -> str:
        return format_threshold(self.threshold.ms_per_kb)


def threshold_table(
    plans: list[ServicePlan], values: list[ValueEstimate]
) -> list[ThresholdEntry]:
    """Cross every plan with every value estimate: one break-even entry per pair.

    Rows are ordered server-side plans first, then client-side, by
    descending cost within each side (ties keep input order); value
    columns keep input order.
    """
    if not plans or not values:
        raise EconomicsError("need at least one plan and one value estimate")
    ordered: list[ServicePlan] = []
    for side in (Side.SERVER, Side.CLIENT):
        group = [p for p in plans if p.side is side]
        group.sort(key=lambda p: -p.cost.dollars_per_byte)
        ordered.extend(group)
    return [
        ThresholdEntry(plan, value, break_even(plan.cost, value.rate))
        for plan in ordered
        for value in values
    ]


@dataclass(frozen=True)
class Verdict:
    """Outcome of comparing measured savings against a break-even threshold."""

    cost_effective: bool
    threshold: Threshold
    margin_ms_per_kb: float


def verdict(
    measured: Threshold,
    model: IncentiveModel,
    p_s: CostRate | None = None,
    v_s: ValueRate | None = None,
    p_c: CostRate | None = None,
    v_c: ValueRate | None = None,
) -> Verdict:
    """Is a measured savings rate enough to pay for its traffic under this model?

    Break-even counts as cost-effective (measured >= threshold).
    """
    threshold = combined_threshold(model, p_s=p_s, v_s=v_s, p_c=p_c, v_c=v_c)
    return Verdict(
        cost_effective=measured.ms_per_kb >= threshold.ms_per_kb,
        threshold=threshold,
        margin_ms_per_kb=measured.ms_per_kb - threshold.ms_per_kb,
    )


_COST_UNITS = {"USD_per_GB": CostRate.per_gb, "USD_per_KB": CostRate.per_kb}
_VALUE_UNITS = {"USD_per_hr": ValueRate.per_hour, "USD_per_ms": ValueRate}


def parse_rate_entries(entries: list[dict]) -> tuple[list[ServicePlan], list[ValueEstimate]]:
    """Split a plan/value data file's entries into plans and value estimates by unit."""
    plans: list[ServicePlan] = []
    values: list[ValueEstimate] = []
    for entry in entries:
        name = entry["name"]
        side = Side(entry["side"])
        unit = entry["unit"]
        amount = entry["amount"]
        note = entry.get("note", "")
        if unit in _COST_UNITS:
            plans.append(ServicePlan(name, side, _COST_UNITS[unit](amount), note))
        elif unit in _VALUE_UNITS:
            values.append(ValueEstimate(name, side, _VALUE_UNITS[unit](amount), note))
        else:
            raise EconomicsError(f"entry {name!r} has unknown unit {unit!r}")
    return plans, values


def load_rate_file(path: str | Path) -> tuple[list[ServicePlan], list[ValueEstimate]]:
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise EconomicsError(f"{path}: plan/value file must be a JSON array")
    return parse_rate_entries(entries)


def load_default_rates() -> tuple[list[ServicePlan], list[ValueEstimate]]:
    """The shipped August-2014 plan and value-of-time dataset."""
    data = resources.files("dnsrace.data").joinpath(DEFAULT_PLANS_RESOURCE).read_text("utf-8")
    return parse_rate_entries(json.loads(data))
