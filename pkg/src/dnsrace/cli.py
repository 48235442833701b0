"""Command line front end.

One binary, subcommand style. Machine-readable results go to standard
output (or --out) as JSON or CSV; human-readable tables go to standard
error with --format table. Exit codes: 0 success, 1 usage error, 2
runtime error.

Subcommands:
  thresholds  break-even table from a plan/value data file
  verdict     judge a measured savings rate under an incentive model
  rank        probe an upstream list and order it fastest-first
  resolve     one raced lookup against a ranked list
  run         the randomized trial protocol over real UDP
  simulate    the same protocol over a simulated world
  analyze     per-k savings analysis and recommendations from records
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from .codec import DnsCodecError, QType, QuerySpec
from .economics import (
    CostRate,
    EconomicsError,
    IncentiveModel,
    ServicePlan,
    Side,
    Threshold,
    ValueEstimate,
    ValueRate,
    combined_threshold,
    load_default_rates,
    load_rate_file,
    threshold_table,
    verdict as economic_verdict,
)
from .experiment import (
    AnalysisReport,
    ExperimentConfig,
    ExperimentError,
    build_report,
    load_config,
    load_records,
    run_experiment,
    write_records_csv,
    write_records_json,
)
from .resolver import (
    DEFAULT_DEADLINE_MS,
    DEFAULT_PROBE_COUNT,
    ResolverError,
    UdpTransport,
    load_servers,
    probe_and_rank,
    resolve_raced,
)
from .simulator import SimTransport, SimulatorError, SimWorld, load_world

DEFAULT_SIM_TARGETS = tuple(f"site-{i:03d}.test" for i in range(10))
DEFAULT_PROBE_NAMES = (
    "example.com",
    "example.org",
    "example.net",
    "wikipedia.org",
    "cloudflare.com",
)

_RUNTIME_ERRORS = (
    EconomicsError,
    DnsCodecError,
    ResolverError,
    ExperimentError,
    SimulatorError,
    OSError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; argparse's default exit code is 2, which we
    # reserve for runtime failures
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


@dataclass
class RunManifest:
    """Everything needed to reproduce one run: inputs, seed, outputs."""

    command: str
    seed: int | None
    started_utc: str
    finished_utc: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "command": self.command,
            "seed": self.seed,
            "started_utc": self.started_utc,
            "finished_utc": self.finished_utc,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }

    def write(self, path: str | Path) -> None:
        for role, ref in {**self.inputs, **self.outputs}.items():
            if not Path(ref).exists():
                raise ExperimentError(f"manifest {role} path does not exist: {ref}")
        _write_atomic(Path(path), json.dumps(self.to_dict(), indent=2) + "\n")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _render_table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    cells = [[str(c) for c in row] for row in rows]
    widths = [
        max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
        for i, h in enumerate(headers)
    ]
    def line(parts: Sequence[str]) -> str:
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in cells)
    return "\n".join(out)


def _emit_json(payload: object, args: argparse.Namespace) -> None:
    text = json.dumps(payload, indent=2)
    if args.out:
        _write_atomic(Path(args.out), text + "\n")
        print(f"wrote {args.out}", file=sys.stderr)
    else:
        print(text)


def _emit_table(headers: Sequence[str], rows: Sequence[Sequence[object]], args: argparse.Namespace) -> None:
    if args.format == "table":
        print(_render_table(headers, rows), file=sys.stderr)


def _load_rates(spec: str) -> tuple[list[ServicePlan], list[ValueEstimate]]:
    if spec == "default":
        return load_default_rates()
    return load_rate_file(spec)


def _pick_plan(plans: Sequence[ServicePlan], name: str | None, side: Side) -> CostRate | None:
    if name is None:
        return None
    for plan in plans:
        if plan.name == name:
            if plan.side is not side:
                raise EconomicsError(f"plan {name!r} is {plan.side.value}-side, need {side.value}-side")
            return plan.cost
    raise EconomicsError(f"no plan named {name!r} in the plan file")


def _pick_value(values: Sequence[ValueEstimate], name: str | None, side: Side) -> ValueRate | None:
    if name is not None:
        for value in values:
            if value.name == name:
                return value.rate
        raise EconomicsError(f"no value estimate named {name!r} in the plan file")
    matching = [v for v in values if v.side is side]
    if not matching:
        return None
    if len(matching) > 1:
        raise EconomicsError(
            f"multiple {side.value}-side value estimates; pick one with "
            f"--{side.value}-value ({', '.join(v.name for v in matching)})"
        )
    return matching[0].rate


def _model_threshold(args: argparse.Namespace, plans: Sequence[ServicePlan], values: Sequence[ValueEstimate]) -> Threshold:
    return combined_threshold(
        IncentiveModel(args.model),
        p_s=_pick_plan(plans, args.server_plan, Side.SERVER),
        v_s=_pick_value(values, args.server_value, Side.SERVER),
        p_c=_pick_plan(plans, args.client_plan, Side.CLIENT),
        v_c=_pick_value(values, args.client_value, Side.CLIENT),
    )


def cmd_thresholds(args: argparse.Namespace) -> int:
    plans, values = _load_rates(args.plans)
    entries = threshold_table(plans, values)
    payload = [
        {
            "plan": e.plan.name,
            "plan_side": e.plan.side.value,
            "cost_usd_per_gb": e.plan.cost.dollars_per_gb,
            "value": e.value.name,
            "value_side": e.value.side.value,
            "value_usd_per_hr": e.value.rate.dollars_per_hour,
            "ms_per_kb": e.threshold.ms_per_kb,
            "printed": e.printed,
        }
        for e in entries
    ]
    _emit_json(payload, args)
    value_names = []
    for e in entries:
        if e.value.name not in value_names:
            value_names.append(e.value.name)
    by_plan: dict[str, dict] = {}
    for e in entries:
        row = by_plan.setdefault(
            e.plan.name, {"side": e.plan.side.value, "cost": e.plan.cost.dollars_per_gb}
        )
        row[e.value.name] = e.printed
    _emit_table(
        ["plan", "side", "$/GB"] + value_names,
        [
            [name, row["side"], f"{row['cost']:g}"] + [row.get(v, "") for v in value_names]
            for name, row in by_plan.items()
        ],
        args,
    )
    return 0


def cmd_verdict(args: argparse.Namespace) -> int:
    plans, values = _load_rates(args.plans)
    model = IncentiveModel(args.model)
    decision = economic_verdict(
        Threshold(args.ell),
        model,
        p_s=_pick_plan(plans, args.server_plan, Side.SERVER),
        v_s=_pick_value(values, args.server_value, Side.SERVER),
        p_c=_pick_plan(plans, args.client_plan, Side.CLIENT),
        v_c=_pick_value(values, args.client_value, Side.CLIENT),
    )
    payload = {
        "measured_ms_per_kb": args.ell,
        "model": model.value,
        "threshold_ms_per_kb": decision.threshold.ms_per_kb,
        "margin_ms_per_kb": decision.margin_ms_per_kb,
        "cost_effective": decision.cost_effective,
    }
    _emit_json(payload, args)
    _emit_table(["field", "value"], list(payload.items()), args)
    return 0


def _read_names_file(path: str) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names = tuple(line.strip() for line in lines if line.strip() and not line.startswith("#"))
    if not names:
        raise ExperimentError(f"{path}: no names found")
    return names


def cmd_rank(args: argparse.Namespace) -> int:
    servers = load_servers(args.servers).servers
    names = _read_names_file(args.names) if args.names else DEFAULT_PROBE_NAMES
    ranked = probe_and_rank(
        servers,
        names,
        probes_per_server=args.probes,
        probe_timeout_ms=args.timeout_ms,
        rng=random.Random(args.seed),
    )
    _emit_json(ranked.to_dict(), args)
    _emit_table(
        ["address", "port", "label", "probe_mean_ms"],
        [
            [s.address, s.port, s.label, "unreachable" if m is None else f"{m:.2f}"]
            for s, m in zip(
                ranked.servers,
                [None if m == float("inf") else m for m in ranked.probe_mean_ms],
            )
        ],
        args,
    )
    return 0


def cmd_resolve(args: argparse.Namespace) -> int:
    ranked = load_servers(args.servers)
    rng = random.Random(args.seed)
    query = QuerySpec(args.name, qtype=QType[args.type], id=rng.getrandbits(16))
    result = resolve_raced(query, ranked, args.k, deadline_ms=args.deadline_ms)
    _emit_json(result.to_dict(), args)
    return 0


def _write_run_outputs(
    records: list, args: argparse.Namespace, command: str, seed: int | None,
    inputs: dict[str, str], started: str,
) -> None:
    if not args.out:
        # no output directory: emit the CSV on stdout and skip the manifest
        write_records_csv(records, sys.stdout)
        return
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "records.csv"
    json_path = out_dir / "records.json"
    write_records_csv(records, csv_path)
    write_records_json(records, json_path)
    manifest = RunManifest(
        command=command,
        seed=seed,
        started_utc=started,
        finished_utc=_utc_now(),
        inputs=inputs,
        outputs={"records_csv": str(csv_path), "records_json": str(json_path)},
    )
    manifest.write(out_dir / "manifest.json")
    print(f"wrote {csv_path}, {json_path}, {out_dir / 'manifest.json'}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = ExperimentConfig(cfg.targets, cfg.trials, cfg.k_max, cfg.timeout_ms, args.seed)
    server_list = load_servers(args.servers)
    transport = UdpTransport()
    started = _utc_now()
    if server_list.probe_mean_ms is None:
        print(f"ranking {len(server_list)} servers", file=sys.stderr)
        ranked = probe_and_rank(
            server_list.servers,
            cfg.targets,
            transport=transport,
            rng=random.Random(cfg.seed),
        )
    else:
        ranked = server_list
    records = run_experiment(cfg, ranked, transport)
    _write_run_outputs(
        records, args, "run", cfg.seed,
        {"config": str(args.config), "servers": str(args.servers)}, started,
    )
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    world = load_world(args.world)
    targets = _read_names_file(args.targets) if args.targets else DEFAULT_SIM_TARGETS
    seed = args.seed if args.seed is not None else 0
    cfg = ExperimentConfig(
        targets=targets,
        trials=args.trials,
        k_max=args.k_max,
        timeout_ms=args.timeout_ms,
        seed=seed,
    )
    started = _utc_now()
    transport = SimTransport(world)
    ranked = probe_and_rank(
        transport.servers, cfg.targets, transport=transport, rng=random.Random(seed)
    )
    records = run_experiment(cfg, ranked, transport)
    _write_run_outputs(records, args, "simulate", seed, {"world": str(args.world)}, started)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    records = load_records(args.records)
    thresholds: dict[str, float] = {}
    if args.threshold is not None:
        thresholds["threshold"] = args.threshold
    if args.model is not None:
        plans, values = _load_rates(args.plans)
        thresholds[args.model] = _model_threshold(args, plans, values).ms_per_kb
    report = build_report(records, thresholds)
    _emit_json(report.to_dict(), args)
    rows = []
    for row in report.rows:
        norm = row.normalized_savings_ms_per_kb or {}
        incr = row.incremental_savings_ms_per_kb or {}
        rows.append(
            [
                row.k,
                row.n,
                f"{row.mean_ms:.2f}",
                f"{row.p95_ms:.2f}",
                f"{row.mean_extra_kb:.4f}",
                f"{row.improvement_pct['mean']:.1f}%",
                f"{norm.get('mean', float('nan')):.2f}" if norm else "",
                f"{incr.get('mean', float('nan')):.2f}" if incr else "",
            ]
        )
    _emit_table(
        ["k", "n", "mean_ms", "p95_ms", "extra_kb", "improve(mean)", "norm(mean)", "incr(mean)"],
        rows,
        args,
    )
    return 0


def end_to_end_pipeline(
    world: SimWorld | str | Path,
    trials: int,
    k_max: int,
    thresholds: Mapping[str, Threshold | float] | None = None,
    seed: int = 0,
    targets: Sequence[str] | None = None,
    timeout_ms: float = 30000.0,
    probes_per_server: int = DEFAULT_PROBE_COUNT,
) -> tuple[AnalysisReport, dict[str, dict]]:
    """Simulate, analyze, and decide in one call.

    Returns the analysis report plus one decision per threshold entry:
    the recommended k and whether racing at all (k >= 2) pays.
    """
    if not isinstance(world, SimWorld):
        world = load_world(world)
    names = tuple(targets) if targets else DEFAULT_SIM_TARGETS
    transport = SimTransport(world)
    ranked = probe_and_rank(
        transport.servers,
        names,
        probes_per_server=probes_per_server,
        transport=transport,
        rng=random.Random(seed),
    )
    cfg = ExperimentConfig(
        targets=names, trials=trials, k_max=k_max, timeout_ms=timeout_ms, seed=seed
    )
    records = run_experiment(cfg, ranked, transport)
    report = build_report(records, thresholds or {})
    decisions = {
        name: {
            "threshold_ms_per_kb": cutoff,
            "recommended_k": report.recommended_k[name],
            "cost_effective": report.recommended_k[name] >= 2,
        }
        for name, cutoff in report.thresholds_ms_per_kb.items()
    }
    return report, decisions


def build_parser() -> _Parser:
    parser = _Parser(prog="dnsrace", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomized choices")
    common.add_argument("--out", default=None, help="output file (or directory for run/simulate)")
    common.add_argument(
        "--format", choices=("json", "table"), default="json",
        help="also render a human table on stderr",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("thresholds", parents=[common], help="break-even table from a plan/value file")
    p.add_argument("--plans", default="default", help="plan/value JSON file, or 'default'")
    p.set_defaults(func=cmd_thresholds)

    p = sub.add_parser("verdict", parents=[common], help="judge a measured savings rate")
    p.add_argument("--ell", type=float, required=True, help="measured savings in ms per KB of extra traffic")
    p.add_argument("--model", required=True, choices=[m.value for m in IncentiveModel])
    p.add_argument("--server-plan", default=None, help="server-side plan name")
    p.add_argument("--client-plan", default=None, help="client-side plan name")
    p.add_argument("--server-value", default=None, help="server-side value estimate name")
    p.add_argument("--client-value", default=None, help="client-side value estimate name")
    p.add_argument("--plans", default="default", help="plan/value JSON file, or 'default'")
    p.set_defaults(func=cmd_verdict)

    p = sub.add_parser("rank", parents=[common], help="probe servers and order them fastest-first")
    p.add_argument("--servers", required=True, help="JSON server list file")
    p.add_argument("--probes", type=int, default=DEFAULT_PROBE_COUNT, help="probes per server")
    p.add_argument("--names", default=None, help="file of probe names, one per line")
    p.add_argument("--timeout-ms", type=float, default=2000.0, help="per-probe timeout")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("resolve", parents=[common], help="one raced lookup")
    p.add_argument("name", help="name to resolve")
    p.add_argument("-k", type=int, default=1, help="how many ranked servers to race")
    p.add_argument("--servers", required=True, help="JSON server list file")
    p.add_argument("--deadline-ms", type=float, default=DEFAULT_DEADLINE_MS)
    p.add_argument("--type", choices=("A", "AAAA"), default="A")
    p.set_defaults(func=cmd_resolve)

    p = sub.add_parser("run", parents=[common], help="randomized trials over real UDP")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--servers", required=True, help="JSON server list file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", parents=[common], help="randomized trials over a simulated world")
    p.add_argument("--world", required=True, help="simulated world JSON file")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--timeout-ms", type=float, default=30000.0)
    p.add_argument("--targets", default=None, help="file of target names, one per line")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="savings analysis from trial records")
    p.add_argument("--records", required=True, help="records CSV (JSON sidecar used when present)")
    p.add_argument("--threshold", type=float, default=None, help="break-even threshold in ms/KB")
    p.add_argument("--model", default=None, choices=[m.value for m in IncentiveModel])
    p.add_argument("--server-plan", default=None)
    p.add_argument("--client-plan", default=None)
    p.add_argument("--server-value", default=None)
    p.add_argument("--client-value", default=None)
    p.add_argument("--plans", default="default")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
