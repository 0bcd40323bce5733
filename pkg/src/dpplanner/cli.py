"""Command-line entry points: generate, plan, simulate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .accounting import AdpBudget, AlphaGrid, budget_from_adp
from .harness import (
    aggregate_runs,
    audit_max_adp,
    compare_aggregates,
    plan_round,
    run_simulation,
    to_planner_record,
)
from .io import (
    load_config,
    load_ledger_state,
    read_batch_file,
    read_run,
    save_config,
    save_ledger_state,
    write_batches,
    write_policies,
    write_run,
)
from .population import AttributeSchema, LedgerStore, RotationState, UnlockPolicy
from .presets import PROFILES
from .workload import generate, strip_predicates

log = logging.getLogger("dpplanner")


def _cmd_generate(args: argparse.Namespace) -> int:
    profile = PROFILES[args.profile]
    cfg = profile(family=args.workload, seed=args.seed)
    grid = AlphaGrid(cfg.grid_orders)
    instance = generate(
        cfg.workload, grid, assignment_horizon_t=cfg.rotation.assignment_horizon_t
    )
    out = Path(args.out)
    paths = write_batches(instance, out / "batches")
    if args.upc_variant:
        write_batches(strip_predicates(instance), out / "batches_upc", stripped=True)
    save_config(cfg, out / "config.json")
    print(f"wrote {len(paths)} round batches to {out / 'batches'}")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        profile = PROFILES[args.profile]
        cfg = profile(family=args.workload, seed=args.seed)
    overrides = {}
    if args.algorithm:
        overrides["algorithm"] = args.algorithm
    if args.accounting:
        overrides["accounting"] = args.accounting
    if args.objective:
        overrides["objective"] = args.objective
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["workload"] = replace(cfg.workload, seed=args.seed)
    if overrides:
        cfg = replace(cfg, **overrides)
    result = run_simulation(cfg)
    out = Path(args.out)
    write_run(result, out)
    save_config(cfg, out / "config.json")
    grid = AlphaGrid(cfg.grid_orders)
    by_round: dict[int, list] = {}
    for pol in result.policies:
        by_round.setdefault(pol.round_index, []).append(pol)
    for round_index in range(cfg.workload.rounds):
        write_policies(
            by_round.get(round_index, []),
            out / "policies" / f"policies_r{round_index:04d}.jsonl",
            round_index,
            grid,
        )
    save_ledger_state(result.store, out / "ledger.json", len(result.policies))
    total_u = sum(m.accepted_utility for m in result.metrics)
    total_r = sum(m.accepted_requests for m in result.metrics)
    print(
        f"simulated {cfg.workload.rounds} rounds: accepted {total_r} requests, "
        f"utility {total_u:.4f}, audit max ADP eps {result.max_adp_epsilon:.6f}"
    )
    return 0


def _cmd_plan(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    grid = AlphaGrid(cfg.grid_orders)
    budget = budget_from_adp(AdpBudget(cfg.budget_epsilon, cfg.budget_delta), grid)
    policy = UnlockPolicy(cfg.delta_slack, budget, cfg.rotation.window_k)

    ledger_path = Path(args.ledger)
    if ledger_path.exists():
        store, next_policy_id = load_ledger_state(ledger_path, policy, grid)
        store.advance()
    else:
        state = RotationState.bootstrap(cfg.rotation.window_k)
        store = LedgerStore(policy, AttributeSchema(cfg.workload.domain_size), state)
        next_policy_id = 0

    header, requests = read_batch_file(args.round_in, grid)
    records = [to_planner_record(w, grid, cfg.accounting) for w in requests]
    rng = np.random.default_rng(cfg.seed + store.state.round_index)
    outcome = plan_round(
        records, store, cfg, rng, store.state.round_index, next_policy_id
    )

    out = Path(args.out) if args.out else ledger_path.parent
    out.mkdir(parents=True, exist_ok=True)
    round_index = store.state.round_index
    write_policies(
        outcome.policies, out / f"policies_r{round_index:04d}.jsonl", round_index, grid
    )
    save_ledger_state(store, ledger_path, outcome.next_policy_id)
    summary = {
        "round": round_index,
        "offered": len(records),
        "auto_accepted": list(outcome.auto_accepted),
        "auto_rejected": list(outcome.auto_rejected),
        "solver_accepted": sorted(outcome.solver_accepted),
        "objective_value": outcome.allocation.objective_value,
        "audit_max_adp": audit_max_adp(store, cfg.budget_delta),
    }
    (out / f"allocation_r{round_index:04d}.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    print(
        f"round {round_index}: accepted "
        f"{len(outcome.auto_accepted) + len(outcome.solver_accepted)}/{len(records)}"
    )
    return 0


def _find_runs(path: Path) -> list[Path]:
    if (path / "run.json").exists():
        return [path]
    runs = sorted(p.parent for p in path.glob("*/run.json"))
    if not runs:
        raise SystemExit(f"no runs found under {path}")
    return runs


def _cmd_report(args: argparse.Namespace) -> int:
    runs = [read_run(p) for p in _find_runs(Path(args.in_dir))]
    agg = aggregate_runs(runs)
    print(f"runs: {agg['n_runs']}  rounds: {agg['n_rounds']}")
    print(f"{'metric':<24}{'cumulative mean':>18}{'sigma':>12}")
    for name, stats in agg["cumulative"].items():
        print(f"{name:<24}{stats['mean']:>18.6g}{stats['std']:>12.4g}")
    if args.compare:
        other_runs = [read_run(p) for p in _find_runs(Path(args.compare))]
        base_meta = runs[0]["meta"]["config"]
        other_meta = other_runs[0]["meta"]["config"]
        if (
            base_meta["workload"]["name"] != other_meta["workload"]["name"]
            or base_meta["workload"]["rounds"] != other_meta["workload"]["rounds"]
        ):
            raise SystemExit("comparison runs use mismatched configurations")
        other = aggregate_runs(other_runs)
        ratios = compare_aggregates(agg, other)
        print("\nratios (in / compare):")
        for name, value in ratios.items():
            print(f"{name:<24}{value:>18.4g}")
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(agg, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpplanner",
        description="Privacy-budget planning engine and workload simulator",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write per-round request batch files")
    g.add_argument("--workload", required=True, choices=("W1", "W2", "W3", "W4"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--profile", choices=("desk", "paper"), default="desk")
    g.add_argument(
        "--upc-variant", action="store_true",
        help="also write the predicate-stripped baseline variant",
    )
    g.set_defaults(func=_cmd_generate)

    s = sub.add_parser("simulate", help="run a multi-round simulation")
    s.add_argument("--config", help="simulation config file (overrides profile)")
    s.add_argument("--profile", choices=("desk", "paper"), default="desk")
    s.add_argument("--workload", choices=("W1", "W2", "W3", "W4"), default="W1")
    s.add_argument("--algorithm", choices=("fcfs", "dpf", "dpk", "exact"))
    s.add_argument("--accounting", choices=("subsampled", "upc"))
    s.add_argument("--objective", choices=("utility", "request_count"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("plan", help="single-round planning against a ledger file")
    p.add_argument("--config", required=True)
    p.add_argument("--round-in", required=True, dest="round_in")
    p.add_argument("--ledger", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_plan)

    r = sub.add_parser("report", help="aggregate run metrics, optionally compare")
    r.add_argument("--in", required=True, dest="in_dir")
    r.add_argument("--compare")
    r.add_argument("--json-out", dest="json_out")
    r.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
