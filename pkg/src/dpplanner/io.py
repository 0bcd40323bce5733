"""Versioned file formats: config, request batches, policies, runs, ledgers.

Every file carries a schema tag so downstream consumers can reject
incompatible versions.  JSON writing is key-sorted for byte-stable output.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .accounting import AlphaGrid, Mechanism, RdpVector
from .allocation import PolicyRecord
from .population import (
    AttributeSchema,
    GroupState,
    LedgerStore,
    RotationConfig,
    RotationState,
    UnlockPolicy,
    _BlockState,
)
from .presets import SimulationConfig
from .segmentation import CellInterval
from .workload import (
    RequestFamily,
    WorkloadConfig,
    WorkloadInstance,
    WorkloadRequest,
)

__all__ = [
    "SCHEMA_CONFIG",
    "SCHEMA_BATCH",
    "SCHEMA_POLICY",
    "SCHEMA_RUN",
    "SCHEMA_LEDGER",
    "save_config",
    "load_config",
    "write_batches",
    "read_batch_file",
    "write_policies",
    "write_run",
    "read_run",
    "save_ledger_state",
    "load_ledger_state",
]

SCHEMA_CONFIG = "dpplanner-config/1"
SCHEMA_BATCH = "dpplanner-batch/1"
SCHEMA_POLICY = "dpplanner-policy/1"
SCHEMA_RUN = "dpplanner-run/1"
SCHEMA_LEDGER = "dpplanner-ledger/1"


def _dump(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _check_schema(obj: dict, expected: str, path) -> None:
    if obj.get("schema") != expected:
        raise ValueError(f"{path}: expected schema {expected}, got {obj.get('schema')!r}")


# --- simulation config -------------------------------------------------------


def config_to_dict(cfg: SimulationConfig) -> dict:
    wl = cfg.workload
    return {
        "schema": SCHEMA_CONFIG,
        "workload": {
            "name": wl.name,
            "seed": wl.seed,
            "rounds": wl.rounds,
            "round_duration_minutes": wl.round_duration_minutes,
            "request_interarrival_minutes": wl.request_interarrival_minutes,
            "user_interarrival_seconds": wl.user_interarrival_seconds,
            "domain_size": wl.domain_size,
            "fraction_choices": [list(fc) for fc in wl.fraction_choices],
            "tier_mix": [list(tm) for tm in wl.tier_mix],
            "families": [
                {
                    "mechanism": f.mechanism.value,
                    "selection_beta": list(f.selection_beta),
                    "weight": f.weight,
                    "repetitions": f.repetitions,
                }
                for f in wl.families
            ],
        },
        "rotation": {
            "window_k": cfg.rotation.window_k,
            "assignment_horizon_t": cfg.rotation.assignment_horizon_t,
        },
        "unlock": {"delta_slack": cfg.delta_slack},
        "budget": {"epsilon": cfg.budget_epsilon, "delta": cfg.budget_delta},
        "grid": list(cfg.grid_orders),
        "algorithm": cfg.algorithm,
        "accounting": cfg.accounting,
        "objective": cfg.objective,
        "solver_time_limit": cfg.solver_time_limit,
        "seed": cfg.seed,
        "profile": cfg.profile,
    }


def config_from_dict(data: dict) -> SimulationConfig:
    wl = data["workload"]
    workload = WorkloadConfig(
        families=tuple(
            RequestFamily(
                mechanism=Mechanism(f["mechanism"]),
                selection_beta=tuple(f["selection_beta"]),
                weight=f.get("weight", 1.0),
                repetitions=f.get("repetitions", 1),
            )
            for f in wl["families"]
        ),
        rounds=wl["rounds"],
        round_duration_minutes=wl["round_duration_minutes"],
        request_interarrival_minutes=wl["request_interarrival_minutes"],
        user_interarrival_seconds=wl["user_interarrival_seconds"],
        domain_size=wl["domain_size"],
        fraction_choices=tuple((v, p) for v, p in wl["fraction_choices"]),
        tier_mix=tuple((t, p) for t, p in wl["tier_mix"]),
        seed=wl["seed"],
        name=wl["name"],
    )
    return SimulationConfig(
        workload=workload,
        rotation=RotationConfig(
            window_k=data["rotation"]["window_k"],
            assignment_horizon_t=data["rotation"]["assignment_horizon_t"],
        ),
        delta_slack=data["unlock"]["delta_slack"],
        grid_orders=tuple(data["grid"]),
        budget_epsilon=data["budget"]["epsilon"],
        budget_delta=data["budget"]["delta"],
        algorithm=data["algorithm"],
        accounting=data["accounting"],
        objective=data["objective"],
        solver_time_limit=data.get("solver_time_limit", 60.0),
        seed=data.get("seed", 0),
        profile=data.get("profile", "custom"),
    )


def save_config(cfg: SimulationConfig, path) -> None:
    _dump(config_to_dict(cfg), Path(path))


def load_config(path) -> SimulationConfig:
    data = json.loads(Path(path).read_text())
    _check_schema(data, SCHEMA_CONFIG, path)
    return config_from_dict(data)


# --- request batches ---------------------------------------------------------


def _predicate_to_json(predicate) -> dict | list | None:
    if predicate is None:
        return None
    if isinstance(predicate, CellInterval):
        return {"start": predicate.start, "length": predicate.length}
    return {"cells": sorted(predicate)}


def _predicate_from_json(data, domain_size: int) -> CellInterval | frozenset:
    if data is None:
        return CellInterval(0, domain_size)
    if "cells" in data:
        return frozenset(data["cells"])
    return CellInterval(data["start"], data["length"])


def write_batches(instance: WorkloadInstance, out_dir, stripped: bool = False) -> list:
    """One JSONL file per round; ``stripped`` removes attribute predicates
    (the baseline-adapter variant)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for round_index, batch in enumerate(instance.batches):
        path = out / f"batch_r{round_index:04d}.jsonl"
        with path.open("w") as fh:
            header = {
                "schema": SCHEMA_BATCH,
                "round": round_index,
                "count": len(batch),
                "domain_size": instance.config.domain_size,
                "stripped": stripped,
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for r in batch:
                rec = {
                    "id": r.request_id,
                    "arrival_minutes": r.arrival_minutes,
                    "predicate": None if stripped else _predicate_to_json(r.predicate),
                    "fraction": r.sample_fraction,
                    "mechanism": r.mechanism.value,
                    "tier": r.tier,
                    "target_epsilon": r.target_epsilon,
                    "target_delta": r.target_delta,
                    "repetitions": r.repetitions,
                    "rdp_cost": [None if not math.isfinite(x) else x for x in r.base_cost.eps],
                    "weight": r.weight,
                    "utility": r.utility,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        paths.append(path)
    return paths


def read_batch_file(path, grid: AlphaGrid) -> tuple[dict, list]:
    """Header dict plus the round's requests."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty batch file")
    header = json.loads(lines[0])
    _check_schema(header, SCHEMA_BATCH, path)
    domain = header["domain_size"]
    requests = []
    for line in lines[1:]:
        rec = json.loads(line)
        cost = np.array(
            [math.inf if x is None else x for x in rec["rdp_cost"]], dtype=np.float64
        )
        requests.append(
            WorkloadRequest(
                request_id=rec["id"],
                round_index=header["round"],
                arrival_minutes=rec["arrival_minutes"],
                predicate=_predicate_from_json(rec["predicate"], domain),
                sample_fraction=rec["fraction"],
                mechanism=Mechanism(rec["mechanism"]),
                tier=rec["tier"],
                target_epsilon=rec["target_epsilon"],
                target_delta=rec["target_delta"],
                repetitions=rec["repetitions"],
                base_cost=RdpVector(grid, cost),
                weight=rec["weight"],
                utility=rec["utility"],
            )
        )
    return header, requests


# --- policy documents --------------------------------------------------------


def write_policies(policies: Sequence[PolicyRecord], path, round_index: int, grid: AlphaGrid) -> None:
    """Access-policy records mapping accepted requests onto subjects,
    resources (groups + predicate), and granted budget actions."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w") as fh:
        header = {"schema": SCHEMA_POLICY, "round": round_index, "count": len(policies)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for pol in policies:
            rec = {
                "policy_id": pol.policy_id,
                "round": pol.round_index,
                "subject": {"application_id": pol.application_id},
                "resource": {
                    "group_ids": list(pol.group_ids),
                    "predicate": _predicate_to_json(pol.predicate),
                },
                "action": {
                    "rdp_eps": [
                        None if not math.isfinite(x) else x for x in pol.granted.eps
                    ],
                    "alpha_orders": list(grid.orders),
                    "delta": pol.delta_reference,
                    "sample_fraction": pol.sample_fraction,
                },
                "mechanism": pol.mechanism,
                "tier": pol.tier,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --- run outputs -------------------------------------------------------------

_TIERS = ("mouse", "hare", "elephant")


def write_run(result, out_dir) -> Path:
    """metrics.csv plus run.json (config echo, audit, totals)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_orders = len(result.config.grid_orders)
    columns = [
        "round", "offered_requests", "accepted_requests",
        "offered_utility", "accepted_utility",
        "auto_accepted", "auto_rejected", "residual_size",
        "objective_value", "exact_objective", "solver_proved",
    ]
    columns += [f"offered_{t}" for t in _TIERS]
    columns += [f"accepted_{t}" for t in _TIERS]
    columns += [f"util_{i}" for i in range(n_orders)]
    columns += ["wall_ms"]
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for m in result.metrics:
            row = [
                m.round_index, m.offered_requests, m.accepted_requests,
                f"{m.offered_utility:.12g}", f"{m.accepted_utility:.12g}",
                m.auto_accepted, m.auto_rejected, m.residual_size,
                f"{m.objective_value:.12g}",
                "" if m.exact_objective is None else f"{m.exact_objective:.12g}",
                "" if m.solver_proved is None else int(m.solver_proved),
            ]
            row += [m.offered_by_tier.get(t, 0) for t in _TIERS]
            row += [m.accepted_by_tier.get(t, 0) for t in _TIERS]
            row += [f"{u:.6g}" for u in m.order_utilization]
            row += [f"{m.wall_ms:.3f}"]
            writer.writerow(row)
    meta = {
        "schema": SCHEMA_RUN,
        "config": config_to_dict(result.config),
        "max_adp_epsilon": result.max_adp_epsilon,
        "totals": {
            "offered_requests": sum(m.offered_requests for m in result.metrics),
            "accepted_requests": sum(m.accepted_requests for m in result.metrics),
            "offered_utility": sum(m.offered_utility for m in result.metrics),
            "accepted_utility": sum(m.accepted_utility for m in result.metrics),
        },
        "policies": len(result.policies),
    }
    _dump(meta, out / "run.json")
    return out


def read_run(run_dir) -> dict:
    """{"meta": run.json contents, "rows": per-round dicts with numerics}."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    _check_schema(meta, SCHEMA_RUN, run_dir / "run.json")
    rows = []
    with (run_dir / "metrics.csv").open() as fh:
        for row in csv.DictReader(fh):
            parsed: dict = {}
            for key, value in row.items():
                if value == "":
                    parsed[key] = None
                else:
                    try:
                        parsed[key] = float(value) if "." in value or "e" in value or "inf" in value else int(value)
                    except ValueError:
                        parsed[key] = value
            rows.append(parsed)
    return {"meta": meta, "rows": rows}


# --- ledger audit trail ------------------------------------------------------


def _array_to_json(arr: np.ndarray) -> list:
    if np.isfinite(arr).all():
        return arr.tolist()
    out: list = []
    for x in arr:
        if math.isnan(x):
            out.append("nan")
        elif math.isinf(x):
            out.append(None)
        else:
            out.append(float(x))
    return out


def _vector_to_json(vec: RdpVector) -> list:
    return _array_to_json(np.asarray(vec.eps))


def _vector_from_json(data, grid: AlphaGrid) -> RdpVector:
    values = []
    for x in data:
        if x is None:
            values.append(math.inf)
        elif x == "nan":
            values.append(math.nan)
        else:
            values.append(float(x))
    return RdpVector(grid, np.array(values))


def save_ledger_state(store: LedgerStore, path, next_policy_id: int = 0) -> None:
    """Round-indexed consumption history for audit and single-round planning."""
    blocks = []
    for (gid, cell), st in sorted(store._blocks.items()):
        blocks.append(
            {
                "group_id": gid,
                "cell": cell,
                "consumed": _array_to_json(st.consumed),
                "history": [
                    {"round": rnd, "charge": _array_to_json(charge)}
                    for rnd, charge in st.history
                ],
            }
        )
    data = {
        "schema": SCHEMA_LEDGER,
        "round_index": store.state.round_index,
        "next_policy_id": next_policy_id,
        "domain_size": store.schema.domain_size,
        "groups": [
            {"group_id": g.group_id, "rounds_active": g.rounds_active, "population": g.population}
            for g in store.state.active
        ],
        "retired": list(store.state.retired),
        "blocks": blocks,
    }
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w") as fh:
        json.dump(data, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_ledger_state(path, policy: UnlockPolicy, grid: AlphaGrid) -> tuple[LedgerStore, int]:
    data = json.loads(Path(path).read_text())
    _check_schema(data, SCHEMA_LEDGER, path)
    state = RotationState(
        round_index=data["round_index"],
        active=tuple(
            GroupState(g["group_id"], g["rounds_active"], g.get("population", 0))
            for g in data["groups"]
        ),
        retired=tuple(data["retired"]),
    )
    store = LedgerStore(policy, AttributeSchema(data["domain_size"]), state)
    for block in data["blocks"]:
        gid, cell = block["group_id"], block["cell"]
        st = _BlockState(len(grid))
        st.consumed = np.asarray(_vector_from_json(block["consumed"], grid).eps).copy()
        st.history = [
            (h["round"], np.asarray(_vector_from_json(h["charge"], grid).eps).copy())
            for h in block["history"]
        ]
        store._blocks[(gid, cell)] = st
    return store, data.get("next_policy_id", 0)
