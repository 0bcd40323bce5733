"""Simulation configuration and the desk / full-scale run profiles."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .accounting import ALPHA_ORDERS_DEFAULT, ParameterError
from .population import RotationConfig
from .workload import WorkloadConfig, build_workload

__all__ = ["SimulationConfig", "desk_config", "paper_config", "PROFILES"]

ALGORITHMS = ("fcfs", "dpf", "dpk", "exact")
ACCOUNTING_MODES = ("subsampled", "upc")
OBJECTIVES = ("utility", "request_count")


@dataclass(frozen=True)
class SimulationConfig:
    workload: WorkloadConfig
    rotation: RotationConfig = RotationConfig(window_k=12, assignment_horizon_t=104)
    delta_slack: float = 0.4
    grid_orders: tuple[float, ...] = ALPHA_ORDERS_DEFAULT
    budget_epsilon: float = 3.0
    budget_delta: float = 1e-7
    algorithm: str = "dpk"
    accounting: str = "subsampled"
    objective: str = "utility"
    solver_time_limit: float = 60.0
    compare_exact: bool = False
    seed: int = 0
    profile: str = "custom"

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ParameterError(f"algorithm must be one of {ALGORITHMS}")
        if self.accounting not in ACCOUNTING_MODES:
            raise ParameterError(f"accounting must be one of {ACCOUNTING_MODES}")
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}")
        if self.budget_epsilon <= 0 or not 0 < self.budget_delta < 1:
            raise ParameterError("invalid global budget")


def desk_config(
    family: str = "W1",
    seed: int = 0,
    algorithm: str = "dpk",
    accounting: str = "subsampled",
    objective: str = "utility",
    delta_slack: float = 0.4,
    rounds: int = 10,
    requests_per_round: float = 50.0,
    fraction_choices: tuple[tuple[float, float], ...] | None = None,
    compare_exact: bool = False,
) -> SimulationConfig:
    """Small profile every acceptance check runs on: domain 2048, ~50
    requests per round, 10 rounds, otherwise full-scale parameters."""
    wl = build_workload(family, seed=seed)
    wl = replace(
        wl,
        rounds=rounds,
        domain_size=2048,
        request_interarrival_minutes=wl.round_duration_minutes / requests_per_round,
        fraction_choices=fraction_choices or wl.fraction_choices,
    )
    return SimulationConfig(
        workload=wl,
        rotation=RotationConfig(window_k=12, assignment_horizon_t=26),
        delta_slack=delta_slack,
        algorithm=algorithm,
        accounting=accounting,
        objective=objective,
        solver_time_limit=10.0,
        compare_exact=compare_exact,
        seed=seed,
        profile="desk",
    )


def paper_config(
    family: str = "W1",
    seed: int = 0,
    algorithm: str = "dpk",
    accounting: str = "subsampled",
    objective: str = "utility",
    delta_slack: float = 0.4,
) -> SimulationConfig:
    """Full-scale profile: 40 weekly rounds, domain 204800, K=12, T=104,
    budget (3, 1e-7)."""
    return SimulationConfig(
        workload=build_workload(family, seed=seed),
        rotation=RotationConfig(window_k=12, assignment_horizon_t=104),
        delta_slack=delta_slack,
        algorithm=algorithm,
        accounting=accounting,
        objective=objective,
        seed=seed,
        profile="paper",
    )


PROFILES = {"desk": desk_config, "paper": paper_config}
