"""Mixed-DP request stream generator.

Requests arrive as a Poisson process and carry an attribute-range selection,
a sampled-population fraction, a mechanism drawn from the workload's family
mix, and a cost tier (mice / hares / elephants).  Utilities follow a
Cobb-Douglas production function of privacy cost and data amount, normalised
to sum to one per generated stream so different workloads are comparable.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np

from .accounting import (
    AlphaGrid,
    GAUSSIAN_FAMILY,
    Mechanism,
    MechanismSpec,
    ParameterError,
    RdpVector,
    mechanism_rdp,
)
from .segmentation import CellInterval

__all__ = [
    "MECHANISM_DELTA",
    "TIERS",
    "TIER_EPSILON",
    "RequestFamily",
    "WorkloadConfig",
    "UtilityModel",
    "WorkloadRequest",
    "WorkloadInstance",
    "build_workload",
    "sample_selection",
    "assign_utility",
    "generate",
    "strip_predicates",
]

MECHANISM_DELTA = 1e-9
TIERS = ("mouse", "hare", "elephant")

# Per-tier target epsilons; pure-DP mechanisms run at lower nominal epsilon
# to compensate for their less efficient RDP composition.
TIER_EPSILON = {
    "gaussian": {"mouse": 0.05, "hare": 0.2, "elephant": 0.75},
    "pure": {"mouse": 0.01, "hare": 0.1, "elephant": 0.25},
}


def tier_epsilon(kind: Mechanism, tier: str) -> float:
    family = "gaussian" if kind in GAUSSIAN_FAMILY else "pure"
    return TIER_EPSILON[family][tier]


@dataclass(frozen=True)
class RequestFamily:
    """One request type: mechanism plus its attribute-selection distribution."""

    mechanism: Mechanism
    selection_beta: tuple[float, float]
    weight: float = 1.0
    repetitions: int = 1


@dataclass(frozen=True)
class WorkloadConfig:
    families: tuple[RequestFamily, ...]
    rounds: int = 40
    round_duration_minutes: float = 10080.0
    request_interarrival_minutes: float = 20.0
    user_interarrival_seconds: float = 10.0
    domain_size: int = 204800
    fraction_choices: tuple[tuple[float, float], ...] = ((0.25, 0.5), (1.0, 0.5))
    tier_mix: tuple[tuple[str, float], ...] = (
        ("mouse", 1 / 3),
        ("hare", 1 / 3),
        ("elephant", 1 / 3),
    )
    seed: int = 0
    name: str = "custom"

    def __post_init__(self) -> None:
        if not self.families:
            raise ParameterError("workload needs at least one request family")
        if self.rounds < 1 or self.domain_size < 1:
            raise ParameterError("rounds and domain_size must be positive")
        if self.round_duration_minutes <= 0 or self.user_interarrival_seconds <= 0:
            raise ParameterError("rates must be positive")
        # math.inf disables request arrivals (zero-rate stream)
        if self.request_interarrival_minutes <= 0:
            raise ParameterError("request inter-arrival must be > 0 (inf for none)")
        for probs in (self.fraction_choices, self.tier_mix):
            total = sum(p for _, p in probs)
            if not math.isclose(total, 1.0, rel_tol=1e-9):
                raise ParameterError("categorical weights must sum to 1")


@dataclass(frozen=True)
class UtilityModel:
    """Cobb-Douglas utility: Y = A * L^beta * K^alpha.

    L is the tier-level privacy cost (shared across mechanisms of the same
    tier via the per-mechanism correction), K the data amount, and the
    productivity A varies per request.
    """

    elasticity_budget: float = 2.0
    elasticity_data: float = 1.0
    productivity_beta: tuple[float, float] = (0.25, 0.25)
    tier_cost: tuple[tuple[str, float], ...] = (
        ("mouse", 0.05),
        ("hare", 0.2),
        ("elephant", 0.75),
    )

    def cost_level(self, tier: str) -> float:
        return dict(self.tier_cost)[tier]


@dataclass(frozen=True)
class WorkloadRequest:
    request_id: int
    round_index: int
    arrival_minutes: float
    predicate: CellInterval
    sample_fraction: float
    mechanism: Mechanism
    tier: str
    target_epsilon: float
    target_delta: float
    repetitions: int
    base_cost: RdpVector
    weight: int = 1
    utility: float = 0.0


@dataclass(frozen=True)
class WorkloadInstance:
    config: WorkloadConfig
    batches: tuple[tuple[WorkloadRequest, ...], ...]
    group_populations: dict


def build_workload(family: str, seed: int = 0) -> WorkloadConfig:
    """Preset workload definitions W1..W4."""
    narrow = (1.0, 10.0)
    broad = (1.0, 0.5)
    half = (2.0, 2.0)
    if family == "W1":
        families = (RequestFamily(Mechanism.GAUSSIAN, narrow),)
    elif family == "W2":
        families = (
            RequestFamily(Mechanism.GAUSSIAN, narrow),
            RequestFamily(Mechanism.LAPLACE, narrow),
            RequestFamily(Mechanism.SVT, broad),
            RequestFamily(Mechanism.RANDOMIZED_RESPONSE, broad),
        )
    elif family == "W3":
        families = (
            RequestFamily(Mechanism.NOISY_SGD, half),
            RequestFamily(Mechanism.PATE, half),
        )
    elif family == "W4":
        families = (
            RequestFamily(Mechanism.GAUSSIAN, narrow),
            RequestFamily(Mechanism.LAPLACE, narrow),
            RequestFamily(Mechanism.SVT, broad),
            RequestFamily(Mechanism.RANDOMIZED_RESPONSE, broad),
            RequestFamily(Mechanism.NOISY_SGD, half),
            RequestFamily(Mechanism.PATE, half),
        )
    else:
        raise ParameterError(f"unknown workload family {family!r}")
    return WorkloadConfig(families=families, seed=seed, name=family)


def sample_selection(
    beta_a: float, beta_b: float, domain_size: int, rng: np.random.Generator
) -> CellInterval:
    """Circular attribute range covering a Beta-distributed share of the domain."""
    if beta_a <= 0 or beta_b <= 0:
        raise ParameterError("beta parameters must be > 0")
    share = float(rng.beta(beta_a, beta_b))
    length = max(1, int(round(share * domain_size)))
    length = min(length, domain_size)
    start = int(rng.integers(domain_size))
    return CellInterval(start=start, length=length)


def assign_utility(
    tier: str,
    data_amount: float,
    model: UtilityModel,
    rng: np.random.Generator,
) -> float:
    """Raw (pre-normalisation) Cobb-Douglas utility for one request."""
    a_low, a_high = model.productivity_beta
    productivity = float(rng.beta(a_low, a_high))
    cost_level = model.cost_level(tier)
    return (
        productivity
        * cost_level ** model.elasticity_budget
        * data_amount ** model.elasticity_data
    )


@functools.lru_cache(maxsize=None)
def _base_cost(kind: Mechanism, eps: float, delta: float, reps: int, grid: AlphaGrid) -> RdpVector:
    return mechanism_rdp(MechanismSpec(kind, eps, delta, reps), grid)


def _round_counts(config: WorkloadConfig, rng: np.random.Generator) -> np.ndarray:
    """Requests per round from exponential inter-arrival times."""
    counts = np.zeros(config.rounds, dtype=np.int64)
    if math.isinf(config.request_interarrival_minutes):
        return counts
    horizon = config.rounds * config.round_duration_minutes
    t = 0.0
    chunk = max(64, int(horizon / config.request_interarrival_minutes * 1.2))
    arrivals: list[float] = []
    while t < horizon:
        gaps = rng.exponential(config.request_interarrival_minutes, size=chunk)
        times = t + np.cumsum(gaps)
        arrivals.extend(times[times < horizon].tolist())
        t = float(times[-1])
    for at in arrivals:
        counts[int(at // config.round_duration_minutes)] += 1
    return counts


def generate(
    config: WorkloadConfig,
    grid: AlphaGrid,
    utility_model: UtilityModel | None = None,
    assignment_horizon_t: int | None = None,
) -> WorkloadInstance:
    """Full per-round request batches plus group population counts.

    Deterministic in (config, grid): the same seed reproduces every batch,
    cost vector, and utility bit for bit.  ``assignment_horizon_t`` spreads
    arriving users over that many future groups (defaults to the round count).
    """
    model = utility_model or UtilityModel()
    rng = np.random.default_rng(config.seed)
    counts = _round_counts(config, rng)

    family_probs = np.array([f.weight for f in config.families], dtype=np.float64)
    family_probs = family_probs / family_probs.sum()
    tier_names = [t for t, _ in config.tier_mix]
    tier_probs = np.array([p for _, p in config.tier_mix])
    frac_values = [v for v, _ in config.fraction_choices]
    frac_probs = np.array([p for _, p in config.fraction_choices])

    batches: list[tuple[WorkloadRequest, ...]] = []
    raw_requests: list[WorkloadRequest] = []
    next_id = 0
    for round_index in range(config.rounds):
        n = int(counts[round_index])
        round_start = round_index * config.round_duration_minutes
        batch: list[WorkloadRequest] = []
        if n:
            offsets = np.sort(rng.random(n)) * config.round_duration_minutes
            fam_idx = rng.choice(len(config.families), size=n, p=family_probs)
            tier_idx = rng.choice(len(tier_names), size=n, p=tier_probs)
            frac_idx = rng.choice(len(frac_values), size=n, p=frac_probs)
            for j in range(n):
                fam = config.families[int(fam_idx[j])]
                tier = tier_names[int(tier_idx[j])]
                predicate = sample_selection(
                    fam.selection_beta[0], fam.selection_beta[1], config.domain_size, rng
                )
                fraction = frac_values[int(frac_idx[j])]
                eps = tier_epsilon(fam.mechanism, tier)
                data_amount = (predicate.length / config.domain_size) * fraction
                utility = assign_utility(tier, data_amount, model, rng)
                batch.append(
                    WorkloadRequest(
                        request_id=next_id,
                        round_index=round_index,
                        arrival_minutes=round_start + float(offsets[j]),
                        predicate=predicate,
                        sample_fraction=fraction,
                        mechanism=fam.mechanism,
                        tier=tier,
                        target_epsilon=eps,
                        target_delta=MECHANISM_DELTA,
                        repetitions=fam.repetitions,
                        base_cost=_base_cost(
                            fam.mechanism, eps, MECHANISM_DELTA, fam.repetitions, grid
                        ),
                        utility=utility,
                    )
                )
                next_id += 1
        batches.append(tuple(batch))
        raw_requests.extend(batch)

    total_utility = sum(r.utility for r in raw_requests)
    if total_utility > 0:
        batches = [
            tuple(replace(r, utility=r.utility / total_utility) for r in batch)
            for batch in batches
        ]

    # User arrivals only populate group sizes; they never steer planning.
    populations: dict[int, int] = {}
    users_per_round = config.round_duration_minutes * 60.0 / config.user_interarrival_seconds
    horizon_t = assignment_horizon_t if assignment_horizon_t else max(1, config.rounds)
    for round_index in range(config.rounds):
        arrivals = int(rng.poisson(users_per_round))
        if arrivals == 0:
            continue
        split = rng.multinomial(arrivals, np.full(horizon_t, 1.0 / horizon_t))
        for offset, count in enumerate(split):
            gid = round_index + 1 + offset
            populations[gid] = populations.get(gid, 0) + int(count)

    return WorkloadInstance(
        config=config,
        batches=tuple(batches),
        group_populations=populations,
    )


def strip_predicates(instance: WorkloadInstance) -> WorkloadInstance:
    """Adapter for baselines without partitioning-attribute support: every
    request's selection widens to the full domain."""
    domain = instance.config.domain_size
    full = CellInterval(0, domain)
    batches = tuple(
        tuple(replace(r, predicate=full) for r in batch) for batch in instance.batches
    )
    return replace(instance, batches=batches)
