"""Privacy-budget planning engine.

RDP accounting with subsampling amplification, sliding-window budget
unlocking over a rotating user population, segment-based constraint
reduction, heuristic and exact request allocation, and a mixed-DP workload
simulator.
"""

from .accounting import (
    ALPHA_ORDERS_DEFAULT,
    AdpBudget,
    AlphaGrid,
    AmplificationParams,
    Mechanism,
    MechanismSpec,
    RdpVector,
    amplify_poisson_gaussian,
    amplify_poisson_generic,
    budget_from_adp,
    compose,
    filter_admits,
    gaussian_rdp,
    mechanism_rdp,
    pure_dp_to_rdp,
    rdp_to_adp,
    zcdp_to_rdp,
)
from .allocation import (
    Allocation,
    Problem,
    allocate_dpf,
    allocate_dpk,
    allocate_fcfs,
    apply_allocation,
    build_problem,
    solve_exact,
)
from .harness import run_simulation
from .population import (
    AttributeSchema,
    BlockLedger,
    LedgerStore,
    RotationConfig,
    RotationState,
    UnlockPolicy,
    advance_round,
    assign_group,
    available_budget,
    consume,
    unlocked_budget,
)
from .presets import SimulationConfig, desk_config, paper_config
from .segmentation import (
    CellInterval,
    RequestRecord,
    Segment,
    classify_contested,
    compute_segments,
    prune,
)
from .workload import (
    UtilityModel,
    WorkloadConfig,
    WorkloadRequest,
    build_workload,
    generate,
)

__version__ = "0.1.0"
