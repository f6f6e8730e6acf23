"""Toolkit for stress-testing equilibrium route recommenders against fabricated demand."""

from .network import (
    AffineCost,
    BprCost,
    DemandProfile,
    DomainError,
    NetworkFormatError,
    OdStructure,
    RoadNetwork,
    edge_cost,
    load_network,
    parse_network,
    path_cost,
    road_loads,
)
from .equilibrium import (
    ConvergenceError,
    Recommendation,
    SolverConfig,
    WeSolution,
    build_roster,
    expected_user_cost,
    kkt_residual,
    solve_ue_fixed_point,
    solve_we,
    verify_ue,
    we_to_ue,
)
from .attack import (
    AttackResult,
    AttackScenario,
    InfeasibleAttackError,
    attack_feasibility,
    genuine_flow,
    load_scenario,
    random_attack,
    strategic_attack,
    uniform_attack,
)
from .trust import (
    TrustProfile,
    dual_value,
    kl_divergence,
    modified_path_costs,
    random_update,
    sensitivity_bound_check,
    tc_perturbation,
    trust_mechanism,
    trusted_step,
)
from .risk import (
    RiskReport,
    ScenarioRun,
    assemble_report,
    network_impact,
    targeted_impact,
    total_travel_cost,
)

__version__ = "0.1.0"
