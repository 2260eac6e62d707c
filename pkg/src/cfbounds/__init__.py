"""Bounds on counterfactual queries in dynamic latent-state models.

The package computes sharp-in-practice lower/upper bounds on the probability
of necessity — the chance that an outcome state would have been avoided under
an alternative action sequence — for controlled hidden-state chains.  The
pipeline: exact posterior abduction (:mod:`.inference`), a pairwise-coupling
feasible polytope (:mod:`.coupling`), a sample-average counterfactual
objective (:mod:`.objective`), and multi-start Frank-Wolfe extremization
(:mod:`.optimizer`).  Copula-based point simulators (:mod:`.copula_sim`)
provide benchmark point estimates, and :mod:`.case_study` ships a calibrated
disease-progression model.
"""

from .model import (
    ModelPrimitives,
    Trajectory,
    ValidationReport,
    Violation,
    load_model,
    load_trajectory,
    save_model,
    save_trajectory,
    validate_primitives,
    validate_trajectory,
)
from .inference import (
    ImpossibleTrajectoryError,
    MessageSet,
    PosteriorSampleSet,
    SmoothedMarginals,
    backward_smooth,
    forward_filter,
    sample_posterior_paths,
    smoothed_marginals,
)
from .copula_sim import (
    CounterfactualPathSet,
    PNEstimate,
    RankOrdering,
    estimate_pn_mc,
    estimate_pn_naive,
    identity_ranks,
    simulate_comonotonic,
    simulate_independence,
)
from .coupling import (
    EMISSION,
    TRANSITION,
    BlockSpec,
    CouplingSpace,
    InfeasibleBlockError,
    PMZero,
    PairwiseCoupling,
    StartInfeasibleError,
    check_feasibility,
    comonotonic_coupling,
    cs_forbidden_cells,
    enumerate_blocks,
    independence_coupling,
    phase1_feasible_point,
    pm_forbidden_cells,
    with_forbidden,
)
from .objective import PNObjective, eval_pn, eval_pn_expanded, grad_pn
from .optimizer import (
    CONSTRAINT_MODES,
    BoundReport,
    FWResult,
    SolveOptions,
    bound_pn,
    frank_wolfe_extremize,
    lp_block_oracle,
)
from .case_study import (
    CancerScenario,
    breast_cancer_model,
    breast_cancer_ranks,
    make_path,
    pm_zero_list,
)

__all__ = [
    "ModelPrimitives",
    "Trajectory",
    "ValidationReport",
    "Violation",
    "load_model",
    "load_trajectory",
    "save_model",
    "save_trajectory",
    "validate_primitives",
    "validate_trajectory",
    "ImpossibleTrajectoryError",
    "MessageSet",
    "PosteriorSampleSet",
    "SmoothedMarginals",
    "backward_smooth",
    "forward_filter",
    "sample_posterior_paths",
    "smoothed_marginals",
    "CounterfactualPathSet",
    "PNEstimate",
    "RankOrdering",
    "estimate_pn_mc",
    "estimate_pn_naive",
    "identity_ranks",
    "simulate_comonotonic",
    "simulate_independence",
    "EMISSION",
    "TRANSITION",
    "BlockSpec",
    "CouplingSpace",
    "InfeasibleBlockError",
    "PMZero",
    "PairwiseCoupling",
    "StartInfeasibleError",
    "check_feasibility",
    "comonotonic_coupling",
    "cs_forbidden_cells",
    "enumerate_blocks",
    "independence_coupling",
    "phase1_feasible_point",
    "pm_forbidden_cells",
    "with_forbidden",
    "PNObjective",
    "eval_pn",
    "eval_pn_expanded",
    "grad_pn",
    "CONSTRAINT_MODES",
    "BoundReport",
    "FWResult",
    "SolveOptions",
    "bound_pn",
    "frank_wolfe_extremize",
    "lp_block_oracle",
    "CancerScenario",
    "breast_cancer_model",
    "breast_cancer_ranks",
    "make_path",
    "pm_zero_list",
]

__version__ = "0.1.0"
