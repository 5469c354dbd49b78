from .bo import BOConfig, BOState, OracleResult, bo_step, initial_design, policy_oracle, train_bo
from .gp import (
    GPFitError,
    GPModel,
    constrained_ei,
    expected_improvement,
    gp_fit,
    gp_posterior,
    maximize_acquisition,
    prob_feasible,
    ucb,
)
from .offline import (
    BCConfig,
    BCResult,
    DemoDataset,
    bc_gradient,
    bc_loss,
    collect_expert,
    identifiability,
    train_bc,
)
from .pg import (
    AllSamplesDropped,
    IterationRecord,
    LearnerFailure,
    LearningCurve,
    NonFiniteGradient,
    PGConfig,
    dpg_gradient,
    gradient_step,
    mc_value_baseline,
    reinforce_gradient,
    train_dpg,
    train_reinforce,
)
