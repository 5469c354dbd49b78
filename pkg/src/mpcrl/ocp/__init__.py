from .backend import BACKEND
from .problem import (
    WEIGHT_MIN,
    NonConvexOCPError,
    OCPDimensionError,
    OCPSpec,
    ParametricQP,
    QPData,
    assemble_kkt,
    parametric_qp,
    tangent_qp,
)
from .riccati import riccati_lqr, riccati_stationary
from .solver import (
    OCPInfeasibleError,
    OCPSolution,
    Status,
    kkt_components,
    kkt_norm,
    mpc_action,
    solve_ocp,
    solve_qp_data,
)
from .theta import Block, ThetaVector
