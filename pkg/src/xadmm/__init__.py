"""Distributed consensus solver for convex problems with many non-linear constraints."""

from .admm import (
    IterationMetrics,
    ReferenceSolution,
    SolverState,
    StoppingRule,
    augmented_lagrangian,
    compute_metrics,
    dual_update_lambda,
    dual_update_mu,
    solve,
    x_update_batch,
    z_update,
)
from .baseline import BaselineOptions, WorkCounters, baseline_solve
from .errors import (
    InvalidConfig,
    LineSearchFailure,
    MaxItersExceeded,
    NoConvergence,
    NonFiniteValue,
    SolverError,
    WorkerFailure,
)
from .harness import HarnessSession, WorkerAssignment, make_assignment
from .lbfgs import InnerResult, InnerSolverOptions, minimize
from .oracles import FunctionOracle, check_affine, finite_diff_check, squared_hinge
from .problems import ConsensusProblem, ConstraintBatch, GeneralProblem
from .reference import get_reference, solve_penalty_oracle, solve_reference
from .zoo import (
    RobustSvmInstance,
    enclosing_ball_exhaustive,
    generate_enclosing_ball,
    generate_robust_svm,
    load_instance,
    save_instance,
    toy_1d_qp,
)

__version__ = "0.1.0"
