"""Moment-SOS relaxations for discounted infinite-horizon optimal control.

Lower bounds on the value function come from a hierarchy of moment
semidefinite relaxations of the occupation-measure linear program; polynomial
value-function approximations come from the dual sum-of-squares programs; a
feedback law is extracted from the dual optimum and evaluated in closed loop.
"""

from .polynomials import (
    MultiIndex,
    Polynomial,
    PolynomialVector,
    apply_generator,
    format_polynomial,
    h_alpha,
    monomial_count,
    monomials_up_to,
    parse_polynomial,
)
from .problem import (
    InitialMeasure,
    OcpProblem,
    augment_ball,
    initial_moment,
    load_problem,
    problem_from_dict,
    problem_to_dict,
    validate,
)
from .conic import ConeSegment, ConicProblem, ConicSolution
from .solver import solve
from .relaxation import (
    MomentIndexMap,
    MomentSdp,
    SosProgram,
    ValueCertificate,
    assemble_dual,
    assemble_primal,
    extract_certificate,
    to_conic,
)
from .synthesis import (
    ClosedLoopReport,
    FeedbackLaw,
    Trajectory,
    iterative_synthesis,
    pointwise_control,
    sign_law_control,
    simulate_closed_loop,
)

__version__ = "0.1.0"

__all__ = [
    "MultiIndex",
    "Polynomial",
    "PolynomialVector",
    "apply_generator",
    "h_alpha",
    "monomials_up_to",
    "monomial_count",
    "parse_polynomial",
    "format_polynomial",
    "OcpProblem",
    "InitialMeasure",
    "validate",
    "augment_ball",
    "initial_moment",
    "load_problem",
    "problem_from_dict",
    "problem_to_dict",
    "ConicProblem",
    "ConicSolution",
    "ConeSegment",
    "solve",
    "MomentIndexMap",
    "MomentSdp",
    "SosProgram",
    "ValueCertificate",
    "assemble_primal",
    "assemble_dual",
    "to_conic",
    "extract_certificate",
    "FeedbackLaw",
    "Trajectory",
    "ClosedLoopReport",
    "pointwise_control",
    "sign_law_control",
    "simulate_closed_loop",
    "iterative_synthesis",
    "__version__",
]
