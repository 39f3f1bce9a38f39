"""Moment and SOS relaxations of the discounted control problem.

Order-r primal over the truncated moment sequence z = (z_gamma), |gamma| <= 2r:

    min  L_z(g)
    s.t. L_z(h^(alpha)) = b^(alpha)   for alpha in the test set A_r
         M_r(z) >= 0,  M_{r-v_i}(q_i z) >= 0

with h^(alpha) the generator applied to x^alpha and b^(alpha) the initial
moment of x^alpha.  The dual searches a polynomial phi = sum lambda_alpha
x^alpha over the same index set, maximizing its initial moment subject to

    g - A phi = sigma_0 + sum_i sigma_i q_i

with SOS multipliers sigma capped at degree 2r.  Optimal values J_r increase
with r toward the value-function lower bound; phi is a subsolution
certificate usable for feedback synthesis.

The test set is the uniform degree bound

    A_r = { alpha : |alpha| <= 2r - max(deg f - 1, 0) },

which keeps the relaxation at each order exactly as tight as the published
hierarchy values; alpha = 0 is always included, so every feasible moment
vector carries the occupation-measure mass z_0 = 1/lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import sparse

from .conic import SQRT2, ConeSegment, ConicProblem, ConicSolution, svec_cells
from .polynomials import (
    MultiIndex,
    Polynomial,
    evaluate_many,
    format_polynomial,
    h_alpha,
    monomials_up_to,
)
from .problem import InitialMeasure, OcpProblem, bounding_box, initial_moment


@dataclass(frozen=True)
class MomentIndexMap:
    """Graded-lex basis of joint monomials up to degree 2r with inverse map."""

    r: int
    basis: Tuple[MultiIndex, ...]
    position: Dict[MultiIndex, int]

    @staticmethod
    def build(num_vars: int, r: int) -> "MomentIndexMap":
        basis = tuple(monomials_up_to(num_vars, 2 * r))
        return MomentIndexMap(
            r=r, basis=basis, position={g: i for i, g in enumerate(basis)}
        )

    def __len__(self):
        return len(self.basis)


@dataclass(frozen=True)
class BlockSpec:
    """One PSD block: entries (i, j) are linear forms sum_w weight_w z_{gi+gj+w}."""

    label: str
    side: int
    sub_basis: Tuple[MultiIndex, ...]
    weight: Polynomial  # the constant 1 for the plain moment matrix


@dataclass(frozen=True)
class MomentSdp:
    index: MomentIndexMap
    objective: Dict[MultiIndex, float]
    equalities: Tuple[Tuple[MultiIndex, Dict[MultiIndex, float], float], ...]
    psd_blocks: Tuple[BlockSpec, ...]
    problem: OcpProblem
    r: int


@dataclass(frozen=True)
class SosProgram:
    phi_basis: Tuple[MultiIndex, ...]
    h_polys: Tuple[Polynomial, ...]
    b_vec: Tuple[float, ...]
    gram_blocks: Tuple[BlockSpec, ...]
    constraint_monomials: Tuple[MultiIndex, ...]
    rhs: Polynomial  # the identity's left side, g - A phi_fixed (phi_fixed = 0 normally)
    problem: OcpProblem
    r: int


@dataclass
class ValueCertificate:
    r: int
    J_r: float
    J_star_r: float
    phi: Polynomial
    residual_max: float
    solver: Dict[str, object]

    def to_dict(self, n: int) -> dict:
        return {
            "r": self.r,
            "J_r": self.J_r,
            "J_star_r": self.J_star_r,
            "phi": format_polynomial(self.phi, n),
            "residual_max": self.residual_max,
            "solver": dict(self.solver),
        }


def constraint_order(q: Polynomial) -> int:
    """v_i = ceil(deg q_i / 2); localizing block side uses r - v_i."""
    return (q.degree() + 1) // 2


def minimum_order(p: OcpProblem) -> int:
    v0 = (p.g.degree() + 1) // 2
    return max([v0] + [constraint_order(qi) for qi in p.q] + [1])


def test_index_set(p: OcpProblem, r: int) -> List[MultiIndex]:
    """The equality index set A_r over state monomials (uniform degree bound)."""
    fdeg = max(fk.degree() for fk in p.f)
    bound = max(0, 2 * r - max(fdeg - 1, 0))
    return monomials_up_to(p.n, bound)


def _check_order(p: OcpProblem, r: int):
    rmin = minimum_order(p)
    if r < rmin:
        raise ValueError(
            f"relaxation order {r} too small for this problem; minimum is {rmin}"
        )


def assemble_primal(p: OcpProblem, r: int) -> MomentSdp:
    """Order-r moment relaxation (dirac initial data gives the pointwise
    program, uniform initial data the averaged one)."""
    _check_order(p, r)
    nv = p.n + p.m
    index = MomentIndexMap.build(nv, r)

    objective = {e: c for e, c in p.g.terms.items()}

    equalities = []
    for alpha in test_index_set(p, r):
        h = h_alpha(alpha, p.f, p.lam)
        if h.degree() > 2 * r:
            # cancellation-independent guard; unreachable under the uniform bound
            continue
        rhs = initial_moment(p.initial, alpha)
        equalities.append((alpha, dict(h.terms), float(rhs)))

    blocks = [
        BlockSpec(
            label="moment",
            side=len(monomials_up_to(nv, r)),
            sub_basis=tuple(monomials_up_to(nv, r)),
            weight=Polynomial.constant(nv, 1.0),
        )
    ]
    for k, qi in enumerate(p.q):
        vi = constraint_order(qi)
        sub = tuple(monomials_up_to(nv, r - vi))
        blocks.append(
            BlockSpec(label=f"localizing_{k}", side=len(sub), sub_basis=sub, weight=qi)
        )
    return MomentSdp(
        index=index,
        objective=objective,
        equalities=tuple(equalities),
        psd_blocks=tuple(blocks),
        problem=p,
        r=r,
    )


def assemble_dual(p: OcpProblem, r: int, fixed_phi: Polynomial | None = None) -> SosProgram:
    """Order-r SOS program.

    With fixed_phi the polynomial unknowns are dropped and the program checks
    representability of g - A(fixed_phi), which certifies fixed_phi as a
    value-function subsolution.
    """
    _check_order(p, r)
    nv = p.n + p.m

    if fixed_phi is None:
        alphas = tuple(test_index_set(p, r))
        h_polys = tuple(h_alpha(a, p.f, p.lam) for a in alphas)
        b_vec = tuple(initial_moment(p.initial, a) for a in alphas)
        rhs = p.g
    else:
        from .polynomials import apply_generator

        alphas = ()
        h_polys = ()
        b_vec = ()
        rhs = p.g - apply_generator(fixed_phi, p.f, p.lam)
        if rhs.degree() > 2 * r:
            raise ValueError(
                f"candidate degree too high: g - A(phi) has degree {rhs.degree()}, "
                f"order {r} caps it at {2 * r}"
            )

    blocks = [
        BlockSpec(
            label="sos_0",
            side=len(monomials_up_to(nv, r)),
            sub_basis=tuple(monomials_up_to(nv, r)),
            weight=Polynomial.constant(nv, 1.0),
        )
    ]
    for k, qi in enumerate(p.q):
        vi = constraint_order(qi)
        sub = tuple(monomials_up_to(nv, r - vi))
        blocks.append(
            BlockSpec(label=f"sos_{k + 1}", side=len(sub), sub_basis=sub, weight=qi)
        )
    return SosProgram(
        phi_basis=alphas,
        h_polys=h_polys,
        b_vec=b_vec,
        gram_blocks=tuple(blocks),
        constraint_monomials=tuple(monomials_up_to(nv, 2 * r)),
        rhs=rhs,
        problem=p,
        r=r,
    )


# -- conic encodings -------------------------------------------------------


def _moment_to_conic(sdp: MomentSdp) -> ConicProblem:
    index = sdp.index
    R = len(index)
    segments = [ConeSegment.free(R)] + [ConeSegment.psd(b.side) for b in sdp.psd_blocks]
    nvar = R + sum(b.side * (b.side + 1) // 2 for b in sdp.psd_blocks)

    c = np.zeros(nvar)
    for e, coef in sdp.objective.items():
        c[index.position[e]] = coef

    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    b_rhs: List[float] = []
    nrow = 0
    for _alpha, terms, rhs in sdp.equalities:
        for e, coef in terms.items():
            rows.append(nrow)
            cols.append(index.position[e])
            vals.append(coef)
        b_rhs.append(rhs)
        nrow += 1

    moment_rows_end = nrow
    cell_off = R
    block_spans = []
    for blk in sdp.psd_blocks:
        start = cell_off
        for pos, i, j in svec_cells(blk.side):
            scale = 1.0 if i == j else SQRT2
            merged: Dict[int, float] = {}
            gi, gj = blk.sub_basis[i], blk.sub_basis[j]
            for w, qw in blk.weight.terms.items():
                e = tuple(a + b_ + c_ for a, b_, c_ in zip(gi, gj, w))
                zpos = index.position[e]
                merged[zpos] = merged.get(zpos, 0.0) + qw * scale
            for zpos, coef in merged.items():
                if coef != 0.0:
                    rows.append(nrow)
                    cols.append(zpos)
                    vals.append(coef)
            rows.append(nrow)
            cols.append(cell_off + pos)
            vals.append(-1.0)
            b_rhs.append(0.0)
            nrow += 1
        cell_off += blk.side * (blk.side + 1) // 2
        block_spans.append((blk.label, start, cell_off))

    A = sparse.coo_matrix((vals, (rows, cols)), shape=(nrow, nvar)).tocsr()
    meta = {
        "kind": "moment",
        "num_moments": R,
        "moment_rows": moment_rows_end,
        "alphas": [a for a, _, _ in sdp.equalities],
        "block_spans": block_spans,
    }
    return ConicProblem(c, A, b_rhs, segments, meta)


def _sos_to_conic(prog: SosProgram) -> ConicProblem:
    nphi = len(prog.phi_basis)
    segments = ([ConeSegment.free(nphi)] if nphi else []) + [
        ConeSegment.psd(b.side) for b in prog.gram_blocks
    ]
    ncells = sum(b.side * (b.side + 1) // 2 for b in prog.gram_blocks)
    nvar = nphi + ncells

    # maximize sum lambda_alpha b_alpha == minimize the negation
    c = np.zeros(nvar)
    for t, bv in enumerate(prog.b_vec):
        c[t] = -bv

    mono_pos = {e: i for i, e in enumerate(prog.constraint_monomials)}
    nrow = len(prog.constraint_monomials)
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []

    for t, h in enumerate(prog.h_polys):
        for e, coef in h.terms.items():
            rows.append(mono_pos[e])
            cols.append(t)
            vals.append(coef)

    cell_off = nphi
    block_spans = []
    for blk in prog.gram_blocks:
        start = cell_off
        for pos, i, j in svec_cells(blk.side):
            scale = 1.0 if i == j else SQRT2
            gi, gj = blk.sub_basis[i], blk.sub_basis[j]
            for w, qw in blk.weight.terms.items():
                e = tuple(a + b_ + c_ for a, b_, c_ in zip(gi, gj, w))
                rows.append(mono_pos[e])
                cols.append(cell_off + pos)
                vals.append(qw * scale)
        cell_off += blk.side * (blk.side + 1) // 2
        block_spans.append((blk.label, start, cell_off))

    b_rhs = np.zeros(nrow)
    for e, coef in prog.rhs.terms.items():
        b_rhs[mono_pos[e]] = coef

    A = sparse.coo_matrix((vals, (rows, cols)), shape=(nrow, nvar)).tocsr()
    A.sum_duplicates()
    meta = {
        "kind": "sos",
        "num_phi": nphi,
        "phi_basis": list(prog.phi_basis),
        "block_spans": block_spans,
    }
    return ConicProblem(c, A, b_rhs, segments, meta)


def to_conic(program) -> ConicProblem:
    """Standard-form encoding of an assembled moment or SOS program."""
    if isinstance(program, MomentSdp):
        return _moment_to_conic(program)
    if isinstance(program, SosProgram):
        return _sos_to_conic(program)
    raise TypeError(f"cannot encode {type(program).__name__}")


# -- solution readback -----------------------------------------------------


def moment_vector(sdp: MomentSdp, sol: ConicSolution) -> np.ndarray:
    """The truncated moment sequence z from a solved primal encoding."""
    return sol.v[: len(sdp.index)]


def mass(sdp: MomentSdp, sol: ConicSolution) -> float:
    """z_0, which every feasible point pins at 1/lambda."""
    zero = (0,) * (sdp.problem.n + sdp.problem.m)
    return float(sol.v[sdp.index.position[zero]])


def phi_from_solution(prog: SosProgram, sol: ConicSolution) -> Polynomial:
    n = prog.problem.n
    terms = {}
    for t, alpha in enumerate(prog.phi_basis):
        coef = float(sol.v[t])
        if coef != 0.0:
            terms[alpha] = coef
    return Polynomial(n, terms)


def sos_value(prog: SosProgram, sol: ConicSolution) -> float:
    """The SOS objective (a maximum); the conic encoding minimizes its negation."""
    return -sol.primal_objective


# -- validation grids and residuals ---------------------------------------

DENSE_GRID_AXES = (51, 51, 21)
QUASI_RANDOM_POINTS = 10_000


def validation_grid(p: OcpProblem, seed: int = 0) -> np.ndarray:
    """Deterministic sample of the constraint set for residual checks.

    A dense product grid when the layout is two states and one input,
    otherwise a Halton sample of the bounding box; points violating any
    constraint are dropped.
    """
    nv = p.n + p.m
    box = bounding_box(p)
    if box is None:
        box = [(-1.0, 1.0)] * nv
    if p.n == 2 and p.m == 1:
        axes = [
            np.linspace(lo, hi, cnt) for (lo, hi), cnt in zip(box, DENSE_GRID_AXES)
        ]
        pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    else:
        from scipy.stats import qmc

        unit = qmc.Halton(d=nv, scramble=False, seed=seed).random(QUASI_RANDOM_POINTS)
        lo = np.array([b[0] for b in box])
        hi = np.array([b[1] for b in box])
        pts = lo + unit * (hi - lo)
    keep = np.ones(len(pts), dtype=bool)
    for qi in p.q:
        keep &= evaluate_many(qi, pts) >= 0.0
    return pts[keep]


def subsolution_residual(p: OcpProblem, phi: Polynomial, grid: np.ndarray | None = None) -> float:
    """max over the grid of (A phi - g); <= 0 means phi certifies a bound."""
    from .polynomials import apply_generator

    if grid is None:
        grid = validation_grid(p)
    slack = apply_generator(phi, p.f, p.lam) - p.g
    return float(np.max(evaluate_many(slack, grid)))


def extract_certificate(
    p: OcpProblem,
    r: int,
    primal_sol: ConicSolution | None,
    dual_sol: ConicSolution | None,
    dual_prog: SosProgram | None = None,
    grid: np.ndarray | None = None,
    solver_extra: Dict[str, object] | None = None,
) -> ValueCertificate:
    """Package solved primal/dual output into a value certificate.

    Either side may be missing or failed; both failed is an error carrying
    the solver statuses.
    """
    p_ok = primal_sol is not None and primal_sol.ok
    d_ok = dual_sol is not None and dual_sol.ok
    if not p_ok and not d_ok:
        stat_p = primal_sol.status if primal_sol is not None else "not solved"
        stat_d = dual_sol.status if dual_sol is not None else "not solved"
        raise RuntimeError(
            f"no usable solution at order {r}: primal {stat_p}, dual {stat_d}"
        )

    J_r = float(primal_sol.primal_objective) if p_ok else float("nan")
    if d_ok:
        if dual_prog is None:
            raise ValueError("dual solution given without its program")
        J_star = sos_value(dual_prog, dual_sol)
        phi = phi_from_solution(dual_prog, dual_sol)
        residual = subsolution_residual(p, phi, grid)
    else:
        J_star = float("nan")
        phi = Polynomial.zero(p.n)
        residual = float("nan")

    solver: Dict[str, object] = {
        "primal_status": primal_sol.status if primal_sol is not None else "not solved",
        "dual_status": dual_sol.status if dual_sol is not None else "not solved",
    }
    if primal_sol is not None:
        solver.update(
            primal_iterations=primal_sol.iterations,
            primal_seconds=primal_sol.solve_seconds,
            primal_residuals=list(primal_sol.residuals),
        )
    if dual_sol is not None:
        solver.update(
            dual_iterations=dual_sol.iterations,
            dual_seconds=dual_sol.solve_seconds,
            dual_residuals=list(dual_sol.residuals),
        )
    if solver_extra:
        solver.update(solver_extra)
    return ValueCertificate(
        r=r, J_r=J_r, J_star_r=J_star, phi=phi, residual_max=residual, solver=solver
    )
