"""Interior-point solution of standard-form conic programs.

The engine is cvxopt's conelp (primal-dual interior point over products of
nonnegative and PSD cones).  A problem is encoded by one of three strategies,
picked by structure:

  substitution  every cone entry has zero cost and sits in exactly one
                equality row that contains no other cone entry; the entry is
                eliminated and its row becomes a cone row.  This is the shape
                of moment programs, where the PSD blocks are affine images of
                the moment vector.
  dualized      the Lagrangian dual is handed to the engine; right shape for
                SOS programs, where rows (monomials) are far fewer than Gram
                entries.
  direct        one engine variable per problem variable.

Dual vectors for the original equality rows are recovered from stationarity
in every strategy, and the reported residuals are recomputed from the
returned vectors rather than echoed from the engine.

cvxopt configures itself through a global options dict; a module lock guards
the set-solve-restore window, so concurrent solves serialize but stay
correct.
"""

from __future__ import annotations

import threading
import time
from typing import Dict, List, Tuple

import numpy as np
from scipy import sparse

import cvxopt
import cvxopt.solvers

from .conic import (
    SQRT2,
    ConeSegment,
    ConicProblem,
    ConicSolution,
    compute_residuals,
    svec_cells,
)

_OPTIONS_LOCK = threading.Lock()

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200

# residual level at which an engine "unknown" still counts as a usable iterate
NEAR_OPTIMAL_RESIDUAL = 1e-5


def _to_cvx_sparse(M: sparse.spmatrix) -> cvxopt.spmatrix:
    M = M.tocoo()
    return cvxopt.spmatrix(
        M.data.tolist(),
        M.row.tolist(),
        M.col.tolist(),
        size=M.shape,
    )


def _row_rescale(prob: ConicProblem) -> Tuple[ConicProblem, np.ndarray]:
    """Divide each equality row and rhs by the row's max absolute entry."""
    A = prob.A.tocsr(copy=True)
    scales = np.ones(prob.num_rows)
    for i in range(prob.num_rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        d = np.abs(A.data[lo:hi]).max()
        scales[i] = d
        A.data[lo:hi] /= d
    b = prob.b / scales
    scaled = ConicProblem(prob.c, A, b, prob.segments, prob.meta)
    return scaled, scales


def _conelp(c, G, h, dims, A, b, tol: float, max_iter: int):
    options = {
        "show_progress": False,
        "abstol": tol,
        "reltol": tol,
        "feastol": max(tol, 1e-9),
        "maxiters": max_iter,
    }
    with _OPTIONS_LOCK:
        saved = dict(cvxopt.solvers.options)
        cvxopt.solvers.options.update(options)
        try:
            return cvxopt.solvers.conelp(c, G, h, dims=dims, A=A, b=b)
        finally:
            cvxopt.solvers.options.clear()
            cvxopt.solvers.options.update(saved)


def _cone_layout(segments) -> Tuple[List[int], List[int], List[int], int]:
    """Segment indices of nonneg and psd cells plus total full-storage length.

    Returns (nonneg_segs, psd_segs, full_offsets, total) where full_offsets
    maps each segment index to its offset in the engine's stacked cone vector
    (nonneg entries first, then full side*side PSD blocks in order).
    """
    nonneg = [k for k, s in enumerate(segments) if s.kind == "nonneg"]
    psd = [k for k, s in enumerate(segments) if s.kind == "psd"]
    full_offsets = [0] * len(segments)
    off = 0
    for k in nonneg:
        full_offsets[k] = off
        off += segments[k].size
    for k in psd:
        full_offsets[k] = off
        off += segments[k].side ** 2
    return nonneg, psd, full_offsets, off


def _svec_full_map(segments, nonneg, psd, full_offsets, nfull: int):
    """Sparse map F with full_vector = F @ svec_vector for the cone segments.

    Rows follow the engine cone order (nonneg then full PSD blocks), columns
    are positions in the problem's variable vector.  Off-diagonal svec cells
    spread to their two full positions with weight 1/sqrt(2).
    """
    offs = [0]
    for s in segments:
        offs.append(offs[-1] + s.size)
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for k in nonneg:
        base_v = offs[k]
        base_f = full_offsets[k]
        for t in range(segments[k].size):
            rows.append(base_f + t)
            cols.append(base_v + t)
            vals.append(1.0)
    for k in psd:
        side = segments[k].side
        base_v = offs[k]
        base_f = full_offsets[k]
        for pos, i, j in svec_cells(side):
            if i == j:
                rows.append(base_f + j * side + i)
                cols.append(base_v + pos)
                vals.append(1.0)
            else:
                rows.append(base_f + j * side + i)
                cols.append(base_v + pos)
                vals.append(1.0 / SQRT2)
                rows.append(base_f + i * side + j)
                cols.append(base_v + pos)
                vals.append(1.0 / SQRT2)
    return sparse.coo_matrix(
        (vals, (rows, cols)), shape=(nfull, offs[-1])
    ).tocsr()


def _full_to_svec(z: np.ndarray, segments, nonneg, psd, full_offsets) -> np.ndarray:
    """Read the engine's stacked cone vector back into svec storage."""
    offs = [0]
    for s in segments:
        offs.append(offs[-1] + s.size)
    out = np.zeros(offs[-1])
    for k in nonneg:
        out[offs[k] : offs[k] + segments[k].size] = z[
            full_offsets[k] : full_offsets[k] + segments[k].size
        ]
    for k in psd:
        side = segments[k].side
        base = full_offsets[k]
        block = z[base : base + side * side].reshape((side, side), order="F")
        block = 0.5 * (block + block.T)
        for pos, i, j in svec_cells(side):
            out[offs[k] + pos] = block[i, j] if i == j else SQRT2 * block[i, j]
    return out


def _dims(segments, nonneg, psd) -> dict:
    return {
        "l": sum(segments[k].size for k in nonneg),
        "q": [],
        "s": [segments[k].side for k in psd],
    }


def _status_from_engine(sol, residuals, max_iter: int) -> str:
    st = sol["status"]
    if st == "optimal":
        return "optimal"
    if st == "primal infeasible":
        return "infeasible"
    if st == "dual infeasible":
        return "unbounded"
    # "unknown": grade the final iterate by our own residuals
    pres, dres, gap = residuals
    if max(pres, dres, gap) <= NEAR_OPTIMAL_RESIDUAL:
        return "near_optimal"
    if sol.get("iterations", 0) >= max_iter:
        return "max_iter"
    return "error"


def _failed(prob: ConicProblem, status: str, message: str, seconds: float) -> ConicSolution:
    nanv = float("nan")
    return ConicSolution(
        status=status,
        v=np.zeros(prob.num_vars),
        y=np.zeros(prob.num_rows),
        s=np.zeros(prob.num_vars),
        primal_objective=nanv,
        dual_objective=nanv,
        residuals=(nanv, nanv, nanv),
        message=message,
        solve_seconds=seconds,
    )


def _substitution_applicable(prob: ConicProblem) -> bool:
    offs = prob.segment_offsets()
    n_free = sum(s.size for s in prob.segments if s.kind == "free")
    if n_free == 0 or n_free == prob.num_vars:
        return False
    cone_cols = np.zeros(prob.num_vars, dtype=bool)
    for k, seg in enumerate(prob.segments):
        if seg.kind != "free":
            cone_cols[offs[k] : offs[k + 1]] = True
    if np.any(prob.c[cone_cols] != 0.0):
        return False
    col_counts = np.diff(prob.A.tocsc().indptr)
    if np.any(col_counts[cone_cols] != 1):
        return False
    A = prob.A
    for i in range(prob.num_rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        if int(cone_cols[A.indices[lo:hi]].sum()) > 1:
            return False
    return True


def _solve_substitution(prob: ConicProblem, tol, max_iter) -> ConicSolution:
    """Eliminate cone entries, solve over the free variables only."""
    t0 = time.perf_counter()
    offs = prob.segment_offsets()
    segments = prob.segments
    free_cols = np.zeros(prob.num_vars, dtype=bool)
    for k, seg in enumerate(segments):
        if seg.kind == "free":
            free_cols[offs[k] : offs[k + 1]] = True
    free_idx = np.nonzero(free_cols)[0]
    cone_idx = np.nonzero(~free_cols)[0]
    free_pos = {int(j): t for t, j in enumerate(free_idx)}

    A = prob.A.tocsr()
    Acsc = prob.A.tocsc()
    # linking row and pivot coefficient for each cone column
    link_row = np.empty(prob.num_vars, dtype=int)
    link_coef = np.empty(prob.num_vars)
    link_row.fill(-1)
    for j in cone_idx:
        lo, hi = Acsc.indptr[j], Acsc.indptr[j + 1]
        link_row[j] = Acsc.indices[lo]
        link_coef[j] = Acsc.data[lo]
    is_link_row = np.zeros(prob.num_rows, dtype=bool)
    is_link_row[link_row[cone_idx]] = True
    plain_rows = np.nonzero(~is_link_row)[0]

    nonneg, psd, full_offsets, nfull = _cone_layout(segments)
    seg_offs = offs
    # engine cone rows: cell_value = (b_i - a_free' x)/pivot, spread to full storage
    Grows: List[int] = []
    Gcols: List[int] = []
    Gvals: List[float] = []
    h = np.zeros(nfull)

    def emit(frow: int, j: int, weight: float):
        i = link_row[j]
        piv = link_coef[j]
        h[frow] = prob.b[i] / piv * weight
        lo, hi = A.indptr[i], A.indptr[i + 1]
        for t in range(lo, hi):
            col = A.indices[t]
            if col == j:
                continue
            Grows.append(frow)
            Gcols.append(free_pos[int(col)])
            Gvals.append(A.data[t] / piv * weight)

    for k in nonneg:
        for t in range(segments[k].size):
            emit(full_offsets[k] + t, seg_offs[k] + t, 1.0)
    for k in psd:
        side = segments[k].side
        for pos, i, j in svec_cells(side):
            cell = seg_offs[k] + pos
            if i == j:
                emit(full_offsets[k] + j * side + i, cell, 1.0)
            else:
                emit(full_offsets[k] + j * side + i, cell, 1.0 / SQRT2)
                emit(full_offsets[k] + i * side + j, cell, 1.0 / SQRT2)

    nfree = free_idx.shape[0]
    G = sparse.coo_matrix((Gvals, (Grows, Gcols)), shape=(nfull, nfree))
    A_ff = A[plain_rows][:, free_idx] if plain_rows.size else None
    b_f = prob.b[plain_rows] if plain_rows.size else None
    c_f = prob.c[free_idx]

    try:
        sol = _conelp(
            cvxopt.matrix(c_f),
            _to_cvx_sparse(G),
            cvxopt.matrix(h),
            _dims(segments, nonneg, psd),
            _to_cvx_sparse(A_ff) if A_ff is not None else None,
            cvxopt.matrix(b_f) if b_f is not None else None,
            tol,
            max_iter,
        )
    except (ValueError, ArithmeticError, ZeroDivisionError) as exc:
        return _failed(prob, "error", f"engine failure: {exc}", time.perf_counter() - t0)

    seconds = time.perf_counter() - t0
    # infeasibility certificates leave some of x, s, z unset
    if sol["x"] is None or sol["s"] is None or sol["z"] is None:
        return _failed(
            prob, _status_from_engine(sol, (1, 1, 1), max_iter), sol["status"], seconds
        )

    x = np.asarray(sol["x"]).ravel()
    s_eng = np.asarray(sol["s"]).ravel()
    z_eng = np.asarray(sol["z"]).ravel()

    v = np.zeros(prob.num_vars)
    v[free_idx] = x
    v[cone_idx] = _full_to_svec(s_eng, segments, nonneg, psd, full_offsets)[cone_idx]

    # stationarity on an eliminated cell j: 0 - A_ij y_i - s_j = 0
    s_dual = np.zeros(prob.num_vars)
    zsvec = _full_to_svec(z_eng, segments, nonneg, psd, full_offsets)
    s_dual[cone_idx] = zsvec[cone_idx]
    y = np.zeros(prob.num_rows)
    y[link_row[cone_idx]] = -zsvec[cone_idx] / link_coef[cone_idx]
    if plain_rows.size:
        y[plain_rows] = -np.asarray(sol["y"]).ravel()

    residuals = compute_residuals(prob, v, y, s_dual)
    status = _status_from_engine(sol, residuals, max_iter)
    return ConicSolution(
        status=status,
        v=v,
        y=y,
        s=s_dual,
        primal_objective=float(prob.c @ v),
        dual_objective=float(prob.b @ y),
        residuals=residuals,
        iterations=sol.get("iterations", 0),
        solve_seconds=seconds,
        message="strategy=substitution",
    )


def _solve_dualized(prob: ConicProblem, tol, max_iter) -> ConicSolution:
    """Hand the Lagrangian dual (max b'y with c - A'y in the dual cone) to
    the engine: free components pin equalities, cone components become cone
    rows."""
    t0 = time.perf_counter()
    offs = prob.segment_offsets()
    segments = prob.segments
    free_cols = np.zeros(prob.num_vars, dtype=bool)
    for k, seg in enumerate(segments):
        if seg.kind == "free":
            free_cols[offs[k] : offs[k + 1]] = True
    free_idx = np.nonzero(free_cols)[0]
    cone_idx = np.nonzero(~free_cols)[0]

    nonneg, psd, full_offsets, nfull = _cone_layout(segments)
    F = _svec_full_map(segments, nonneg, psd, full_offsets, nfull)
    # s = c_cone - A_cone' y in full storage: G = F A', h = F c
    # (free columns of F are zero, so only cone entries contribute)
    G = F @ prob.A.T.tocsr()
    h = F @ prob.c
    A_eq = prob.A.tocsc()[:, free_idx].T if free_idx.size else None
    b_eq = prob.c[free_idx] if free_idx.size else None

    try:
        sol = _conelp(
            cvxopt.matrix(-prob.b),
            _to_cvx_sparse(G),
            cvxopt.matrix(h),
            _dims(segments, nonneg, psd),
            _to_cvx_sparse(sparse.csr_matrix(A_eq)) if A_eq is not None else None,
            cvxopt.matrix(b_eq) if b_eq is not None else None,
            tol,
            max_iter,
        )
    except (ValueError, ArithmeticError, ZeroDivisionError) as exc:
        return _failed(prob, "error", f"engine failure: {exc}", time.perf_counter() - t0)

    seconds = time.perf_counter() - t0
    needs_eq_duals = free_idx.size and sol["y"] is None
    if sol["x"] is None or sol["z"] is None or needs_eq_duals:
        # the engine sees the swapped orientation, so the labels swap back
        st = sol["status"]
        if st == "primal infeasible":
            status = "unbounded"
        elif st == "dual infeasible":
            status = "infeasible"
        else:
            status = _status_from_engine(sol, (1, 1, 1), max_iter)
        return _failed(prob, status, st, seconds)

    y = np.asarray(sol["x"]).ravel()
    z_eng = np.asarray(sol["z"]).ravel()

    v = np.zeros(prob.num_vars)
    v[cone_idx] = _full_to_svec(z_eng, segments, nonneg, psd, full_offsets)[cone_idx]
    if free_idx.size:
        v[free_idx] = np.asarray(sol["y"]).ravel()

    s_dual = np.zeros(prob.num_vars)
    resid = prob.c - prob.A.T @ y
    s_dual[cone_idx] = resid[cone_idx]

    residuals = compute_residuals(prob, v, y, s_dual)
    status = _status_from_engine(sol, residuals, max_iter)
    return ConicSolution(
        status=status,
        v=v,
        y=y,
        s=s_dual,
        primal_objective=float(prob.c @ v),
        dual_objective=float(prob.b @ y),
        residuals=residuals,
        iterations=sol.get("iterations", 0),
        solve_seconds=seconds,
        message="strategy=dualized",
    )


def _solve_direct(prob: ConicProblem, tol, max_iter) -> ConicSolution:
    t0 = time.perf_counter()
    segments = prob.segments
    nonneg, psd, full_offsets, nfull = _cone_layout(segments)
    F = _svec_full_map(segments, nonneg, psd, full_offsets, nfull)
    G = -F
    h = np.zeros(nfull)
    try:
        sol = _conelp(
            cvxopt.matrix(prob.c),
            _to_cvx_sparse(sparse.csr_matrix(G)),
            cvxopt.matrix(h),
            _dims(segments, nonneg, psd),
            _to_cvx_sparse(prob.A) if prob.num_rows else None,
            cvxopt.matrix(prob.b) if prob.num_rows else None,
            tol,
            max_iter,
        )
    except (ValueError, ArithmeticError, ZeroDivisionError) as exc:
        return _failed(prob, "error", f"engine failure: {exc}", time.perf_counter() - t0)

    seconds = time.perf_counter() - t0
    if sol["x"] is None or sol["y"] is None or sol["z"] is None:
        return _failed(
            prob, _status_from_engine(sol, (1, 1, 1), max_iter), sol["status"], seconds
        )

    v = np.asarray(sol["x"]).ravel()
    y = -np.asarray(sol["y"]).ravel()
    z_eng = np.asarray(sol["z"]).ravel()
    offs = prob.segment_offsets()
    s_dual = np.zeros(prob.num_vars)
    zsvec = _full_to_svec(z_eng, segments, nonneg, psd, full_offsets)
    for k, seg in enumerate(segments):
        if seg.kind != "free":
            s_dual[offs[k] : offs[k + 1]] = zsvec[offs[k] : offs[k + 1]]

    residuals = compute_residuals(prob, v, y, s_dual)
    status = _status_from_engine(sol, residuals, max_iter)
    return ConicSolution(
        status=status,
        v=v,
        y=y,
        s=s_dual,
        primal_objective=float(prob.c @ v),
        dual_objective=float(prob.b @ y),
        residuals=residuals,
        iterations=sol.get("iterations", 0),
        solve_seconds=seconds,
        message="strategy=direct",
    )


def choose_strategy(prob: ConicProblem) -> str:
    if _substitution_applicable(prob):
        return "substitution"
    if prob.num_rows < prob.num_vars:
        return "dualized"
    return "direct"


def solve(
    prob: ConicProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    strategy: str | None = None,
) -> ConicSolution:
    """Solve a standard-form conic program.

    Deterministic for identical inputs.  Equality rows are rescaled to unit
    max-norm before encoding; the returned duals and objectives refer to the
    original row scaling.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if not any(s.kind != "free" for s in prob.segments):
        raise ValueError("problem has no cone segments")

    scaled, scales = _row_rescale(prob)
    strat = strategy or choose_strategy(scaled)
    if strat == "substitution":
        if not _substitution_applicable(scaled):
            raise ValueError("substitution strategy needs single-use zero-cost cone columns")
        sol = _solve_substitution(scaled, tol, max_iter)
    elif strat == "dualized":
        sol = _solve_dualized(scaled, tol, max_iter)
    elif strat == "direct":
        sol = _solve_direct(scaled, tol, max_iter)
    else:
        raise ValueError(f"unknown strategy {strat!r}")

    # map duals back to the unscaled rows and re-report residuals against them
    y = sol.y / scales
    if sol.status in ("optimal", "near_optimal", "max_iter"):
        residuals = compute_residuals(prob, sol.v, y, sol.s)
        dual_objective = float(prob.b @ y)
    else:
        residuals = sol.residuals
        dual_objective = sol.dual_objective
    return ConicSolution(
        status=sol.status,
        v=sol.v,
        y=y,
        s=sol.s,
        primal_objective=sol.primal_objective,
        dual_objective=dual_objective,
        residuals=residuals,
        iterations=sol.iterations,
        solve_seconds=sol.solve_seconds,
        message=sol.message,
    )
