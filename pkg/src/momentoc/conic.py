"""Standard-form conic programs.

    minimize    c' v
    subject to  A v = b
                v in K = free(k0) x nonneg(k1) x ... x psd(s1) x psd(s2) ...

The variable vector is partitioned by an ordered list of segments.  A PSD
segment of side s occupies s(s+1)/2 entries holding the scaled lower
triangle of the matrix: columns of the lower triangle stacked, off-diagonal
entries multiplied by sqrt(2) so that the Euclidean inner product of two
vectorized matrices equals the trace inner product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from scipy import sparse

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class ConeSegment:
    """One cell of the cone product: kind in {"free", "nonneg", "psd"}.

    size is the entry count; for psd segments side is the matrix dimension
    and size = side*(side+1)//2.
    """

    kind: str
    size: int
    side: int = 0

    @staticmethod
    def free(k: int) -> "ConeSegment":
        if k < 1:
            raise ValueError("segment size must be positive")
        return ConeSegment("free", k)

    @staticmethod
    def nonneg(k: int) -> "ConeSegment":
        if k < 1:
            raise ValueError("segment size must be positive")
        return ConeSegment("nonneg", k)

    @staticmethod
    def psd(side: int) -> "ConeSegment":
        if side < 1:
            raise ValueError("psd side must be positive")
        return ConeSegment("psd", side * (side + 1) // 2, side)


def svec_size(side: int) -> int:
    return side * (side + 1) // 2


def svec_index(i: int, j: int, side: int) -> int:
    """Position of matrix entry (i, j), i >= j, in the stacked lower triangle."""
    if i < j:
        i, j = j, i
    return j * side - j * (j - 1) // 2 + (i - j)


def svec_cells(side: int) -> Iterator[Tuple[int, int, int]]:
    """Yield (pos, i, j) over the lower triangle in storage order."""
    pos = 0
    for j in range(side):
        for i in range(j, side):
            yield pos, i, j
            pos += 1


def mat_to_svec(M: np.ndarray) -> np.ndarray:
    side = M.shape[0]
    out = np.empty(svec_size(side))
    for pos, i, j in svec_cells(side):
        out[pos] = M[i, j] if i == j else SQRT2 * M[i, j]
    return out


def svec_to_mat(v: np.ndarray, side: int) -> np.ndarray:
    M = np.empty((side, side))
    for pos, i, j in svec_cells(side):
        if i == j:
            M[i, j] = v[pos]
        else:
            M[i, j] = M[j, i] = v[pos] / SQRT2
    return M


class ConicProblem:
    """Immutable standard-form problem; matrices stored sparse CSR."""

    __slots__ = ("c", "A", "b", "segments", "meta")

    def __init__(
        self,
        c,
        A,
        b,
        segments: Sequence[ConeSegment],
        meta: dict | None = None,
    ):
        segments = tuple(segments)
        c = np.asarray(c, dtype=float).ravel()
        b = np.asarray(b, dtype=float).ravel()
        A = sparse.csr_matrix(A, dtype=float)
        total = sum(s.size for s in segments)
        if c.shape[0] != total:
            raise ValueError(
                f"objective length {c.shape[0]} does not match cone layout size {total}"
            )
        if A.shape != (b.shape[0], total):
            raise ValueError(
                f"equality matrix shape {A.shape} does not match "
                f"{b.shape[0]} rows x {total} variables"
            )
        row_counts = np.diff(A.indptr)
        if np.any(row_counts == 0):
            empty = int(np.nonzero(row_counts == 0)[0][0])
            raise ValueError(f"equality row {empty} has no nonzero coefficients")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "meta", dict(meta or {}))

    def __setattr__(self, name, value):
        raise AttributeError("ConicProblem is immutable")

    @property
    def num_vars(self) -> int:
        return self.c.shape[0]

    @property
    def num_rows(self) -> int:
        return self.b.shape[0]

    def segment_offsets(self) -> List[int]:
        offs = [0]
        for s in self.segments:
            offs.append(offs[-1] + s.size)
        return offs

    def segment_slice(self, k: int) -> slice:
        offs = self.segment_offsets()
        return slice(offs[k], offs[k + 1])

    def cone_membership_margin(self, v: np.ndarray) -> float:
        """Most negative cone margin of v: min eigenvalue over PSD segments,
        min entry over nonneg segments; 0.0 if only free segments."""
        worst = 0.0
        off = 0
        for seg in self.segments:
            cell = v[off : off + seg.size]
            if seg.kind == "nonneg":
                worst = min(worst, float(cell.min(initial=0.0)))
            elif seg.kind == "psd":
                w = np.linalg.eigvalsh(svec_to_mat(cell, seg.side))
                worst = min(worst, float(w[0]))
            off += seg.size
        return worst


@dataclass
class ConicSolution:
    """Solver output: primal v, equality duals y, cone dual slack s.

    Stationarity at optimality: c - A' y - s = 0 with s in the dual cone
    (zero on free segments).  residuals holds the reported (primal, dual,
    gap) numbers; they must match recomputation from the vectors.
    """

    status: str
    v: np.ndarray
    y: np.ndarray
    s: np.ndarray
    primal_objective: float
    dual_objective: float
    residuals: Tuple[float, float, float]
    iterations: int = 0
    solve_seconds: float = 0.0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "near_optimal")


def _inf_norm(x: np.ndarray) -> float:
    return float(np.max(np.abs(x))) if x.size else 0.0


def compute_residuals(
    prob: ConicProblem, v: np.ndarray, y: np.ndarray, s: np.ndarray
) -> Tuple[float, float, float]:
    """Scaled KKT residuals (primal feasibility, dual stationarity, gap)."""
    pres = _inf_norm(prob.A @ v - prob.b) / (1.0 + _inf_norm(prob.b))
    dres = _inf_norm(prob.c - prob.A.T @ y - s) / (1.0 + _inf_norm(prob.c))
    pobj = float(prob.c @ v)
    dobj = float(prob.b @ y)
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return (float(pres), float(dres), float(gap))
