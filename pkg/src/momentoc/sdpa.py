"""Sparse SDPA (.dat-s) exchange and the file-based solver backend.

The standard form min c'v, Av = b, v in free x nonneg x psd maps onto the
file's dual side: the block variable Y is v in matrix form, constraint
matrix k holds row k of A (off-diagonal svec coefficients divided by
sqrt(2)), the file's cost vector is b, and the file's F0 is the negated
objective, so the file's maximization value is the negation of ours.  Free
variables do not exist in the format and are split v = p - q into a trailing
diagonal block; header comments record the original layout, so re-importing
our own export reconstructs A, b, c exactly.  Files written by other tools
parse as problems over their stated blocks (no free segment).

Two interchangeable backends solve a ConicProblem: in process, or through a
.dat-s file handed to an external SDPA-compatible command (environment
variable MOMENTOC_SDPA_CMD, called as `cmd problem.dat-s solution.out`).
Without the variable the file route still works end to end: the exported
file is parsed back and solved in process, and the solution is written and
re-imported in the external output format.
"""

from __future__ import annotations

import os
import re
import subprocess
import tempfile
from typing import Dict, List, Tuple

import numpy as np
from scipy import sparse

from .conic import (
    SQRT2,
    ConeSegment,
    ConicProblem,
    ConicSolution,
    compute_residuals,
    mat_to_svec,
    svec_cells,
    svec_index,
    svec_to_mat,
)

LAYOUT_TAG = "*layout:"
SIGN_TAG = "*objective: file maximizes the negated objective"
SPLIT_TAG = "*free variables split p-q into trailing diagonal block"
EXACT_TAG = "*exact:"


def _fmt(x: float) -> str:
    return repr(float(x))


def _block_struct(prob: ConicProblem) -> Tuple[List[int], List[Tuple[str, int, int]], int]:
    """File block sizes, (kind, segment index, block number) map, free count."""
    struct: List[int] = []
    blocks: List[Tuple[str, int, int]] = []
    nfree = 0
    for k, seg in enumerate(prob.segments):
        if seg.kind == "free":
            nfree += seg.size
            continue
        if seg.kind == "nonneg":
            struct.append(-seg.size)
        else:
            struct.append(seg.side)
        blocks.append((seg.kind, k, len(struct)))
    if nfree:
        struct.append(-2 * nfree)
    return struct, blocks, nfree


def _entries_for_vector(
    prob: ConicProblem, vec: np.ndarray, blocks, nfree: int, free_block: int
) -> List[Tuple[int, int, int, float, float]]:
    """Matrix entries (blkno, i, j, value, svec_coeff) for a coefficient vector.

    svec_coeff is the coefficient in our variable space; for off-diagonal
    psd cells value = svec_coeff / sqrt(2) and the division may round.
    """
    offs = prob.segment_offsets()
    out: List[Tuple[int, int, int, float, float]] = []
    free_seen = 0
    for k, seg in enumerate(prob.segments):
        base = offs[k]
        if seg.kind == "free":
            for t in range(seg.size):
                a = vec[base + t]
                if a != 0.0:
                    pos = 2 * (free_seen + t) + 1
                    out.append((free_block, pos, pos, a, a))
                    out.append((free_block, pos + 1, pos + 1, -a, -a))
            free_seen += seg.size
            continue
        blkno = next(bn for kind, kk, bn in blocks if kk == k)
        if seg.kind == "nonneg":
            for t in range(seg.size):
                a = vec[base + t]
                if a != 0.0:
                    out.append((blkno, t + 1, t + 1, a, a))
        else:
            for pos, i, j in svec_cells(seg.side):
                a = vec[base + pos]
                if a != 0.0:
                    if i == j:
                        out.append((blkno, i + 1, i + 1, a, a))
                    else:
                        out.append((blkno, j + 1, i + 1, a / SQRT2, a))
    return out


def export_sdpa(prob: ConicProblem) -> str:
    """Sparse SDPA text for the problem; see the module docstring for the
    orientation of the mapping."""
    struct, blocks, nfree = _block_struct(prob)
    if not struct:
        raise ValueError("cannot export a problem with no cone segments")
    free_block = len(struct) if nfree else 0

    entry_lines: List[str] = []
    # entries whose sqrt(2) rescaling does not invert bitwise get an exact
    # header record so re-importing our own file reproduces A and c verbatim
    exact_lines: List[str] = []

    def emit(matno: int, entries) -> None:
        for blkno, i, j, val, coeff in entries:
            entry_lines.append(f"{matno} {blkno} {i} {j} {_fmt(val)}")
            if val != coeff and val * SQRT2 != coeff:
                exact_lines.append(
                    f"{EXACT_TAG} {matno} {blkno} {i} {j} {_fmt(coeff)}"
                )

    emit(0, _entries_for_vector(prob, -prob.c, blocks, nfree, free_block))
    A = prob.A.tocsr()
    row_vec = np.zeros(prob.num_vars)
    for r in range(prob.num_rows):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        row_vec[:] = 0.0
        row_vec[A.indices[lo:hi]] = A.data[lo:hi]
        emit(r + 1, _entries_for_vector(prob, row_vec, blocks, nfree, free_block))

    lines: List[str] = []
    layout = " ".join(
        f"{s.kind}:{s.side if s.kind == 'psd' else s.size}" for s in prob.segments
    )
    lines.append(f"{LAYOUT_TAG} {layout}")
    lines.append(SIGN_TAG)
    if nfree:
        lines.append(SPLIT_TAG)
    lines.extend(exact_lines)
    lines.append(f"{prob.num_rows} = mDIM")
    lines.append(f"{len(struct)} = nBLOCK")
    lines.append("(" + ", ".join(str(s) for s in struct) + ") = bLOCKsTRUCT")
    lines.append(" ".join(_fmt(x) for x in prob.b))
    lines.extend(entry_lines)
    return "\n".join(lines) + "\n"


class SdpaParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _tokenize_numbers(text: str) -> List[str]:
    return re.split(r"[\s,(){}]+", text.strip())


def parse_sdpa(text: str) -> ConicProblem:
    """Read a sparse SDPA problem back into standard form.

    Our own exports carry a layout comment and reconstruct exactly,
    including the free segment; foreign files become problems over their
    stated blocks.
    """
    layout: List[ConeSegment] | None = None
    exact: Dict[Tuple[int, int, int, int], float] = {}
    raw_lines = text.splitlines()
    body: List[Tuple[int, str]] = []
    for ln, line in enumerate(raw_lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith(("*", '"')):
            if stripped.startswith(LAYOUT_TAG):
                layout = []
                for tok in stripped[len(LAYOUT_TAG) :].split():
                    kind, _, size = tok.partition(":")
                    if kind == "free":
                        layout.append(ConeSegment.free(int(size)))
                    elif kind == "nonneg":
                        layout.append(ConeSegment.nonneg(int(size)))
                    elif kind == "psd":
                        layout.append(ConeSegment.psd(int(size)))
                    else:
                        raise SdpaParseError(ln, f"unknown layout token {tok!r}")
            elif stripped.startswith(EXACT_TAG):
                toks = stripped[len(EXACT_TAG) :].split()
                if len(toks) != 5:
                    raise SdpaParseError(ln, "malformed exact-coefficient record")
                try:
                    key = tuple(int(t) for t in toks[:4])
                    exact[key] = float(toks[4])
                except ValueError:
                    raise SdpaParseError(
                        ln, "malformed exact-coefficient record"
                    ) from None
            continue
        body.append((ln, stripped))

    if len(body) < 4:
        last = raw_lines and len(raw_lines) or 0
        raise SdpaParseError(last, "file ends before the block structure")

    def leading_int(idx: int, what: str) -> int:
        ln, s = body[idx]
        m = re.match(r"[-+]?\d+", s)
        if not m:
            raise SdpaParseError(ln, f"expected {what}")
        return int(m.group(0))

    mdim = leading_int(0, "constraint count")
    nblock = leading_int(1, "block count")
    ln_bs, bs_line = body[2]
    struct_tokens = [t for t in _tokenize_numbers(bs_line.split("=")[0]) if t]
    try:
        struct = [int(t) for t in struct_tokens]
    except ValueError:
        raise SdpaParseError(ln_bs, "malformed block structure") from None
    if len(struct) != nblock:
        raise SdpaParseError(
            ln_bs, f"block structure lists {len(struct)} blocks, header says {nblock}"
        )

    ln_c, c_line = body[3]
    c_tokens = [t for t in _tokenize_numbers(c_line) if t]
    entry_start = 4
    # the cost vector may wrap onto further lines
    while len(c_tokens) < mdim and entry_start < len(body):
        ln_c, more = body[entry_start]
        c_tokens.extend(t for t in _tokenize_numbers(more) if t)
        entry_start += 1
    if len(c_tokens) < mdim:
        raise SdpaParseError(ln_c, f"cost vector has {len(c_tokens)} of {mdim} entries")
    try:
        b_vec = np.array([float(t) for t in c_tokens[:mdim]])
    except ValueError:
        raise SdpaParseError(ln_c, "malformed cost vector") from None

    if layout is None:
        segments = [
            ConeSegment.nonneg(-s) if s < 0 else ConeSegment.psd(s) for s in struct
        ]
        nfree = 0
    else:
        segments = layout
        nfree = sum(s.size for s in layout if s.kind == "free")
        expected = [
            (-s.size if s.kind == "nonneg" else s.side)
            for s in layout
            if s.kind != "free"
        ] + ([-2 * nfree] if nfree else [])
        if expected != struct:
            raise SdpaParseError(ln_bs, "block structure disagrees with layout comment")

    # positions: map (blkno, i, j) to variable index and svec scale
    seg_offsets = [0]
    for s in segments:
        seg_offsets.append(seg_offsets[-1] + s.size)
    nvar = seg_offsets[-1]
    cone_of_block: Dict[int, int] = {}
    bn = 0
    for k, s in enumerate(segments):
        if s.kind == "free":
            continue
        bn += 1
        cone_of_block[bn] = k
    free_block = bn + 1 if nfree else 0
    free_positions: List[int] = [
        seg_offsets[k] + t
        for k, s in enumerate(segments)
        if s.kind == "free"
        for t in range(s.size)
    ]

    cvec = np.zeros(nvar)
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []

    def place(matno: int, blkno: int, i: int, j: int, value: float, ln: int):
        if blkno == free_block and nfree:
            if i != j:
                raise SdpaParseError(ln, "off-diagonal entry in the diagonal block")
            pair = (i - 1) // 2
            if pair >= len(free_positions):
                raise SdpaParseError(ln, f"entry index {i} outside the free block")
            if (i - 1) % 2 == 1:
                return  # q half of the split, redundant by construction
            col = free_positions[pair]
            coef = value
        else:
            k = cone_of_block.get(blkno)
            if k is None:
                raise SdpaParseError(ln, f"unknown block number {blkno}")
            seg = segments[k]
            bound = seg.size if seg.kind == "nonneg" else seg.side
            if i < 1 or j < 1 or i > bound or j > bound:
                raise SdpaParseError(ln, f"entry ({i},{j}) outside block {blkno}")
            if seg.kind == "nonneg":
                if i != j:
                    raise SdpaParseError(ln, "off-diagonal entry in a diagonal block")
                col = seg_offsets[k] + i - 1
                coef = value
            else:
                col = seg_offsets[k] + svec_index(i - 1, j - 1, seg.side)
                if i == j:
                    coef = value
                else:
                    coef = exact.get((matno, blkno, i, j), value * SQRT2)
        if matno == 0:
            cvec[col] += -coef
        else:
            rows.append(matno - 1)
            cols.append(col)
            vals.append(coef)

    for ln, line in body[entry_start:]:
        toks = line.split()
        if len(toks) != 5:
            raise SdpaParseError(ln, f"expected 5 fields, got {len(toks)}")
        try:
            matno, blkno, i, j = (int(t) for t in toks[:4])
            value = float(toks[4])
        except ValueError:
            raise SdpaParseError(ln, f"malformed entry {line!r}") from None
        if matno < 0 or matno > mdim:
            raise SdpaParseError(ln, f"matrix number {matno} out of range")
        place(matno, blkno, i, j, value, ln)

    A = sparse.coo_matrix((vals, (rows, cols)), shape=(mdim, nvar)).tocsr()
    A.sum_duplicates()
    return ConicProblem(cvec, A, b_vec, segments, {"kind": "sdpa_import"})


# -- solution text ---------------------------------------------------------

_PHASE_STATUS = {
    "pdOPT": "optimal",
    "pdFEAS": "near_optimal",
    "pFEAS": "near_optimal",
    "dFEAS": "near_optimal",
    "pFEAS_dINF": "infeasible",
    "pINF_dFEAS": "unbounded",
    "pUNBD": "infeasible",
    "dUNBD": "unbounded",
    "pdINF": "infeasible",
    "noINFO": "error",
}


def _block_values_to_text(values: List[np.ndarray], struct: List[int]) -> str:
    parts = []
    for blk, s in zip(values, struct):
        if s < 0:
            parts.append("{" + ",".join(_fmt(x) for x in blk) + "}")
        else:
            rows = []
            for i in range(s):
                rows.append("{" + ",".join(_fmt(x) for x in blk[i]) + "}")
            parts.append("{" + ",".join(rows) + "}")
    return "{" + ",".join(parts) + "}"


def _vector_to_blocks(prob: ConicProblem, vec: np.ndarray) -> List[np.ndarray]:
    """Split a variable-space vector into file blocks (free part p-q split)."""
    struct, blocks, nfree = _block_struct(prob)
    offs = prob.segment_offsets()
    out: List[np.ndarray] = []
    for kind, k, _bn in blocks:
        seg = prob.segments[k]
        cell = vec[offs[k] : offs[k] + seg.size]
        out.append(cell.copy() if kind == "nonneg" else svec_to_mat(cell, seg.side))
    if nfree:
        diag = np.zeros(2 * nfree)
        t = 0
        for k, seg in enumerate(prob.segments):
            if seg.kind != "free":
                continue
            for j in range(seg.size):
                val = vec[offs[k] + j]
                diag[2 * t] = max(val, 0.0)
                diag[2 * t + 1] = max(-val, 0.0)
                t += 1
        out.append(diag)
    return out


def format_solution(prob: ConicProblem, sol: ConicSolution) -> str:
    """Render a solution in the external solvers' output style."""
    struct, blocks, nfree = _block_struct(prob)
    inv_phase = {v: k for k, v in _PHASE_STATUS.items()}
    phase = (
        "pdOPT"
        if sol.status == "optimal"
        else inv_phase.get(sol.status, "noINFO")
    )
    lines = [f"phase.value  = {phase}"]
    lines.append(f"   objValPrimal = {_fmt(-sol.dual_objective)}")
    lines.append(f"   objValDual   = {_fmt(-sol.primal_objective)}")
    xvec = -sol.y
    lines.append("xVec = {" + ",".join(_fmt(x) for x in xvec) + "}")
    # file primal slack: our dual slack, with stationarity defects on the free diag
    slack = sol.s.copy()
    free_resid = prob.c - prob.A.T @ sol.y - sol.s
    offs = prob.segment_offsets()
    for k, seg in enumerate(prob.segments):
        if seg.kind == "free":
            slack[offs[k] : offs[k] + seg.size] = free_resid[offs[k] : offs[k] + seg.size]
    xmat = _vector_to_blocks(prob, slack)
    lines.append("xMat = " + _block_values_to_text(xmat, struct))
    ymat = _vector_to_blocks(prob, sol.v)
    lines.append("yMat = " + _block_values_to_text(ymat, struct))
    return "\n".join(lines) + "\n"


def _parse_braces(s: str, pos: int = 0):
    """Parse one nested brace expression into nested float lists."""
    while pos < len(s) and s[pos] in " \t\n,":
        pos += 1
    if pos >= len(s) or s[pos] != "{":
        raise ValueError(f"expected '{{' at offset {pos}")
    pos += 1
    out: list = []
    token = ""
    while pos < len(s):
        ch = s[pos]
        if ch == "{":
            sub, pos = _parse_braces(s, pos)
            out.append(sub)
            continue
        if ch in ",}":
            if token.strip():
                out.append(float(token))
            token = ""
            pos += 1
            if ch == "}":
                return out, pos
            continue
        token += ch
        pos += 1
    raise ValueError("unbalanced braces")


def import_solution(text: str, prob: ConicProblem) -> ConicSolution:
    """Map an external solver's output file back into the cone layout.

    Objectives and residuals are recomputed from the parsed vectors; the
    file's status phase is trusted for infeasibility reports.
    """
    struct, blocks, nfree = _block_struct(prob)

    phase = None
    sections: Dict[str, str] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        stripped = line.strip()
        if stripped.startswith("phase.value"):
            phase = stripped.split("=", 1)[1].strip()
        else:
            m = re.match(r"\s*(xVec|xMat|yMat)\s*=\s*(.*)", line)
            if m:
                name = m.group(1)
                buf = [m.group(2)]
                depth = buf[0].count("{") - buf[0].count("}")
                while depth > 0:
                    i += 1
                    if i >= len(lines):
                        raise SdpaParseError(
                            len(lines), f"{name} section ends mid-expression"
                        )
                    buf.append(lines[i])
                    depth += lines[i].count("{") - lines[i].count("}")
                sections[name] = "\n".join(buf)
        i += 1

    if phase is None:
        raise SdpaParseError(len(lines) or 1, "no phase.value line found")
    status = _PHASE_STATUS.get(phase, "error")
    if status in ("infeasible", "unbounded", "error"):
        nan = float("nan")
        return ConicSolution(
            status=status,
            v=np.zeros(prob.num_vars),
            y=np.zeros(prob.num_rows),
            s=np.zeros(prob.num_vars),
            primal_objective=nan,
            dual_objective=nan,
            residuals=(nan, nan, nan),
            message=f"imported phase {phase}",
        )

    for need in ("xVec", "yMat"):
        if need not in sections:
            raise SdpaParseError(len(lines) or 1, f"missing {need} section")

    try:
        xvec_list, _ = _parse_braces(sections["xVec"])
        ymat_list, _ = _parse_braces(sections["yMat"])
        xmat_list = None
        if "xMat" in sections:
            xmat_list, _ = _parse_braces(sections["xMat"])
    except ValueError as exc:
        raise SdpaParseError(len(lines) or 1, str(exc)) from None

    if len(xvec_list) != prob.num_rows:
        raise SdpaParseError(
            len(lines) or 1,
            f"xVec has {len(xvec_list)} entries, expected {prob.num_rows}",
        )
    y = -np.array([float(x) for x in xvec_list])

    def blocks_to_vector(block_list) -> np.ndarray:
        if len(block_list) != len(struct):
            raise SdpaParseError(
                len(lines) or 1,
                f"solution has {len(block_list)} blocks, expected {len(struct)}",
            )
        vec = np.zeros(prob.num_vars)
        offs = prob.segment_offsets()
        bi = 0
        for kind, k, _bn in blocks:
            seg = prob.segments[k]
            blk = block_list[bi]
            bi += 1
            if kind == "nonneg":
                vec[offs[k] : offs[k] + seg.size] = np.asarray(blk, dtype=float)
            else:
                M = np.array(blk, dtype=float)
                if M.shape != (seg.side, seg.side):
                    raise SdpaParseError(
                        len(lines) or 1, f"block {bi} has shape {M.shape}"
                    )
                vec[offs[k] : offs[k] + seg.size] = mat_to_svec(0.5 * (M + M.T))
        if nfree:
            diag = np.asarray(block_list[bi], dtype=float)
            t = 0
            for k, seg in enumerate(prob.segments):
                if seg.kind != "free":
                    continue
                for j in range(seg.size):
                    vec[offs[k] + j] = diag[2 * t] - diag[2 * t + 1]
                    t += 1
        return vec

    v = blocks_to_vector(ymat_list)
    if xmat_list is not None:
        s_all = blocks_to_vector(xmat_list)
        # free entries of the file slack are stationarity defects, not duals
        s = s_all.copy()
        offs = prob.segment_offsets()
        for k, seg in enumerate(prob.segments):
            if seg.kind == "free":
                s[offs[k] : offs[k] + seg.size] = 0.0
    else:
        s = np.zeros(prob.num_vars)

    residuals = compute_residuals(prob, v, y, s)
    return ConicSolution(
        status=status,
        v=v,
        y=y,
        s=s,
        primal_objective=float(prob.c @ v),
        dual_objective=float(prob.b @ y),
        residuals=residuals,
        message=f"imported phase {phase}",
    )


# -- backends --------------------------------------------------------------

ENV_COMMAND = "MOMENTOC_SDPA_CMD"


def solve_file(problem_path, output_path, tol: float = 1e-8, max_iter: int = 200) -> str:
    """Read a .dat-s file, solve in process, write the solution text."""
    from .solver import solve as solve_internal

    with open(problem_path, "r", encoding="utf-8") as fh:
        prob = parse_sdpa(fh.read())
    sol = solve_internal(prob, tol=tol, max_iter=max_iter)
    text = format_solution(prob, sol)
    with open(output_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


class InternalBackend:
    """In-process interior-point solve."""

    name = "internal"

    def solve(self, prob: ConicProblem, tol: float, max_iter: int) -> ConicSolution:
        from .solver import solve as solve_internal

        return solve_internal(prob, tol=tol, max_iter=max_iter)


class SdpaFileBackend:
    """Solve through .dat-s files.

    command: external solver invoked as `command problem.dat-s solution.out`;
    defaults to the MOMENTOC_SDPA_CMD environment variable, and to an
    in-process solve of the exchanged file when neither is set.
    """

    name = "sdpa-file"

    def __init__(self, command: str | None = None, keep_dir=None):
        self.command = command if command is not None else os.environ.get(ENV_COMMAND)
        self.keep_dir = keep_dir

    def solve(self, prob: ConicProblem, tol: float, max_iter: int) -> ConicSolution:
        import shlex

        workdir = self.keep_dir or tempfile.mkdtemp(prefix="momentoc_sdpa_")
        in_path = os.path.join(workdir, "problem.dat-s")
        out_path = os.path.join(workdir, "solution.out")
        with open(in_path, "w", encoding="utf-8") as fh:
            fh.write(export_sdpa(prob))
        if self.command:
            cmd = shlex.split(self.command) + [in_path, out_path]
            run = subprocess.run(cmd, capture_output=True, text=True)
            if run.returncode != 0 or not os.path.exists(out_path):
                raise RuntimeError(
                    f"external solver failed (exit {run.returncode}): "
                    f"{run.stderr.strip()[:500]}"
                )
        else:
            solve_file(in_path, out_path, tol=tol, max_iter=max_iter)
        with open(out_path, "r", encoding="utf-8") as fh:
            return import_solution(fh.read(), prob)


def get_backend(name: str, command: str | None = None):
    if name == "internal":
        return InternalBackend()
    if name == "sdpa-file":
        return SdpaFileBackend(command)
    raise ValueError(f"unknown backend {name!r}")
