"""Command line front end.

Subcommands assemble relaxations to solver files, solve order ranges into
value certificates and a summary table, check user-supplied value function
candidates, and run closed-loop synthesis.  Every run writes a manifest
echoing the resolved configuration; runs with identical manifests produce
byte-identical tables and reports apart from CPU time fields.

Exit codes: 0 success, 2 input error, 3 solver failure, 4 certification
rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
import time

import numpy as np

from . import __version__
from .polynomials import format_polynomial, parse_polynomial
from .problem import InitialMeasure, bounding_box, initial_moment, load_problem
from .relaxation import (
    assemble_dual,
    assemble_primal,
    extract_certificate,
    minimum_order,
    phi_from_solution,
    subsolution_residual,
    to_conic,
    validation_grid,
)
from .sdpa import export_sdpa, get_backend
from .synthesis import (
    DEFAULT_DT,
    DEFAULT_RHO,
    DEFAULT_TAIL_TOL,
    DEFAULT_UGRID,
    FeedbackLaw,
    TrajectoryEscape,
    _fit_ball_radius,
    iterative_synthesis,
    sign_law_admissible,
    simulate_closed_loop,
)
from . import report as rpt

DEFAULT_TOL = 1e-8
MAX_ITER = 200


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentoc",
        description="Moment relaxations and controller synthesis for "
        "discounted polynomial optimal control.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, order="single", backendish=True, simulation=False):
        sp.add_argument("--problem", required=True, help="problem JSON file")
        if order == "single":
            sp.add_argument("--order", type=int, required=True, help="relaxation order r")
        else:
            grp = sp.add_mutually_exclusive_group(required=True)
            grp.add_argument("--order", type=int, help="single relaxation order r")
            grp.add_argument("--orders", help="inclusive order range a..b")
        if backendish:
            sp.add_argument(
                "--backend",
                choices=["internal", "sdpa-file"],
                default="internal",
                help="conic solver route",
            )
            sp.add_argument("--tol", type=float, default=DEFAULT_TOL)
            sp.add_argument("--seed", type=int, default=0, help="sampling seed")
        if simulation:
            sp.add_argument("--dt", type=float, default=DEFAULT_DT)
            sp.add_argument("--tail-tol", type=float, default=DEFAULT_TAIL_TOL)
            sp.add_argument(
                "--rho",
                type=float,
                default=0.0,
                help="neighborhood radius; 0 solves one averaged program",
            )
            sp.add_argument(
                "--ugrid",
                type=int,
                default=DEFAULT_UGRID,
                help="input grid points per dimension for non-sign laws",
            )
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("relax", help="assemble one relaxation to a solver file")
    common(sp, backendish=False)
    sp.set_defaults(func=cmd_relax)

    sp = sub.add_parser("solve", help="solve an order range for value certificates")
    common(sp, order="range")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("certify", help="check a candidate value function")
    common(sp)
    sp.add_argument("--phi", required=True, help="polynomial candidate file")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("synthesize", help="build and simulate a feedback law")
    common(sp, simulation=True)
    sp.set_defaults(func=cmd_synthesize)
    return parser


def _load(args):
    try:
        return load_problem(args.problem)
    except FileNotFoundError:
        raise CliError(2, f"problem file not found: {args.problem}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(2, f"bad problem file: {exc}") from None


def _orders(args):
    if getattr(args, "orders", None):
        m = re.fullmatch(r"(\d+)\.\.(\d+)", args.orders)
        if not m:
            raise CliError(2, f"order range must look like 2..7, got {args.orders!r}")
        a, b = int(m.group(1)), int(m.group(2))
        if a > b:
            raise CliError(2, f"empty order range {args.orders}")
        return list(range(a, b + 1))
    return [args.order]


def _manifest(args, command, keys):
    man = {"command": command, "version": __version__}
    for k in keys:
        man[k] = getattr(args, k.replace("-", "_"))
    return man


def _write_manifest(args, command, keys):
    rpt.write_json(
        os.path.join(args.out, "manifest.json"), _manifest(args, command, keys)
    )


def _backend(args):
    return get_backend(args.backend)


def _solve_with(backend, cp, tol):
    return backend.solve(cp, tol=tol, max_iter=MAX_ITER)


def cmd_relax(args) -> int:
    p = _load(args)
    try:
        sdp = assemble_primal(p, args.order)
    except ValueError as exc:
        raise CliError(2, str(exc)) from None
    cp = to_conic(sdp)
    os.makedirs(args.out, exist_ok=True)
    rpt.atomic_write_text(os.path.join(args.out, "relaxation.dat-s"), export_sdpa(cp))
    index_map = {
        "order": sdp.r,
        "num_vars": p.n + p.m,
        "moment_basis": [list(a) for a in sdp.index.basis],
        "equality_alphas": [list(a) for a in cp.meta["alphas"]],
        "blocks": [
            {"label": blk.label, "side": blk.side, "span": list(span)}
            for blk, span in zip(sdp.psd_blocks, cp.meta["block_spans"])
        ],
    }
    rpt.write_json(os.path.join(args.out, "index_map.json"), index_map)
    _write_manifest(args, "relax", ["problem", "order"])
    return 0


def cmd_solve(args) -> int:
    p = _load(args)
    orders = _orders(args)
    backend = _backend(args)
    grid = validation_grid(p, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)

    rows = []
    failures = []
    for r in orders:
        t0 = time.perf_counter()
        try:
            sdp = assemble_primal(p, r)
            prog = assemble_dual(p, r)
            psol = _solve_with(backend, to_conic(sdp), args.tol)
            dsol = _solve_with(backend, to_conic(prog), args.tol)
            cert = extract_certificate(p, r, psol, dsol, dual_prog=prog, grid=grid)
        except (ValueError, RuntimeError) as exc:
            failures.append({"r": r, "error": str(exc)})
            continue
        cpu = time.perf_counter() - t0
        rpt.write_json(
            os.path.join(args.out, f"certificate_r{r}.json"), cert.to_dict(p.n)
        )
        rows.append((r, cert.J_r, cpu))

    if rows:
        rpt.write_values_csv(os.path.join(args.out, "values.csv"), rows)
        rpt.render_values_figure(os.path.join(args.out, "values.png"), rows)
    if failures:
        rpt.write_json(os.path.join(args.out, "failures.json"), failures)
    _write_manifest(
        args, "solve", ["problem", "order", "orders", "backend", "tol", "seed"]
    )
    if not rows:
        raise CliError(3, "no relaxation order solved; see failures.json")
    return 0


def _initial_expectation(p, phi) -> float:
    return float(
        sum(c * initial_moment(p.initial, a) for a, c in phi.terms.items())
    )


def cmd_certify(args) -> int:
    p = _load(args)
    try:
        with open(args.phi, "r", encoding="utf-8") as fh:
            phi_text = fh.read()
    except OSError as exc:
        raise CliError(2, f"cannot read candidate file: {exc}") from None
    try:
        phi = parse_polynomial(phi_text, p.n)
    except ValueError as exc:
        raise CliError(2, f"bad candidate polynomial: {exc}") from None
    try:
        prog = assemble_dual(p, args.order, fixed_phi=phi)
    except ValueError as exc:
        raise CliError(2, str(exc)) from None

    backend = _backend(args)
    sol = _solve_with(backend, to_conic(prog), args.tol)
    if sol.status in ("error", "max_iter"):
        raise CliError(3, f"feasibility solve failed (status {sol.status})")
    grid = validation_grid(p, seed=args.seed)
    residual = subsolution_residual(p, phi, grid)
    threshold = 1e-6 + args.tol
    certified = sol.ok and residual <= threshold

    os.makedirs(args.out, exist_ok=True)
    rpt.write_json(
        os.path.join(args.out, "certify.json"),
        {
            "certified": bool(certified),
            "r": args.order,
            "phi": format_polynomial(phi, p.n),
            "lower_bound": _initial_expectation(p, phi) if certified else None,
            "grid_residual": residual,
            "residual_threshold": threshold,
            "sos_status": sol.status,
        },
    )
    _write_manifest(
        args,
        "certify",
        ["problem", "order", "phi", "backend", "tol", "seed"],
    )
    return 0 if certified else 4


def _state_in_set(p, point) -> bool:
    joint = tuple(point) + (0.0,) * p.m
    for qi in p.q:
        if any(qi.degree_in(i) > 0 for i in range(p.n, p.n + p.m)):
            continue
        if qi(joint) < -1e-9:
            return False
    return True


def _averaging_measure(p):
    """Initial data for the averaged dual and the matching simulation start.

    A point initial condition is widened to the largest sampled ball inside
    the state set (centered at the origin when admissible, else at the
    point); distributed initial data is used as given and simulated from its
    mean.
    """
    if p.initial.kind != "dirac":
        return p.initial, np.asarray(p.initial.mean_point(), dtype=float)
    x0 = np.asarray(p.initial.mean_point(), dtype=float)
    center = np.zeros(p.n) if _state_in_set(p, np.zeros(p.n)) else x0
    box = bounding_box(p)
    if box is None:
        rmax = 1.0
    else:
        rmax = max(0.5 * (hi - lo) for lo, hi in box[: p.n])
    radius = _fit_ball_radius(p, center, rmax)
    if radius <= 1e-6:
        return p.initial, x0
    return InitialMeasure.uniform_ball(center, radius), x0


def cmd_synthesize(args) -> int:
    p = _load(args)
    r = args.order
    backend = _backend(args)
    if args.rho < 0:
        raise CliError(2, "neighborhood radius must be nonnegative")
    mu0, x0 = _averaging_measure(p)
    p_avg = dataclasses.replace(p, initial=mu0)
    p_point = dataclasses.replace(p, initial=InitialMeasure.dirac(tuple(x0)))

    solve_fn = lambda cp: _solve_with(backend, cp, args.tol)

    # in-run lower bound at the same order, for the gap column
    try:
        psol = solve_fn(to_conic(assemble_primal(p_point, r)))
        j_lb = psol.primal_objective if psol.ok else float("nan")
    except ValueError as exc:
        raise CliError(2, str(exc)) from None

    try:
        if args.rho > 0:
            rep = iterative_synthesis(
                p_point,
                r,
                rho=args.rho,
                dt=args.dt,
                tail_tol=args.tail_tol,
                tol=args.tol,
                max_iter=MAX_ITER,
                points_per_dim=args.ugrid,
                j_star=j_lb,
                solve_fn=solve_fn,
            )
        else:
            prog = assemble_dual(p_avg, r)
            dsol = solve_fn(to_conic(prog))
            if not dsol.ok:
                raise RuntimeError(f"averaged dual solve failed (status {dsol.status})")
            phi = phi_from_solution(prog, dsol)
            ok, _ = sign_law_admissible(p)
            law = (
                FeedbackLaw.sign_law(p, phi, {"order": r})
                if ok
                else FeedbackLaw.pointwise(p, phi, args.ugrid, {"order": r})
            )
            rep = simulate_closed_loop(
                p, law, x0, dt=args.dt, tail_tol=args.tail_tol, j_star=j_lb
            )
    except ValueError as exc:
        raise CliError(2, str(exc)) from None
    except TrajectoryEscape as exc:
        raise CliError(3, f"closed loop diverged: {exc}") from None
    except RuntimeError as exc:
        raise CliError(3, str(exc)) from None

    os.makedirs(args.out, exist_ok=True)
    traj = rep.trajectory
    rpt.write_trajectory_csv(os.path.join(args.out, "trajectory.csv"), traj, p.n, p.m)
    rpt.render_trajectory_figure(
        os.path.join(args.out, "trajectory.png"), traj, p.n, p.m
    )
    rpt.write_gap_csv(
        os.path.join(args.out, "gap.csv"),
        [(r, rep.V_u, j_lb, rep.gap_percent)],
    )
    summary = rep.summary_dict()
    summary["r"] = r
    summary["initial_measure"] = mu0.kind
    summary["start"] = [float(v) for v in x0]
    rpt.write_json(os.path.join(args.out, "report.json"), summary)
    _write_manifest(
        args,
        "synthesize",
        [
            "problem",
            "order",
            "backend",
            "tol",
            "dt",
            "tail_tol",
            "rho",
            "ugrid",
            "seed",
        ],
    )
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
