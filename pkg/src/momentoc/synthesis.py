"""Feedback extraction from dual certificates and closed-loop evaluation.

A solved dual polynomial phi induces the pointwise law

    u(x) = argmin over U of  g(x, u) - (A phi)(x, u),

computed on a uniform control grid with deterministic lexicographic
tie-breaking.  When the data are affine in a scalar input and the cost is
input-independent, the argmin collapses to a bang-bang sign law on the
u-coefficient.  Closed loops run classical fixed-step RK4 with
sample-and-hold control; the discounted cost rides along as an extra state,
so the quadrature order matches the integrator.  Constraint violations are
logged, never projected away; only escaping twice the bounding box aborts.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .polynomials import (
    Polynomial,
    apply_generator,
    compile_evaluator,
    evaluate_many,
)
from .problem import InitialMeasure, OcpProblem, bounding_box
from .relaxation import validation_grid

DEFAULT_DT = 1e-3
DEFAULT_TAIL_TOL = 1e-4
DEFAULT_RHO = 0.25
DEFAULT_UGRID = 201
STATE_TOL = 1e-6


class TrajectoryEscape(RuntimeError):
    """Closed loop left twice the bounding box; the law is inadmissible."""

    def __init__(self, t: float, state):
        super().__init__(
            f"state escaped twice the constraint bounding box at t={t:.4f}: {state}"
        )
        self.t = t
        self.state = np.asarray(state)


def _lagrangian(p: OcpProblem, phi: Polynomial) -> Polynomial:
    return p.g - apply_generator(phi, p.f, p.lam)


def _u_box(p: OcpProblem) -> List[Tuple[float, float]]:
    box = bounding_box(p)
    if box is None:
        return [(-1.0, 1.0)] * p.m
    return box[p.n :]


def sign_law_admissible(p: OcpProblem) -> Tuple[bool, str]:
    if p.m != 1:
        return False, f"sign law needs exactly one input, problem has {p.m}"
    u_slot = p.n
    fdeg_u = max(fk.degree_in(u_slot) for fk in p.f)
    if fdeg_u != 1:
        return False, f"dynamics must be affine in the input (degree in u is {fdeg_u})"
    if p.g.degree_in(u_slot) != 0:
        return False, "cost must not depend on the input"
    return True, ""


class FeedbackLaw:
    """State feedback computed from a dual polynomial.

    kind is "sign_law" or "pointwise_argmin"; calling the law with a state
    vector returns the control vector.  metadata carries provenance (order r,
    certificate label) for reports.
    """

    def __init__(self, kind: str, phi: Polynomial, control_fn, metadata=None):
        self.kind = kind
        self.phi = phi
        self._control_fn = control_fn
        self.metadata = dict(metadata or {})

    def __call__(self, x) -> np.ndarray:
        return self._control_fn(x)

    @staticmethod
    def sign_law(p: OcpProblem, phi: Polynomial, metadata=None) -> "FeedbackLaw":
        ok, reason = sign_law_admissible(p)
        if not ok:
            raise ValueError(reason)
        lag = _lagrangian(p, phi)
        # affine in u: lagrangian = a(x) + cu(x) u; minimizer is a bound of U
        cu = lag.partial_derivative(p.n)
        cu_eval = compile_evaluator(cu)
        lo, hi = _u_box(p)[0]

        def control(x):
            v = tuple(x) + (0.0,)
            c = cu_eval(v)
            return np.array([hi if c < 0.0 else lo])

        return FeedbackLaw("sign_law", phi, control, metadata)

    @staticmethod
    def pointwise(
        p: OcpProblem,
        phi: Polynomial,
        points_per_dim: int = DEFAULT_UGRID,
        metadata=None,
    ) -> "FeedbackLaw":
        if p.m == 0:
            def control0(x):
                return np.zeros(0)

            return FeedbackLaw("pointwise_argmin", phi, control0, metadata)
        if points_per_dim < 1:
            raise ValueError("control grid needs at least one point per dimension")
        lag = _lagrangian(p, phi)
        axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in _u_box(p)]
        # lexicographically ascending grid; first argmin hit is the lex-smallest tie
        grid = np.array(list(itertools.product(*axes)))

        def control(x):
            joint = np.empty((grid.shape[0], p.n + p.m))
            joint[:, : p.n] = np.asarray(x)
            joint[:, p.n :] = grid
            vals = evaluate_many(lag, joint)
            return grid[int(np.argmin(vals))].copy()

        return FeedbackLaw("pointwise_argmin", phi, control, metadata)


def pointwise_control(
    p: OcpProblem, phi: Polynomial, x, points_per_dim: int = DEFAULT_UGRID
) -> np.ndarray:
    """Grid argmin of the control Lagrangian at one state."""
    return FeedbackLaw.pointwise(p, phi, points_per_dim)(x)


def sign_law_control(p: OcpProblem, phi: Polynomial, x) -> float:
    """Bang-bang minimizer of the u-linear Lagrangian term at one state."""
    return float(FeedbackLaw.sign_law(p, phi)(x)[0])


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    running_cost: np.ndarray

    def __len__(self):
        return len(self.times)


@dataclass
class ClosedLoopReport:
    V_u: float
    J_star: float
    gap_percent: float
    trajectory: Trajectory
    violations: Dict[str, float]
    truncation_bound: float
    law_kind: str
    horizon: float
    dt: float
    partial: bool = False
    segments: List[dict] = dataclasses.field(default_factory=list)

    def summary_dict(self) -> dict:
        out = {
            "V_u": self.V_u,
            "J_star": self.J_star,
            "gap_percent": self.gap_percent,
            "violations": dict(self.violations),
            "truncation_bound": self.truncation_bound,
            "law_kind": self.law_kind,
            "horizon": self.horizon,
            "dt": self.dt,
            "partial": self.partial,
        }
        if self.segments:
            out["segments"] = list(self.segments)
        return out


def grid_sup_cost(p: OcpProblem) -> float:
    grid = validation_grid(p)
    if len(grid) == 0:
        return 0.0
    return float(np.max(np.abs(evaluate_many(p.g, grid))))


def horizon_for(p: OcpProblem, tail_tol: float, sup_g: float | None = None) -> float:
    """Smallest T with exp(-lam T) sup|g| / lam <= tail_tol."""
    if sup_g is None:
        sup_g = grid_sup_cost(p)
    if sup_g <= tail_tol * p.lam:
        return 0.0
    return math.log(sup_g / (p.lam * tail_tol)) / p.lam


def _simulate_segment(
    p: OcpProblem,
    law: FeedbackLaw,
    x0: np.ndarray,
    t0: float,
    t_end: float,
    dt: float,
    escape_box: List[Tuple[float, float]] | None,
    stop: Callable[[np.ndarray], bool] | None = None,
):
    """Fixed-step RK4 from t0 to t_end (or until stop(x)); returns samples.

    The discounted cost integrand exp(-lam t) g is integrated as an extra
    state so quadrature error matches the integrator order.  Control is held
    constant over each step.
    """
    f_evals = [compile_evaluator(fk) for fk in p.f]
    g_eval = compile_evaluator(p.g)
    lam = p.lam
    n, m = p.n, p.m

    times = [t0]
    states = [np.asarray(x0, dtype=float).copy()]
    controls = []
    costs = [0.0]

    x = np.asarray(x0, dtype=float).copy()
    cost = 0.0
    t = t0
    steps = max(0, int(math.ceil((t_end - t0) / dt - 1e-12)))

    def rhs(xv, u, tv):
        v = tuple(xv) + tuple(u)
        dx = np.array([fe(v) for fe in f_evals])
        dc = math.exp(-lam * tv) * g_eval(v)
        return dx, dc

    for k in range(steps):
        u = law(x)
        k1x, k1c = rhs(x, u, t)
        k2x, k2c = rhs(x + 0.5 * dt * k1x, u, t + 0.5 * dt)
        k3x, k3c = rhs(x + 0.5 * dt * k2x, u, t + 0.5 * dt)
        k4x, k4c = rhs(x + dt * k3x, u, t + dt)
        x = x + (dt / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        cost = cost + (dt / 6.0) * (k1c + 2 * k2c + 2 * k3c + k4c)
        t = t0 + (k + 1) * dt

        if escape_box is not None:
            for i in range(n):
                lo, hi = escape_box[i]
                if x[i] < 2.0 * lo or x[i] > 2.0 * hi:
                    raise TrajectoryEscape(t, x)

        controls.append(np.asarray(u, dtype=float))
        times.append(t)
        states.append(x.copy())
        costs.append(cost)
        if stop is not None and stop(x):
            break

    controls.append(law(x) if len(states) else np.zeros(m))
    return (
        np.array(times),
        np.array(states),
        np.array(controls[: len(times)]) if m else np.zeros((len(times), 0)),
        np.array(costs),
    )


def _violation_summary(p: OcpProblem, states: np.ndarray, controls: np.ndarray) -> Dict[str, float]:
    if len(states) == 0:
        return {"count": 0, "max_depth": 0.0}
    joint = np.hstack([states, controls]) if p.m else states
    worst = np.zeros(len(joint))
    for qi in p.q:
        vals = evaluate_many(qi, joint)
        worst = np.minimum(worst, vals)
    depth = np.maximum(0.0, -worst)
    bad = depth > STATE_TOL
    return {"count": int(bad.sum()), "max_depth": float(depth.max())}


def simulate_closed_loop(
    p: OcpProblem,
    law: FeedbackLaw,
    x0,
    dt: float = DEFAULT_DT,
    tail_tol: float = DEFAULT_TAIL_TOL,
    j_star: float = float("nan"),
    horizon: float | None = None,
) -> ClosedLoopReport:
    """Run the loop to the discount horizon and report the achieved cost."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    if tail_tol <= 0:
        raise ValueError("tail tolerance must be positive")
    sup_g = grid_sup_cost(p)
    T = horizon if horizon is not None else horizon_for(p, tail_tol, sup_g)
    T = max(T, dt)
    box = bounding_box(p)
    escape = box[: p.n] if box is not None else None

    times, states, controls, costs = _simulate_segment(
        p, law, np.asarray(x0, dtype=float), 0.0, T, dt, escape
    )
    V_u = float(costs[-1])
    trunc = math.exp(-p.lam * T) * sup_g / p.lam
    gap = 100.0 * (V_u - j_star) / j_star if math.isfinite(j_star) and j_star != 0 else float("nan")
    return ClosedLoopReport(
        V_u=V_u,
        J_star=j_star,
        gap_percent=gap,
        trajectory=Trajectory(times, states, controls, costs),
        violations=_violation_summary(p, states, controls),
        truncation_bound=trunc,
        law_kind=law.kind,
        horizon=T,
        dt=dt,
    )


# -- iterative neighborhood synthesis --------------------------------------


def _fit_ball_radius(p: OcpProblem, center: np.ndarray, rho: float) -> float:
    """Largest radius <= rho whose ball passes the sampled membership check."""

    def fits(radius: float) -> bool:
        meas = InitialMeasure.uniform_ball(center, radius)
        pts = meas.sample_points(200)
        for qi in p.q:
            if any(qi.degree_in(i) > 0 for i in range(p.n, p.n + p.m)):
                continue
            vals = evaluate_many(qi, np.hstack([pts, np.zeros((len(pts), p.m))]) if p.m else pts)
            if np.min(vals) < -1e-9:
                return False
        return True

    if fits(rho):
        return rho
    lo, hi = 0.0, rho
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if mid == 0.0:
            break
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


def iterative_synthesis(
    p: OcpProblem,
    r: int,
    rho: float = DEFAULT_RHO,
    dt: float = DEFAULT_DT,
    tail_tol: float = DEFAULT_TAIL_TOL,
    budget: int = 50,
    tol: float = 1e-8,
    max_iter: int = 200,
    points_per_dim: int = DEFAULT_UGRID,
    j_star: float = float("nan"),
    solve_fn: Callable | None = None,
) -> ClosedLoopReport:
    """Segment-wise synthesis with locally averaged duals.

    From the current state, solve the dual averaged over a neighborhood ball
    (shrunk to stay inside the state set, falling back to a point mass),
    apply the extracted law until the state leaves the ball, and repeat until
    the discount horizon or the re-solve budget runs out.  solve_fn replaces
    the in-process conic solver when given.
    """
    from .relaxation import assemble_dual, phi_from_solution, to_conic
    from .solver import solve

    if rho <= 0:
        raise ValueError("neighborhood radius must be positive")
    if budget < 1:
        raise ValueError("re-solve budget must be at least 1")
    if solve_fn is None:
        solve_fn = lambda cp: solve(cp, tol=tol, max_iter=max_iter)

    x0 = np.asarray(p.initial.mean_point(), dtype=float)
    sup_g = grid_sup_cost(p)
    T = max(horizon_for(p, tail_tol, sup_g), dt)
    box = bounding_box(p)
    escape = box[: p.n] if box is not None else None

    all_t: List[np.ndarray] = []
    all_x: List[np.ndarray] = []
    all_u: List[np.ndarray] = []
    all_c: List[np.ndarray] = []
    segments: List[dict] = []
    x = x0.copy()
    t = 0.0
    cost_base = 0.0
    partial = False

    for seg_no in range(budget):
        center = x.copy()
        radius = _fit_ball_radius(p, center, rho)
        if radius > 1e-6:
            meas = InitialMeasure.uniform_ball(center, radius)
        else:
            meas = InitialMeasure.dirac(center)
        local = dataclasses.replace(p, initial=meas)
        prog = assemble_dual(local, r)
        sol = solve_fn(to_conic(prog))
        if not sol.ok:
            raise RuntimeError(
                f"averaged dual solve failed on segment {seg_no} "
                f"(status {sol.status})"
            )
        phi = phi_from_solution(prog, sol)
        ok, _reason = sign_law_admissible(p)
        law = (
            FeedbackLaw.sign_law(p, phi, {"segment": seg_no})
            if ok
            else FeedbackLaw.pointwise(p, phi, points_per_dim, {"segment": seg_no})
        )

        def outside(state):
            return float(np.linalg.norm(state - center)) > rho

        ts, xs, us, cs = _simulate_segment(p, law, x, t, T, dt, escape, stop=outside)
        segments.append(
            {
                "segment": seg_no,
                "t_start": t,
                "center": center.tolist(),
                "radius": radius,
                "measure": meas.kind,
                "steps": len(ts) - 1,
            }
        )
        drop = 1 if all_t else 0  # first sample repeats the previous segment end
        all_t.append(ts[drop:])
        all_x.append(xs[drop:])
        all_u.append(us[drop:])
        all_c.append(cost_base + cs[drop:])
        x = xs[-1].copy()
        t = float(ts[-1])
        cost_base = cost_base + float(cs[-1])
        if t >= T - 0.5 * dt:
            break
    else:
        partial = True

    times = np.concatenate(all_t)
    states = np.concatenate(all_x)
    controls = np.concatenate(all_u)
    costs = np.concatenate(all_c)
    V_u = float(costs[-1])
    trunc = math.exp(-p.lam * max(t, dt)) * sup_g / p.lam
    gap = 100.0 * (V_u - j_star) / j_star if math.isfinite(j_star) and j_star != 0 else float("nan")
    return ClosedLoopReport(
        V_u=V_u,
        J_star=j_star,
        gap_percent=gap,
        trajectory=Trajectory(times, states, controls, costs),
        violations=_violation_summary(p, states, controls),
        truncation_bound=trunc,
        law_kind="iterative",
        horizon=float(t),
        dt=dt,
        partial=partial,
        segments=segments,
    )
