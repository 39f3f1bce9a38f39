"""Optimal control problem data: dynamics, cost, constraints, initial measure.

The controlled system is dx/dt = f(x, u) on the basic semialgebraic set
X x U = {(x, u) : q_i(x, u) >= 0}, with discounted cost
integral of exp(-lambda t) g(x(t), u(t)) dt.  The initial condition is a
probability measure: a dirac at x0, or uniform on a box or ball (the uniform
kinds feed the averaged programs).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .polynomials import (
    MultiIndex,
    Polynomial,
    PolynomialVector,
    format_polynomial,
    parse_polynomial,
)

MEMBERSHIP_TOL = 1e-9
MEMBERSHIP_SAMPLES = 1000


@dataclass(frozen=True)
class InitialMeasure:
    """Initial state distribution.

    kind "dirac" uses point; "uniform_box" uses lo/hi; "uniform_ball" uses
    center/radius.  Vectors are tuples so instances stay hashable.
    """

    kind: str
    point: Tuple[float, ...] = ()
    lo: Tuple[float, ...] = ()
    hi: Tuple[float, ...] = ()
    center: Tuple[float, ...] = ()
    radius: float = 0.0

    @staticmethod
    def dirac(point: Sequence[float]) -> "InitialMeasure":
        return InitialMeasure(kind="dirac", point=tuple(float(v) for v in point))

    @staticmethod
    def uniform_box(lo: Sequence[float], hi: Sequence[float]) -> "InitialMeasure":
        lo = tuple(float(v) for v in lo)
        hi = tuple(float(v) for v in hi)
        if len(lo) != len(hi):
            raise ValueError("box corners must have equal length")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("box must have positive side lengths")
        return InitialMeasure(kind="uniform_box", lo=lo, hi=hi)

    @staticmethod
    def uniform_ball(center: Sequence[float], radius: float) -> "InitialMeasure":
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return InitialMeasure(
            kind="uniform_ball",
            center=tuple(float(v) for v in center),
            radius=float(radius),
        )

    @property
    def dim(self) -> int:
        if self.kind == "dirac":
            return len(self.point)
        if self.kind == "uniform_box":
            return len(self.lo)
        if self.kind == "uniform_ball":
            return len(self.center)
        raise ValueError(f"unknown measure kind {self.kind!r}")

    def mean_point(self) -> Tuple[float, ...]:
        """Dirac point, box midpoint, or ball center."""
        if self.kind == "dirac":
            return self.point
        if self.kind == "uniform_box":
            return tuple(0.5 * (l + h) for l, h in zip(self.lo, self.hi))
        return self.center

    def sample_points(self, count: int, seed: int = 0) -> np.ndarray:
        """Deterministic low-discrepancy support samples, shape (count, dim)."""
        n = self.dim
        if self.kind == "dirac":
            return np.tile(np.asarray(self.point), (1, 1))
        from scipy.stats import norm, qmc

        if self.kind == "uniform_box":
            pts = qmc.Halton(d=n, scramble=False, seed=seed).random(count)
            lo = np.asarray(self.lo)
            hi = np.asarray(self.hi)
            return lo + pts * (hi - lo)
        # ball: Gaussian-mapped direction plus inverse-CDF radius; the radius
        # draws come from their own Halton dimension so they stay independent
        # of the direction coordinates
        joint = qmc.Halton(d=n + 1, scramble=False, seed=seed).random(count)
        z = norm.ppf(np.clip(joint[:, :n], 1e-12, 1.0 - 1e-12))
        norms = np.linalg.norm(z, axis=1)
        norms[norms == 0] = 1.0
        radii = self.radius * np.power(joint[:, n], 1.0 / n)
        return np.asarray(self.center) + z / norms[:, None] * radii[:, None]


@dataclass(frozen=True)
class OcpProblem:
    """Polynomial optimal control problem with discounted cost.

    n, m: state and input dimensions (m = 0 means uncontrolled dynamics).
    f: n dynamics components, each over the n+m joint variables.
    g: running cost over the joint variables.
    lam: discount factor, positive.
    q: constraint polynomials cutting out X x U as {q_i >= 0}.
    initial: initial state measure.
    """

    n: int
    m: int
    f: PolynomialVector
    g: Polynomial
    lam: float
    q: Tuple[Polynomial, ...]
    initial: InitialMeasure

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(self.q))
        if not isinstance(self.f, PolynomialVector):
            object.__setattr__(self, "f", PolynomialVector(self.f))

    @property
    def num_vars(self) -> int:
        return self.n + self.m


def _ball_constraint_term(p: Polynomial) -> float | None:
    """If p has the shape K - sum of squares over all variables, return K."""
    nv = p.num_vars
    zero = (0,) * nv
    K = p.coefficient(zero)
    if K <= 0:
        return None
    expected = {zero}
    for i in range(nv):
        e = [0] * nv
        e[i] = 2
        if p.coefficient(tuple(e)) >= 0:
            return None
        expected.add(tuple(e))
    if set(p.terms) != expected:
        return None
    return K


def validate(p: OcpProblem) -> List[str]:
    """Structural checks; returns findings, errors prefixed 'error:'.

    Dimension mismatches, nonpositive discount, and empty constraint lists are
    errors.  A missing ball-shaped constraint (needed for the positivity
    certificates to be complete) and a discount factor at or below a sampled
    Lipschitz bound of f are warnings only.
    """
    findings: List[str] = []
    nv = p.n + p.m
    if p.n < 1:
        findings.append("error: state dimension must be at least 1")
    if p.m < 0:
        findings.append("error: input dimension must be nonnegative")
    if p.lam <= 0:
        findings.append("error: discount factor must be positive")
    if len(p.f) != p.n:
        findings.append(f"error: dynamics must have {p.n} components, got {len(p.f)}")
    if p.f.num_vars != nv:
        findings.append(
            f"error: dynamics use {p.f.num_vars} variables, expected {nv}"
        )
    if p.g.num_vars != nv:
        findings.append(f"error: cost uses {p.g.num_vars} variables, expected {nv}")
    if not p.q:
        findings.append("error: constraint list must be nonempty")
    for k, qi in enumerate(p.q):
        if qi.num_vars != nv:
            findings.append(
                f"error: constraint {k} uses {qi.num_vars} variables, expected {nv}"
            )
    if findings:
        return findings

    if not any(_ball_constraint_term(qi) is not None for qi in p.q):
        findings.append(
            "warning: no ball-type constraint (K - sum of squares) found; "
            "compactness certificate unavailable, bounds may be meaningless"
        )

    try:
        meas = p.initial
        if meas.dim != p.n:
            findings.append(
                f"error: initial measure dimension {meas.dim}, expected {p.n}"
            )
        else:
            pts = meas.sample_points(MEMBERSHIP_SAMPLES if meas.kind != "dirac" else 1)
            worst = 0.0
            for qi in p.q:
                # only pure-state constraints define X; skip input-dependent ones
                if any(qi.degree_in(i) > 0 for i in range(p.n, nv)):
                    continue
                for row in pts:
                    val = qi(tuple(row) + (0.0,) * p.m)
                    worst = min(worst, val)
            if worst < -MEMBERSHIP_TOL:
                findings.append(
                    f"error: initial measure support leaves the state set "
                    f"(worst margin {worst:.3e})"
                )
    except ValueError as exc:
        findings.append(f"error: initial measure invalid ({exc})")

    lip = _sampled_lipschitz(p)
    if lip is not None and p.lam <= lip:
        findings.append(
            f"warning: discount factor {p.lam:g} <= sampled Lipschitz bound "
            f"{lip:.3g} of the dynamics; theoretical equivalence not guaranteed"
        )
    return findings


def _sampled_lipschitz(p: OcpProblem, grid: int = 6) -> float | None:
    """Max Jacobian row-sum norm of f over a coarse grid of the bounding box."""
    box = bounding_box(p)
    if box is None:
        return None
    axes = [np.linspace(lo, hi, grid) for lo, hi in box]
    mesh = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    derivs = [
        [p.f[k].partial_derivative(i) for i in range(p.n)] for k in range(p.n)
    ]
    worst = 0.0
    for pt in mesh:
        t = tuple(pt)
        for row in derivs:
            s = sum(abs(d(t)) for d in row)
            worst = max(worst, s)
    return worst


def bounding_box(p: OcpProblem) -> List[Tuple[float, float]] | None:
    """Per-variable interval bounds implied by the constraints.

    Uses single-variable terms c - x_i^2 and ball terms K - sum of squares;
    returns None when some variable has no bound of either shape.
    """
    nv = p.n + p.m
    bounds = [math.inf] * nv
    for qi in p.q:
        K = _ball_constraint_term(qi)
        if K is not None:
            for i in range(nv):
                bounds[i] = min(bounds[i], math.sqrt(K))
            continue
        # partial ball: c - sum of squares over a subset, no other terms
        zero = (0,) * nv
        c0 = qi.coefficient(zero)
        if c0 <= 0:
            continue
        sq_vars = []
        ok = True
        for e, cv in qi.terms.items():
            if e == zero:
                continue
            nz = [i for i, a in enumerate(e) if a]
            if len(nz) == 1 and e[nz[0]] == 2 and cv < 0:
                sq_vars.append((nz[0], -cv))
            else:
                ok = False
                break
        if ok and sq_vars:
            for i, cv in sq_vars:
                bounds[i] = min(bounds[i], math.sqrt(c0 / cv))
    if any(not math.isfinite(b) for b in bounds):
        return None
    return [(-b, b) for b in bounds]


def augment_ball(p: OcpProblem, K: float) -> OcpProblem:
    """Append the redundant ball constraint K - |x|^2 - |u|^2 >= 0.

    Makes the positivity certificates complete when X x U already fits
    inside the radius-sqrt(K) ball.  Idempotent: an identical existing
    constraint is not duplicated.
    """
    if K <= 0:
        raise ValueError("ball constant K must be positive")
    nv = p.n + p.m
    terms: Dict[MultiIndex, float] = {(0,) * nv: float(K)}
    for i in range(nv):
        e = [0] * nv
        e[i] = 2
        terms[tuple(e)] = -1.0
    ball = Polynomial(nv, terms)
    if any(qi == ball for qi in p.q):
        return p
    return OcpProblem(
        n=p.n, m=p.m, f=p.f, g=p.g, lam=p.lam, q=p.q + (ball,), initial=p.initial
    )


# -- moments of the initial measure ---------------------------------------


def initial_moment(meas: InitialMeasure, alpha: MultiIndex) -> float:
    """Moment integral of x^alpha against the initial measure."""
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != meas.dim:
        raise ValueError(
            f"multi-index length {len(alpha)} does not match measure dimension {meas.dim}"
        )
    if meas.kind == "dirac":
        out = 1.0
        for xi, a in zip(meas.point, alpha):
            out *= xi**a
        return out
    if meas.kind == "uniform_box":
        out = 1.0
        for lo, hi, a in zip(meas.lo, meas.hi, alpha):
            out *= (hi ** (a + 1) - lo ** (a + 1)) / ((a + 1) * (hi - lo))
        return out
    if meas.kind == "uniform_ball":
        return _ball_moment(meas.center, meas.radius, alpha)
    raise ValueError(f"unknown measure kind {meas.kind!r}")


def _centered_unit_ball_moment(alpha: Tuple[int, ...]) -> float:
    """Moment of x^alpha for the uniform measure on the unit ball.

    Zero when any exponent is odd.  Otherwise integrate over the sphere with
    the Gamma-function surface formula and radially against r^{|alpha|+n-1},
    then normalize by the ball volume.
    """
    if any(a % 2 for a in alpha):
        return 0.0
    n = len(alpha)
    d = sum(alpha)
    surf = 2.0
    for a in alpha:
        surf *= math.gamma((a + 1) / 2.0)
    surf /= math.gamma((n + d) / 2.0)
    vol_integral = surf / (n + d)
    ball_volume = math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)
    return vol_integral / ball_volume


def _ball_moment(center: Tuple[float, ...], radius: float, alpha: Tuple[int, ...]) -> float:
    # shift/scale via the per-coordinate binomial expansion of (c_i + R t_i)^a_i
    n = len(alpha)

    def expand(i: int, expo: List[int], coef: float) -> float:
        if i == n:
            return coef * _centered_unit_ball_moment(tuple(expo)) * radius ** sum(expo)
        total = 0.0
        a = alpha[i]
        c = center[i]
        for k in range(a + 1):
            expo.append(k)
            total += expand(i + 1, expo, coef * math.comb(a, k) * c ** (a - k))
            expo.pop()
        return total

    return expand(0, [], 1.0)


# -- JSON problem files ----------------------------------------------------


def problem_from_dict(doc: dict) -> OcpProblem:
    """Build a problem from the JSON document structure."""
    try:
        n = int(doc["n"])
        m = int(doc["m"])
        lam = float(doc["lambda"])
        dyn = list(doc["dynamics"])
        cost = doc["cost"]
        cons = list(doc["constraints"])
        init = dict(doc["initial"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"problem document missing field: {exc}") from None
    if len(dyn) != n:
        raise ValueError(f"expected {n} dynamics entries, got {len(dyn)}")
    f = PolynomialVector([parse_polynomial(s, n, m) for s in dyn])
    g = parse_polynomial(cost, n, m)
    q = tuple(parse_polynomial(s, n, m) for s in cons)
    kind = init.get("kind")
    if kind == "dirac":
        meas = InitialMeasure.dirac(init["point"])
    elif kind == "uniform_box":
        meas = InitialMeasure.uniform_box(init["lo"], init["hi"])
    elif kind == "uniform_ball":
        meas = InitialMeasure.uniform_ball(init["center"], init["radius"])
    else:
        raise ValueError(f"unknown initial measure kind {kind!r}")
    return OcpProblem(n=n, m=m, f=f, g=g, lam=lam, q=q, initial=meas)


def problem_to_dict(p: OcpProblem) -> dict:
    init: dict = {"kind": p.initial.kind}
    if p.initial.kind == "dirac":
        init["point"] = list(p.initial.point)
    elif p.initial.kind == "uniform_box":
        init["lo"] = list(p.initial.lo)
        init["hi"] = list(p.initial.hi)
    else:
        init["center"] = list(p.initial.center)
        init["radius"] = p.initial.radius
    return {
        "n": p.n,
        "m": p.m,
        "lambda": p.lam,
        "dynamics": [format_polynomial(fk, p.n) for fk in p.f],
        "cost": format_polynomial(p.g, p.n),
        "constraints": [format_polynomial(qi, p.n) for qi in p.q],
        "initial": init,
    }


def load_problem(path) -> OcpProblem:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    prob = problem_from_dict(doc)
    findings = validate(prob)
    errors = [x for x in findings if x.startswith("error:")]
    if errors:
        raise ValueError("; ".join(errors))
    return prob


def save_problem(p: OcpProblem, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(problem_to_dict(p), fh, indent=2)
        fh.write("\n")
