"""Sparse multivariate polynomials in the graded-lex monomial basis.

A multi-index is a tuple of nonnegative integer exponents, one per variable.
Polynomials map multi-indices to float coefficients; zero coefficients are
never stored.  Graded lexicographic order (total degree first, then lex with
the first variable largest) is the canonical ordering used everywhere:
monomial bases, moment vectors, matrix rows.

The generator of the discounted flow acts on a state polynomial phi as

    (A phi)(x, u) = lambda * phi(x) - grad phi(x) . f(x, u),

which is the linear operator whose subsolutions lower-bound the value
function.  ``apply_generator`` and ``h_alpha`` implement it exactly in
coefficient arithmetic.
"""

from __future__ import annotations

import math
import re
from typing import Dict, Iterable, List, Sequence, Tuple

MultiIndex = Tuple[int, ...]


def index_degree(alpha: MultiIndex) -> int:
    """Total degree |alpha| of a monomial exponent."""
    return sum(alpha)


def monomial_count(num_vars: int, d: int) -> int:
    """Number of monomials of degree <= d in num_vars variables."""
    return math.comb(num_vars + d, d)


def monomials_up_to(num_vars: int, d: int) -> List[MultiIndex]:
    """All multi-indices with |alpha| <= d, in graded-lex order.

    Within one degree, lex order with x1 ranked highest: (2,0) before (1,1)
    before (0,2).  The first element is always the zero index.
    """
    if num_vars < 1:
        raise ValueError("num_vars must be >= 1")
    if d < 0:
        raise ValueError("degree bound must be >= 0")

    def fixed_degree(prefix: MultiIndex, rem: int, k: int):
        if k == 1:
            yield prefix + (rem,)
            return
        for e in range(rem, -1, -1):
            yield from fixed_degree(prefix + (e,), rem - e, k - 1)

    out: List[MultiIndex] = []
    for deg in range(d + 1):
        out.extend(fixed_degree((), deg, num_vars))
    return out


def grlex_key(alpha: MultiIndex) -> Tuple[int, Tuple[int, ...]]:
    """Sort key realizing the graded-lex order used by monomials_up_to."""
    return (sum(alpha), tuple(-a for a in alpha))


class Polynomial:
    """Immutable sparse polynomial with float coefficients.

    terms: dict mapping exponent tuple -> nonzero coefficient.  The zero
    polynomial has an empty dict and degree 0 by convention.
    """

    __slots__ = ("num_vars", "terms")

    def __init__(self, num_vars: int, terms: Dict[MultiIndex, float] | None = None):
        if num_vars < 1:
            raise ValueError("num_vars must be >= 1")
        clean: Dict[MultiIndex, float] = {}
        for e, c in (terms or {}).items():
            if len(e) != num_vars:
                raise ValueError(f"exponent {e} has wrong length for {num_vars} variables")
            if any(x < 0 for x in e):
                raise ValueError(f"negative exponent in {e}")
            c = float(c)
            if c != 0.0:
                clean[tuple(int(x) for x in e)] = c
        object.__setattr__(self, "num_vars", num_vars)
        object.__setattr__(self, "terms", clean)

    def __setattr__(self, name, value):
        raise AttributeError("Polynomial is immutable")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(num_vars: int) -> "Polynomial":
        return Polynomial(num_vars, {})

    @staticmethod
    def constant(num_vars: int, c: float) -> "Polynomial":
        return Polynomial(num_vars, {(0,) * num_vars: c})

    @staticmethod
    def variable(num_vars: int, i: int) -> "Polynomial":
        if not 0 <= i < num_vars:
            raise ValueError(f"variable index {i} out of range for {num_vars} variables")
        e = [0] * num_vars
        e[i] = 1
        return Polynomial(num_vars, {tuple(e): 1.0})

    @staticmethod
    def monomial(alpha: MultiIndex, coeff: float = 1.0) -> "Polynomial":
        return Polynomial(len(alpha), {tuple(alpha): coeff})

    # -- queries -----------------------------------------------------------

    def degree(self) -> int:
        """Max |alpha| over stored terms; 0 for the zero polynomial."""
        return max((sum(e) for e in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, alpha: MultiIndex) -> float:
        return self.terms.get(tuple(alpha), 0.0)

    def degree_in(self, i: int) -> int:
        """Max exponent of variable i over stored terms."""
        return max((e[i] for e in self.terms), default=0)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Polynomial)
            and self.num_vars == other.num_vars
            and self.terms == other.terms
        )

    def __hash__(self):
        return hash((self.num_vars, frozenset(self.terms.items())))

    # -- arithmetic --------------------------------------------------------

    def _check_vars(self, other: "Polynomial"):
        if self.num_vars != other.num_vars:
            raise ValueError(
                f"variable count mismatch: {self.num_vars} vs {other.num_vars}"
            )

    def __add__(self, other: "Polynomial") -> "Polynomial":
        self._check_vars(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + c
        return Polynomial(self.num_vars, out)

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        self._check_vars(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) - c
        return Polynomial(self.num_vars, out)

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        self._check_vars(other)
        out: Dict[MultiIndex, float] = {}
        for ea, ca in self.terms.items():
            for eb, cb in other.terms.items():
                e = tuple(x + y for x, y in zip(ea, eb))
                out[e] = out.get(e, 0.0) + ca * cb
        return Polynomial(self.num_vars, out)

    def __neg__(self) -> "Polynomial":
        return self.scale(-1.0)

    def scale(self, c: float) -> "Polynomial":
        return Polynomial(self.num_vars, {e: cv * c for e, cv in self.terms.items()})

    def partial_derivative(self, i: int) -> "Polynomial":
        """Exact derivative with respect to variable i."""
        if not 0 <= i < self.num_vars:
            raise ValueError(f"variable index {i} out of range for {self.num_vars} variables")
        out: Dict[MultiIndex, float] = {}
        for e, c in self.terms.items():
            if e[i] > 0:
                e2 = tuple(x - 1 if j == i else x for j, x in enumerate(e))
                out[e2] = out.get(e2, 0.0) + c * e[i]
        return Polynomial(self.num_vars, out)

    # -- evaluation --------------------------------------------------------

    def __call__(self, point: Sequence[float]) -> float:
        """Evaluate at a point, summing terms in graded-lex ascending order."""
        if len(point) != self.num_vars:
            raise ValueError(f"point has {len(point)} coordinates, expected {self.num_vars}")
        total = 0.0
        for e in sorted(self.terms, key=grlex_key):
            v = self.terms[e]
            for xi, ei in zip(point, e):
                if ei:
                    v *= xi**ei
            total += v
        return total

    def lift(self, num_vars: int, positions: Sequence[int] | None = None) -> "Polynomial":
        """Embed into a larger variable space.

        positions[k] is the slot the current variable k occupies in the new
        space; defaults to the first num_vars slots.
        """
        if num_vars < self.num_vars:
            raise ValueError("cannot lift to fewer variables")
        if positions is None:
            positions = list(range(self.num_vars))
        out: Dict[MultiIndex, float] = {}
        for e, c in self.terms.items():
            e2 = [0] * num_vars
            for k, ek in enumerate(e):
                e2[positions[k]] = ek
        # separate loop keeps the common path allocation-light
            out[tuple(e2)] = c
        return Polynomial(num_vars, out)

    def __repr__(self):
        return f"Polynomial({self.num_vars}, {format_polynomial(self)!r})"


class PolynomialVector:
    """A list of polynomials sharing one variable layout (e.g. the dynamics f)."""

    __slots__ = ("components",)

    def __init__(self, components: Iterable[Polynomial]):
        comps = list(components)
        if not comps:
            raise ValueError("empty polynomial vector")
        nv = comps[0].num_vars
        for c in comps:
            if c.num_vars != nv:
                raise ValueError("all components must share num_vars")
        object.__setattr__(self, "components", comps)

    def __setattr__(self, name, value):
        raise AttributeError("PolynomialVector is immutable")

    @property
    def num_vars(self) -> int:
        return self.components[0].num_vars

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, k: int) -> Polynomial:
        return self.components[k]

    def __eq__(self, other):
        if not isinstance(other, PolynomialVector):
            return NotImplemented
        return self.components == other.components

    def __hash__(self):
        return hash(tuple(self.components))

    def degree(self) -> int:
        return max(c.degree() for c in self.components)


def apply_generator(phi: Polynomial, f: PolynomialVector, lam: float) -> Polynomial:
    """(A phi)(x, u) = lam * phi(x) - sum_k dphi/dx_k * f_k(x, u).

    phi lives in the n state variables; each f_k lives in the n + m joint
    variables.  The result is a polynomial in the joint variables.
    """
    if lam <= 0:
        raise ValueError("discount factor must be positive")
    if not isinstance(f, PolynomialVector):
        f = PolynomialVector(f)
    n = phi.num_vars
    nm = f.num_vars
    if len(f) != n or nm < n:
        raise ValueError(
            f"dynamics must have {n} components in at least {n} variables, "
            f"got {len(f)} components in {nm}"
        )
    out = phi.lift(nm).scale(lam)
    for k in range(n):
        dphi = phi.partial_derivative(k).lift(nm)
        out = out - dphi * f[k]
    return out


def h_alpha(alpha: MultiIndex, f: PolynomialVector, lam: float) -> Polynomial:
    """Generator applied to the monomial x^alpha: lam x^alpha - grad x^alpha . f."""
    return apply_generator(Polynomial.monomial(alpha), f, lam)


def generator_degree_bound(alpha: MultiIndex, f_degree: int) -> int:
    """Degree bound for h_alpha from the declared dynamics degree.

    max(|alpha|, |alpha| - 1 + deg f); used to enumerate test monomials for a
    truncation order, independent of coefficient cancellations.
    """
    d = index_degree(alpha)
    if d == 0:
        return 0
    return max(d, d - 1 + f_degree)


def evaluate_many(p: Polynomial, points) -> "np.ndarray":
    """Evaluate at an (N, num_vars) array of points.

    Terms are summed in graded-lex ascending order, matching scalar
    evaluation.
    """
    import numpy as np

    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or X.shape[1] != p.num_vars:
        raise ValueError(f"points must have shape (N, {p.num_vars})")
    out = np.zeros(X.shape[0])
    for e in sorted(p.terms, key=grlex_key):
        term = np.full(X.shape[0], p.terms[e])
        for i, ei in enumerate(e):
            if ei:
                term = term * X[:, i] ** ei
        out += term
    return out


def compile_evaluator(p: Polynomial):
    """Build a fast scalar evaluator closure.

    Generates a plain arithmetic expression (terms in graded-lex ascending
    order, so the summation order matches __call__) and compiles it once;
    the returned callable takes an indexable point.  Used in simulation
    loops where per-call overhead matters.
    """
    if p.is_zero():
        return lambda v: 0.0
    parts = []
    for e in sorted(p.terms, key=grlex_key):
        factors = [repr(p.terms[e])]
        for i, ei in enumerate(e):
            if ei == 1:
                factors.append(f"v[{i}]")
            elif ei > 1:
                factors.append(f"v[{i}]**{ei}")
        parts.append("*".join(factors))
    src = "def _poly_eval(v):\n    return " + " + ".join(parts) + "\n"
    ns: dict = {}
    exec(compile(src, "<polynomial>", "exec"), ns)
    return ns["_poly_eval"]


# -- text form -------------------------------------------------------------
#
# Files and the CLI use a plain sum-of-terms syntax: "c * x1^a1 ... u1^b1",
# variables named x1..xn and u1..um, '^' powers, '*' products, implicit
# exponent 1 and implicit coefficient 1.  Example: "1 - x1^2 - 0.5*x1*u1".

_TOKEN = re.compile(r"\s*([+-]|[A-Za-z]\w*(?:\^\d+)?|[0-9.eE]+(?:[+-]\d+)?|\*)")
_VARPOW = re.compile(r"^([xu])(\d+)(?:\^(\d+))?$")


def parse_polynomial(text: str, n: int, m: int = 0) -> Polynomial:
    """Parse the text form into a polynomial in n state + m input variables."""
    nv = n + m
    terms: Dict[MultiIndex, float] = {}
    pos = 0
    sign = 1.0
    text = text.strip()
    if not text:
        raise ValueError("empty polynomial text")
    while pos < len(text):
        coeff = sign
        expo = [0] * nv
        saw_factor = False
        expect_factor = True
        while pos < len(text):
            mt = _TOKEN.match(text, pos)
            if not mt:
                raise ValueError(f"cannot parse polynomial near: {text[pos:pos+20]!r}")
            tok = mt.group(1)
            if tok in "+-":
                if expect_factor and not saw_factor:
                    # leading sign of the term
                    coeff = -coeff if tok == "-" else coeff
                    pos = mt.end()
                    continue
                break
            pos = mt.end()
            expect_factor = False
            saw_factor = True
            if tok == "*":
                expect_factor = True
                continue
            vm = _VARPOW.match(tok)
            if vm:
                kind, idx, pw = vm.group(1), int(vm.group(2)), vm.group(3)
                slot = idx - 1 if kind == "x" else n + idx - 1
                if kind == "x" and not 1 <= idx <= n:
                    raise ValueError(f"state variable x{idx} out of range (n={n})")
                if kind == "u" and not 1 <= idx <= m:
                    raise ValueError(f"input variable u{idx} out of range (m={m})")
                expo[slot] += int(pw) if pw else 1
            else:
                try:
                    coeff *= float(tok)
                except ValueError:
                    raise ValueError(f"unknown token {tok!r} in polynomial") from None
        if not saw_factor:
            raise ValueError("dangling sign in polynomial text")
        e = tuple(expo)
        terms[e] = terms.get(e, 0.0) + coeff
        sign = 1.0
        if pos < len(text):
            mt = _TOKEN.match(text, pos)
            if not mt or mt.group(1) not in "+-":
                raise ValueError(f"expected + or - near: {text[pos:pos+20]!r}")
            sign = -1.0 if mt.group(1) == "-" else 1.0
            pos = mt.end()
            if pos >= len(text):
                raise ValueError("dangling sign at end of polynomial text")
    return Polynomial(nv, terms)


def format_polynomial(p: Polynomial, n: int | None = None) -> str:
    """Render in the text form; n splits variables into x1..xn then u1..um."""
    if p.is_zero():
        return "0"
    if n is None:
        n = p.num_vars
    parts: List[str] = []
    for e in sorted(p.terms, key=grlex_key):
        c = p.terms[e]
        factors = []
        for k, ek in enumerate(e):
            if ek == 0:
                continue
            name = f"x{k + 1}" if k < n else f"u{k - n + 1}"
            factors.append(name if ek == 1 else f"{name}^{ek}")
        mag = abs(c)
        body = "*".join(factors)
        if not factors:
            body = repr(mag)
        elif mag != 1.0:
            body = f"{mag!r}*{body}"
        if not parts:
            parts.append(body if c > 0 else f"-{body}")
        else:
            parts.append(f"+ {body}" if c > 0 else f"- {body}")
    return " ".join(parts)
