"""Shared problem fixtures.

The cubic-drift problem is the workhorse: two states, one control, cubic
drift in the first coordinate, unit-disk state set.  The others are small
enough to have closed-form values.
"""

import numpy as np
import pytest

from momentoc.polynomials import parse_polynomial
from momentoc.problem import InitialMeasure, OcpProblem


def make_cubic_drift(initial=None):
    n, m = 2, 1
    f = (
        parse_polynomial("x2 + 0.1*x1^3", n, m),
        parse_polynomial("-0.3*u1", n, m),
    )
    g = parse_polynomial("x1^2 + x2^2", n, m)
    q = (
        parse_polynomial("1 - x1^2 - x2^2", n, m),
        parse_polynomial("1 - u1^2", n, m),
        parse_polynomial("2 - x1^2 - x2^2 - u1^2", n, m),
    )
    return OcpProblem(
        n=n, m=m, f=f, g=g, lam=0.1, q=q,
        initial=initial or InitialMeasure.dirac((0.0, 0.7)),
    )


def make_decay(x0=0.5):
    # scalar contraction with a spectator control; V(x0) = x0^2/3 at lam=1
    n, m = 1, 1
    f = (parse_polynomial("-x1", n, m),)
    g = parse_polynomial("x1^2", n, m)
    q = (
        parse_polynomial("1 - x1^2", n, m),
        parse_polynomial("1 - u1^2", n, m),
        parse_polynomial("2 - x1^2 - u1^2", n, m),
    )
    return OcpProblem(
        n=n, m=m, f=f, g=g, lam=1.0, q=q,
        initial=InitialMeasure.dirac((x0,)),
    )


def make_static(lam=0.37, x0=0.6):
    # f = 0 freezes the state, so J = g(x0)/lam exactly at every order
    n, m = 1, 1
    f = (parse_polynomial("0", n, m),)
    g = parse_polynomial("x1^2", n, m)
    q = (
        parse_polynomial("1 - x1^2", n, m),
        parse_polynomial("1 - u1^2", n, m),
        parse_polynomial("2 - x1^2 - u1^2", n, m),
    )
    return OcpProblem(
        n=n, m=m, f=f, g=g, lam=lam, q=q,
        initial=InitialMeasure.dirac((x0,)),
    )


def make_constant_cost():
    # uncontrolled, g = 1: every trajectory costs 1/lam, so J = 1 at lam=1
    n = 1
    f = (parse_polynomial("-x1", n),)
    g = parse_polynomial("1", n)
    q = (parse_polynomial("1 - x1^2", n),)
    return OcpProblem(
        n=n, m=0, f=f, g=g, lam=1.0, q=q,
        initial=InitialMeasure.dirac((0.5,)),
    )


def make_random_instance(seed):
    """Small random problem with contractive drift.

    The drift coefficients are sized so the unit ball is forward invariant,
    which keeps the discounted occupation measure well defined at any order.
    Even seeds draw a controlled scalar problem, odd seeds an uncontrolled
    planar one.
    """
    rng = np.random.default_rng(seed)
    lam = float(rng.uniform(0.5, 1.5))
    if seed % 2 == 0:
        n, m = 1, 1
        a = rng.uniform(0.3, 0.8)
        b = rng.uniform(-0.5, 0.5)
        c = rng.uniform(-0.2, 0.2)
        f = (parse_polynomial(f"{-a:.3f}*x1 + {b:.3f}*u1 + {c:.3f}*x1^2", n, m),)
        g = parse_polynomial("x1^2", n, m)
        q = (
            parse_polynomial("1 - x1^2", n, m),
            parse_polynomial("1 - u1^2", n, m),
            parse_polynomial("2 - x1^2 - u1^2", n, m),
        )
        x0 = (float(rng.uniform(-0.7, 0.7)),)
    else:
        n, m = 2, 0
        a1, a2 = rng.uniform(0.4, 0.9, size=2)
        c1, c2 = rng.uniform(-0.15, 0.15, size=2)
        d = rng.uniform(-0.1, 0.1)
        f = (
            parse_polynomial(f"{-a1:.3f}*x1 + {c1:.3f}*x2 + {d:.3f}*x1*x2", n),
            parse_polynomial(f"{-a2:.3f}*x2 + {c2:.3f}*x1", n),
        )
        g = parse_polynomial("x1^2 + x2^2", n)
        q = (
            parse_polynomial("1 - x1^2 - x2^2", n),
            parse_polynomial("2 - x1^2 - x2^2", n),
        )
        pt = rng.uniform(-0.5, 0.5, size=2)
        x0 = (float(pt[0]), float(pt[1]))
    return OcpProblem(n=n, m=m, f=f, g=g, lam=lam, q=q,
                      initial=InitialMeasure.dirac(x0))


@pytest.fixture
def cubic_drift():
    return make_cubic_drift()


@pytest.fixture
def decay():
    return make_decay()


@pytest.fixture
def static():
    return make_static()


@pytest.fixture
def constant_cost():
    return make_constant_cost()
