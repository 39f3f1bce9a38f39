import dataclasses
import math

import numpy as np
import pytest

from momentoc.polynomials import Polynomial, evaluate_many, parse_polynomial
from momentoc.problem import InitialMeasure, OcpProblem
from momentoc.relaxation import (
    assemble_dual,
    assemble_primal,
    extract_certificate,
    mass,
    minimum_order,
    moment_vector,
    phi_from_solution,
    sos_value,
    subsolution_residual,
    to_conic,
    validation_grid,
)
from momentoc.relaxation import test_index_set as alpha_index_set
from momentoc.solver import solve

from conftest import make_constant_cost


class TestStructure:
    def test_minimum_order(self, cubic_drift):
        # quadratic data throughout: every v_i is 1
        assert minimum_order(cubic_drift) == 1

    def test_order_below_minimum_rejected(self, cubic_drift):
        with pytest.raises(ValueError):
            assemble_primal(cubic_drift, 0)

    def test_moment_basis_size(self, cubic_drift):
        for r in (2, 3):
            sdp = assemble_primal(cubic_drift, r)
            nv = cubic_drift.n + cubic_drift.m
            assert len(sdp.index) == math.comb(nv + 2 * r, 2 * r)

    def test_index_map_round_trip(self, cubic_drift):
        sdp = assemble_primal(cubic_drift, 2)
        for k, alpha in enumerate(sdp.index.basis):
            assert sdp.index.position[alpha] == k

    def test_block_sides(self, cubic_drift):
        # moment block side C(3+r, r); localizing blocks at r - 1 for the
        # degree-2 constraints
        sdp = assemble_primal(cubic_drift, 3)
        sides = [b.side for b in sdp.psd_blocks]
        assert sides[0] == math.comb(3 + 3, 3)
        assert sides[1:] == [math.comb(3 + 2, 2)] * len(cubic_drift.q)

    def test_equality_count_uses_uniform_degree_cut(self, cubic_drift):
        # cubic drift: test monomials go up to 2r - (deg f - 1) = 2r - 2
        for r in (2, 3):
            alphas = alpha_index_set(cubic_drift, r)
            bound = 2 * r - 2
            assert all(sum(a) <= bound for a in alphas)
            assert len(alphas) == math.comb(2 + bound, bound)

    def test_linear_dynamics_keep_full_range(self, decay):
        # deg f = 1 leaves the cut at 2r
        alphas = alpha_index_set(decay, 2)
        assert max(sum(a) for a in alphas) == 4

    def test_mass_row(self, cubic_drift):
        # the alpha = 0 equality reads lam * z_0 = 1
        sdp = assemble_primal(cubic_drift, 2)
        rows = [e for e in sdp.equalities if e[0] == (0, 0)]
        assert len(rows) == 1
        _, terms, rhs = rows[0]
        assert terms == {(0, 0, 0): pytest.approx(cubic_drift.lam)}
        assert rhs == 1.0


class TestPrimalValues:
    def test_cubic_drift_order_three(self, cubic_drift):
        sdp = assemble_primal(cubic_drift, 3)
        sol = solve(to_conic(sdp), tol=1e-8)
        assert sol.status == "optimal"
        assert sol.primal_objective == pytest.approx(1.6465, abs=1e-3)

    def test_mass_invariant(self, cubic_drift):
        sdp = assemble_primal(cubic_drift, 2)
        sol = solve(to_conic(sdp))
        assert mass(sdp, sol) == pytest.approx(1 / cubic_drift.lam, rel=1e-7)

    def test_moment_vector_objective(self, cubic_drift):
        # L_z(g) recomputed from the extracted moments matches the solver
        sdp = assemble_primal(cubic_drift, 2)
        sol = solve(to_conic(sdp))
        z = moment_vector(sdp, sol)
        val = sum(
            coeff * z[sdp.index.position[alpha]]
            for alpha, coeff in cubic_drift.g.terms.items()
        )
        assert val == pytest.approx(sol.primal_objective, rel=1e-9)

    def test_static_oracle(self, static):
        for r in (1, 2, 3):
            sdp = assemble_primal(static, r)
            sol = solve(to_conic(sdp))
            expect = 0.36 / static.lam
            assert sol.primal_objective == pytest.approx(expect, abs=1e-6)


class TestDual:
    def test_weak_duality(self, decay):
        r = 3
        ps = solve(to_conic(assemble_primal(decay, r)))
        prog = assemble_dual(decay, r)
        ds = solve(to_conic(prog))
        assert sos_value(prog, ds) <= ps.primal_objective + 1e-6

    def test_agreement_cubic_drift(self, cubic_drift):
        r = 3
        ps = solve(to_conic(assemble_primal(cubic_drift, r)))
        prog = assemble_dual(cubic_drift, r)
        ds = solve(to_conic(prog))
        assert abs(sos_value(prog, ds) - ps.primal_objective) <= 1e-5

    def test_constant_cost_value(self):
        # g = 1 makes every policy cost exactly 1/lam; the certified value
        # at the initial point must hit it although the optimal phi is not
        # unique (any subsolution with phi(x0) = 1 ties)
        p = make_constant_cost()
        prog = assemble_dual(p, 2)
        ds = solve(to_conic(prog))
        assert ds.ok
        assert sos_value(prog, ds) == pytest.approx(1.0, abs=1e-6)
        phi = phi_from_solution(prog, ds)
        assert phi(p.initial.point) == pytest.approx(1.0, abs=1e-6)
        assert subsolution_residual(p, phi) <= 1e-6

    def test_fixed_constant_subsolution(self, cubic_drift):
        # phi = c <= 0 is always a subsolution: g - lam*c >= 0 on X
        phi = Polynomial.constant(cubic_drift.n, -3.0)
        prog = assemble_dual(cubic_drift, 2, fixed_phi=phi)
        ds = solve(to_conic(prog))
        assert ds.ok
        assert subsolution_residual(cubic_drift, phi) <= 1e-9

    def test_fixed_phi_too_high_infeasible(self, cubic_drift):
        # a large positive constant violates g - A phi >= 0 near the origin
        phi = Polynomial.constant(cubic_drift.n, 30.0)
        prog = assemble_dual(cubic_drift, 2, fixed_phi=phi)
        ds = solve(to_conic(prog))
        assert not ds.ok

    def test_subsolution_residual_on_grid(self, cubic_drift):
        prog = assemble_dual(cubic_drift, 3)
        ds = solve(to_conic(prog))
        phi = phi_from_solution(prog, ds)
        grid = validation_grid(cubic_drift, seed=1)
        assert subsolution_residual(cubic_drift, phi, grid) <= 1e-6 + 1e-8


class TestValidationGrid:
    def test_shape_and_membership(self, cubic_drift):
        grid = validation_grid(cubic_drift, seed=0)
        nv = cubic_drift.n + cubic_drift.m
        assert grid.ndim == 2 and grid.shape[1] == nv
        assert len(grid) >= 100
        for qi in cubic_drift.q:
            assert evaluate_many(qi, grid).min() >= -1e-9

    def test_deterministic(self, cubic_drift):
        g1 = validation_grid(cubic_drift, seed=4)
        g2 = validation_grid(cubic_drift, seed=4)
        assert np.array_equal(g1, g2)


class TestCertificates:
    def test_to_dict_keys(self, decay):
        r = 2
        ps = solve(to_conic(assemble_primal(decay, r)))
        prog = assemble_dual(decay, r)
        ds = solve(to_conic(prog))
        cert = extract_certificate(decay, r, ps, ds, dual_prog=prog)
        doc = cert.to_dict(decay.n)
        assert set(doc) == {"r", "J_r", "J_star_r", "phi", "residual_max", "solver"}
        assert doc["r"] == r
        assert isinstance(doc["phi"], str)
        for key in ("primal_status", "dual_status", "primal_seconds", "dual_seconds"):
            assert key in doc["solver"]

    def test_both_sides_failed(self):
        # empty state set: the primal is infeasible at any order
        p = OcpProblem(
            n=1, m=0,
            f=(parse_polynomial("-x1", 1),),
            g=parse_polynomial("x1^2", 1),
            lam=1.0,
            q=(parse_polynomial("-1 - x1^2", 1),),
            initial=InitialMeasure.dirac((0.0,)),
        )
        ps = solve(to_conic(assemble_primal(p, 2)))
        assert ps.status == "infeasible"
        prog = assemble_dual(p, 2)
        ds = solve(to_conic(prog))
        with pytest.raises(RuntimeError):
            extract_certificate(p, 2, ps, ds if not ds.ok else None, dual_prog=prog)

    def test_primal_only(self, decay):
        ps = solve(to_conic(assemble_primal(decay, 2)))
        cert = extract_certificate(decay, 2, ps, None)
        assert math.isnan(cert.J_star_r)
        assert cert.phi.is_zero()
