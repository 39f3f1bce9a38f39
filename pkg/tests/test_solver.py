import numpy as np
import pytest
from scipy import sparse

from momentoc.conic import (
    ConeSegment,
    ConicProblem,
    compute_residuals,
    mat_to_svec,
    svec_to_mat,
)
from momentoc.solver import choose_strategy, solve


def nonneg_lp():
    # min x subject to x >= 0, pinned by x + y = 1 with free y costing nothing
    # has optimum 0 at (x, y) = (0, 1)
    return ConicProblem(
        c=[1.0, 0.0],
        A=sparse.csr_matrix(np.array([[1.0, 1.0]])),
        b=[1.0],
        segments=[ConeSegment.nonneg(1), ConeSegment.free(1)],
    )


def trace_toy():
    # min tr(Z) over psd Z with Z_00 = 1; optimum diag(1, 0), value 1
    c = mat_to_svec(np.eye(2))
    row = np.zeros(3)
    row[0] = 1.0
    return ConicProblem(
        c=c,
        A=sparse.csr_matrix(row),
        b=[1.0],
        segments=[ConeSegment.psd(2)],
    )


def eigenvalue_sdp(C):
    # min <C, Z> s.t. tr Z = 1, Z psd; optimum is the smallest eigenvalue
    side = C.shape[0]
    return ConicProblem(
        c=mat_to_svec(C),
        A=sparse.csr_matrix(mat_to_svec(np.eye(side))),
        b=[1.0],
        segments=[ConeSegment.psd(side)],
    )


class TestBasics:
    def test_nonneg_minimum(self):
        sol = solve(nonneg_lp())
        assert sol.status == "optimal"
        assert sol.primal_objective == pytest.approx(0.0, abs=1e-8)

    def test_trace_toy(self):
        sol = solve(trace_toy())
        assert sol.status == "optimal"
        assert sol.primal_objective == pytest.approx(1.0, abs=1e-7)
        Z = svec_to_mat(sol.v, 2)
        assert Z[0, 0] == pytest.approx(1.0, abs=1e-7)
        assert np.linalg.eigvalsh(Z)[0] >= -1e-8

    def test_rejects_bad_tol(self):
        with pytest.raises(ValueError):
            solve(nonneg_lp(), tol=0.0)

    def test_rejects_all_free(self):
        prob = ConicProblem(
            c=[1.0],
            A=sparse.csr_matrix(np.array([[1.0]])),
            b=[1.0],
            segments=[ConeSegment.free(1)],
        )
        with pytest.raises(ValueError):
            solve(prob)


class TestEigenvalueSuite:
    def test_fifty_random_instances(self):
        rng = np.random.default_rng(404)
        for k in range(50):
            side = int(rng.integers(1, 4))
            M = rng.normal(size=(side, side))
            C = 0.5 * (M + M.T)
            sol = solve(eigenvalue_sdp(C), tol=1e-9)
            assert sol.status == "optimal", f"instance {k}"
            lam_min = float(np.linalg.eigvalsh(C)[0])
            assert sol.primal_objective == pytest.approx(lam_min, abs=1e-7), (
                f"instance {k}"
            )

    def test_dual_matches(self):
        rng = np.random.default_rng(7)
        M = rng.normal(size=(3, 3))
        C = 0.5 * (M + M.T)
        sol = solve(eigenvalue_sdp(C), tol=1e-9)
        assert sol.dual_objective == pytest.approx(sol.primal_objective, abs=1e-7)


class TestSolutionQuality:
    def test_reported_residuals_consistent(self):
        # the residual tuple must be recomputable from the returned vectors
        prob = trace_toy()
        sol = solve(prob)
        again = compute_residuals(prob, sol.v, sol.y, sol.s)
        for a, b in zip(sol.residuals, again):
            assert a == pytest.approx(b, abs=1e-12)

    def test_determinism(self):
        prob = eigenvalue_sdp(np.array([[1.0, 0.3], [0.3, -0.5]]))
        s1 = solve(prob)
        s2 = solve(prob)
        assert np.array_equal(s1.v, s2.v)
        assert np.array_equal(s1.y, s2.y)
        assert s1.primal_objective == s2.primal_objective
        assert s1.iterations == s2.iterations

    def test_strategies_agree(self):
        # the same program must reach the same optimum under every strategy;
        # cone columns are slack-like (zero cost, one use) so substitution
        # applies too.  Optimum -0.3 at x2 = 0.
        prob = ConicProblem(
            c=[0.0, 0.0, 1.0],
            A=sparse.csr_matrix(np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])),
            b=[1.0, 0.3],
            segments=[ConeSegment.nonneg(2), ConeSegment.free(1)],
        )
        vals = {}
        for strat in ("substitution", "dualized", "direct"):
            sol = solve(prob, strategy=strat)
            assert sol.status == "optimal", strat
            vals[strat] = sol.primal_objective
        assert vals["direct"] == pytest.approx(-0.3, abs=1e-7)
        spread = max(vals.values()) - min(vals.values())
        assert spread <= 1e-6

    def test_forced_substitution_rejected_when_inapplicable(self):
        # cost on a cone column breaks the substitution preconditions
        prob = ConicProblem(
            c=[1.0, 0.0],
            A=sparse.csr_matrix(np.array([[1.0, 1.0]])),
            b=[1.0],
            segments=[ConeSegment.nonneg(1), ConeSegment.free(1)],
        )
        with pytest.raises(ValueError):
            solve(prob, strategy="substitution")


class TestStatuses:
    def test_infeasible(self):
        # x >= 0 with x = -1
        prob = ConicProblem(
            c=[1.0],
            A=sparse.csr_matrix(np.array([[1.0]])),
            b=[-1.0],
            segments=[ConeSegment.nonneg(1)],
        )
        sol = solve(prob)
        assert sol.status == "infeasible"
        assert np.isnan(sol.primal_objective)

    def test_unbounded(self):
        # min -x over x >= 0 with no equality rows
        prob = ConicProblem(
            c=[-1.0],
            A=sparse.csr_matrix((0, 1)),
            b=[],
            segments=[ConeSegment.nonneg(1)],
        )
        sol = solve(prob)
        assert sol.status == "unbounded"

    def test_infeasible_psd(self):
        # diagonal of a psd matrix cannot be negative
        row = np.zeros(3)
        row[0] = 1.0
        prob = ConicProblem(
            c=mat_to_svec(np.eye(2)),
            A=sparse.csr_matrix(row),
            b=[-2.0],
            segments=[ConeSegment.psd(2)],
        )
        sol = solve(prob)
        assert sol.status == "infeasible"


class TestStrategyChoice:
    def test_substitution_when_applicable(self):
        # cone columns appear once each with zero cost: substitution shape
        A = np.array([[1.0, 2.0, 0.0], [0.0, 3.0, 1.0]])
        prob = ConicProblem(
            c=[0.0, 1.0, 0.0],
            A=sparse.csr_matrix(A),
            b=[1.0, 1.0],
            segments=[ConeSegment.nonneg(1), ConeSegment.free(1), ConeSegment.nonneg(1)],
        )
        assert choose_strategy(prob) == "substitution"

    def test_dualized_for_wide_problems(self):
        prob = ConicProblem(
            c=[1.0, 1.0, 0.0],
            A=sparse.csr_matrix(np.array([[1.0, 1.0, 1.0]])),
            b=[1.0],
            segments=[ConeSegment.nonneg(3)],
        )
        assert choose_strategy(prob) == "dualized"

    def test_direct_otherwise(self):
        prob = ConicProblem(
            c=[1.0],
            A=sparse.csr_matrix(np.array([[2.0]])),
            b=[1.0],
            segments=[ConeSegment.nonneg(1)],
        )
        assert choose_strategy(prob) == "direct"


class TestConicStructure:
    def test_svec_round_trip(self):
        rng = np.random.default_rng(5)
        for side in (1, 2, 5):
            M = rng.normal(size=(side, side))
            M = 0.5 * (M + M.T)
            assert np.allclose(svec_to_mat(mat_to_svec(M), side), M, atol=1e-14)

    def test_inner_product_preserved(self):
        # svec is an isometry: <A, B>_F = svec(A) . svec(B)
        rng = np.random.default_rng(6)
        A = rng.normal(size=(3, 3))
        A = 0.5 * (A + A.T)
        B = rng.normal(size=(3, 3))
        B = 0.5 * (B + B.T)
        assert float(mat_to_svec(A) @ mat_to_svec(B)) == pytest.approx(
            float(np.tensordot(A, B)), rel=1e-12
        )

    def test_layout_size_check(self):
        with pytest.raises(ValueError):
            ConicProblem(
                c=[1.0, 1.0],
                A=sparse.csr_matrix(np.array([[1.0, 1.0]])),
                b=[1.0],
                segments=[ConeSegment.nonneg(1)],
            )

    def test_empty_row_rejected(self):
        with pytest.raises(ValueError):
            ConicProblem(
                c=[1.0],
                A=sparse.csr_matrix(np.array([[0.0]])),
                b=[1.0],
                segments=[ConeSegment.nonneg(1)],
            )

    def test_membership_margin(self):
        prob = trace_toy()
        inside = mat_to_svec(np.eye(2))
        assert prob.cone_membership_margin(inside) >= 0.0
        outside = mat_to_svec(np.diag([1.0, -2.0]))
        assert prob.cone_membership_margin(outside) == pytest.approx(-2.0)
