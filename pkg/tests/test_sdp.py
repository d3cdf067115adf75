import numpy as np
import pytest

from robustmoments.sdp import SdpConfig, SdpProblem, SdpSizeError, solve


def _random_strictly_feasible(rng, sizes, m):
    """Problem with a known strictly feasible primal-dual pair."""
    X0, S0 = [], []
    for s in sizes:
        G = rng.normal(size=(s, s))
        X0.append(G @ G.T + 0.1 * np.eye(s))
        H = rng.normal(size=(s, s))
        S0.append(H @ H.T + 0.1 * np.eye(s))
    y0 = rng.normal(size=m)
    cons = []
    for _ in range(m):
        row = [0.5 * (A + A.T) for A in (rng.normal(size=(s, s)) for s in sizes)]
        rhs = sum(np.sum(a * x) for a, x in zip(row, X0))
        cons.append((row, rhs))
    C = []
    for bi, s in enumerate(sizes):
        acc = S0[bi].copy()
        for k in range(m):
            acc += y0[k] * cons[k][0][bi]
        C.append(acc)
    return SdpProblem(sizes, objective=C, constraints=cons)


def test_unconstrained_cone_boundary():
    prob = SdpProblem([1], objective=[np.array([[1.0]])])
    sol = solve(prob)
    assert sol.status == "Optimal"
    assert sol.primal_objective == pytest.approx(0.0, abs=1e-6)


def test_trace_two_analytic_optimum():
    # min tr(X) with X11 = X22 = 1 has optimum 2 regardless of X12
    prob = SdpProblem(
        [2],
        objective=[np.eye(2)],
        constraints=[
            ([np.diag([1.0, 0.0])], 1.0),
            ([np.diag([0.0, 1.0])], 1.0),
        ],
    )
    sol = solve(prob)
    assert sol.status == "Optimal"
    assert sol.primal_objective == pytest.approx(2.0, abs=1e-6)
    X = sol.primal_blocks[0]
    assert X[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert X[1, 1] == pytest.approx(1.0, abs=1e-6)
    assert -1.0 - 1e-6 <= X[0, 1] <= 1.0 + 1e-6


def test_negative_diagonal_infeasible():
    mat = np.zeros((2, 2))
    mat[0, 0] = 1.0
    prob = SdpProblem([2], objective=[np.eye(2)], constraints=[([mat], -1.0)])
    sol = solve(prob)
    assert sol.status == "Infeasible"
    assert sol.infeasibility_ray is not None
    assert sol.ray_residual <= 1e-5


def test_minimum_eigenvalue_instances():
    rng = np.random.default_rng(0)
    for _ in range(5):
        n = 6
        C = rng.normal(size=(n, n))
        C = 0.5 * (C + C.T)
        prob = SdpProblem([n], objective=[C], constraints=[([np.eye(n)], 1.0)])
        sol = solve(prob)
        assert sol.status == "Optimal"
        lam = float(np.linalg.eigvalsh(C).min())
        assert sol.primal_objective == pytest.approx(lam, abs=1e-6)


@pytest.mark.parametrize("seed", range(8))
def test_random_strictly_feasible_instances(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 8)), int(rng.integers(1, 5))]
    m = int(rng.integers(2, 12))
    prob = _random_strictly_feasible(rng, sizes, m)
    sol = solve(prob)
    assert sol.status == "Optimal"
    assert sol.primal_residual <= 1e-6
    assert sol.min_eigenvalue >= -1e-7
    # weak duality
    assert sol.primal_objective >= sol.dual_objective - 1e-5


def test_deterministic_given_same_input():
    prob = _random_strictly_feasible(np.random.default_rng(7), [5], 6)
    s1 = solve(prob)
    s2 = solve(prob)
    assert s1.iterations == s2.iterations
    assert np.array_equal(s1.primal_blocks[0], s2.primal_blocks[0])
    assert np.array_equal(s1.dual, s2.dual)


def test_objective_scaling_equivariance():
    # strongly unique optimum: spectral gap keeps the argmin stable
    rng = np.random.default_rng(12)
    n = 5
    Q = np.linalg.qr(rng.normal(size=(n, n)))[0]
    C = Q @ np.diag([-3.0, 1.0, 2.0, 3.0, 4.0]) @ Q.T
    prob1 = SdpProblem([n], objective=[C], constraints=[([np.eye(n)], 1.0)])
    prob2 = SdpProblem([n], objective=[7.0 * C], constraints=[([np.eye(n)], 1.0)])
    s1, s2 = solve(prob1), solve(prob2)
    assert s1.status == "Optimal" and s2.status == "Optimal"
    assert np.max(np.abs(s1.primal_blocks[0] - s2.primal_blocks[0])) <= 1e-6


def test_symmetry_enforced():
    bad = np.array([[0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        SdpProblem([2], objective=[bad])


def test_constraint_cap():
    prob = SdpProblem([1], objective=[np.array([[1.0]])])
    for k in range(5):
        prob.add_constraint([np.array([[1.0]])], 1.0)
    with pytest.raises(SdpSizeError):
        solve(prob, SdpConfig(constraint_cap=3))


def test_max_iters_returned_not_raised():
    prob = _random_strictly_feasible(np.random.default_rng(3), [4], 5)
    sol = solve(prob, SdpConfig(max_iters=2))
    assert sol.status in ("MaxIterations", "Optimal")
    # best iterate and residuals still reported
    assert np.isfinite(sol.primal_residual)


def test_problem_dump_roundtrip_text():
    prob = SdpProblem(
        [2],
        objective=[np.eye(2)],
        constraints=[([np.array([[1.0, 0.5], [0.5, 0.0]])], 2.0)],
    )
    text = prob.dump()
    assert "blocks 2" in text
    assert any(line.startswith("con 0 0 0 1") for line in text.splitlines())
    assert any(line.startswith("rhs 0") for line in text.splitlines())


def test_multiblock_diagonal_lp_like():
    # min x + 2y s.t. x + y = 1 over 1x1 blocks: optimum at x=1, y=0
    prob = SdpProblem(
        [1, 1],
        objective=[np.array([[1.0]]), np.array([[2.0]])],
        constraints=[([np.array([[1.0]]), np.array([[1.0]])], 1.0)],
    )
    sol = solve(prob)
    assert sol.status == "Optimal"
    assert sol.primal_objective == pytest.approx(1.0, abs=1e-6)
    assert sol.primal_blocks[0][0, 0] == pytest.approx(1.0, abs=1e-5)


def test_entry_constraints_match_dense():
    # same model written both ways must solve to the same matrix
    def build(entry):
        prob = SdpProblem([3], objective=[np.eye(3)])
        rows = [
            ([(0, 0, 0, 1.0)], 1.0),
            ([(0, 1, 1, 1.0)], 2.0),
            ([(0, 0, 1, 1.0)], 0.5),
            ([(0, 2, 2, 1.0), (0, 0, 2, 2.0)], 0.3),
        ]
        if entry:
            for entries, rhs in rows:
                prob.add_constraint_entries(entries, rhs)
            return prob
        for entries, rhs in rows:
            mat = np.zeros((3, 3))
            for _, i, j, val in entries:
                if i == j:
                    mat[i, i] += val
                else:
                    mat[i, j] += 0.5 * val
                    mat[j, i] += 0.5 * val
            prob.add_constraint([mat], rhs)
        return prob

    a = solve(build(False))
    b = solve(build(True))
    assert a.status == b.status == "Optimal"
    assert np.max(np.abs(a.primal_blocks[0] - b.primal_blocks[0])) < 1e-12


def test_forced_sparse_schur_path_agrees():
    from robustmoments.sdp import _HsdSolver

    prob = _random_strictly_feasible(np.random.default_rng(11), [5], 7)
    reference = solve(prob)

    class NoStacks(_HsdSolver):
        def __init__(self, problem, config):
            super().__init__(problem, config)
            self.A_stacks = None
            self._row_coo = self._build_row_coo()

    sol = NoStacks(prob, SdpConfig()).run()
    assert sol.status == "Optimal"
    assert abs(sol.primal_objective - reference.primal_objective) < 1e-6
