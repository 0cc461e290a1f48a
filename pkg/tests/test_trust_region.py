import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tim_admission._compiled import minimize_completion
from tim_admission.manifold import (
    FactoredPoint,
    ManifoldShape,
    TangentVector,
    hessian_operator,
    inner,
    norm,
    project_horizontal,
    random_point,
    riemannian_gradient,
)
from tim_admission.objectives import CompletionProblem, ObservationMask, SmoothedL1Params, SparsityProblem
from tim_admission.trust_region import (
    NumericalFailure,
    TrustRegionConfig,
    minimize,
    solve_subproblem,
)
from tim_admission.harness import gen_topology


def exact_completion_problem(K, r, seed):
    target = random_point(ManifoldShape(K, r), seed)
    return CompletionProblem(ObservationMask.full(K, target.matrix()), r)


def model_value(x, g, H, eta):
    return inner(x, g, eta) + 0.5 * inner(x, eta, H(eta))


# --- configuration --------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(accept_threshold=0.0), dict(accept_threshold=0.3), dict(grad_tol=0.0), dict(delta0=2.0, delta_max=1.0)],
)
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        TrustRegionConfig(**kwargs)


def test_config_defaults_resolve_from_shape():
    cfg = TrustRegionConfig().resolved(ManifoldShape(8, 2))
    assert_allclose(cfg.delta0, 4.0)
    assert_allclose(cfg.delta_max, 64.0)
    assert cfg.max_inner_iters == ManifoldShape(8, 2).dim
    assert cfg.grad_tol == 1e-6 and cfg.max_outer_iters == 500


# --- subproblem ------------------------------------------------------------------------


def test_subproblem_zero_gradient():
    x = random_point(ManifoldShape(5, 2), 0)
    g = TangentVector.zeros((5, 2))
    step, pred, hit = solve_subproblem(x, g, lambda v: v, 1.0, TrustRegionConfig())
    assert not step.U.any() and not step.V.any()
    assert pred == 0.0 and not hit


def test_subproblem_identity_hessian_gives_newton_step():
    x = random_point(ManifoldShape(6, 2), 1)
    rng = np.random.default_rng(2)
    g = project_horizontal(x, TangentVector(rng.standard_normal((6, 2)), rng.standard_normal((6, 2))))
    cfg = TrustRegionConfig(inner_kappa=1e-12, inner_theta=1.0)
    step, pred, hit = solve_subproblem(x, g, lambda v: v, 1e6, cfg)
    assert_allclose(step.U, -g.U, atol=1e-12)
    assert_allclose(step.V, -g.V, atol=1e-12)
    assert_allclose(pred, 0.5 * inner(x, g, g), rtol=1e-12)
    assert not hit


def _spd_operator(x, seed):
    """A random SPD operator on the horizontal space, through an SPD matrix on the ambient coordinates."""
    K, r = x.U.shape
    n = 2 * K * r
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    S = A @ A.T / n + 0.1 * np.eye(n)
    # metric in coordinates: inner(x, a, b) = a^T G b, so H = P G^{-1} S makes <a, H b> = a^T P^T S P b
    G = np.zeros((n, n))
    G[: K * r, : K * r] = np.kron(np.eye(K), x.VtV)
    G[K * r :, K * r :] = np.kron(np.eye(K), x.UtU)
    Ginv = np.linalg.inv(G)

    def H(v):
        flat = np.concatenate([v.U.ravel(), v.V.ravel()])
        out = Ginv @ (S @ flat)
        return project_horizontal(x, TangentVector(out[: K * r].reshape(K, r), out[K * r :].reshape(K, r)))

    return H


@pytest.mark.parametrize("seed", range(4))
def test_subproblem_small_radius_hits_boundary_and_beats_cauchy(seed):
    x = random_point(ManifoldShape(5, 2), seed)
    rng = np.random.default_rng(seed + 100)
    g = project_horizontal(x, TangentVector(rng.standard_normal((5, 2)), rng.standard_normal((5, 2))))
    H = _spd_operator(x, seed)
    delta = 0.05 * norm(x, g) / max(1.0, inner(x, g, H(g)) / inner(x, g, g))
    step, pred, hit = solve_subproblem(x, g, H, delta, TrustRegionConfig())
    assert hit
    assert_allclose(norm(x, step), delta, rtol=1e-9)
    # Cauchy point: minimize the model along -g within the radius
    gn = norm(x, g)
    gHg = inner(x, g, H(g))
    tau = min(delta / gn, gn * gn / gHg) if gHg > 0 else delta / gn
    cauchy = g * (-tau)
    assert model_value(x, g, H, step) <= model_value(x, g, H, cauchy) + 1e-14
    assert_allclose(pred, -model_value(x, g, H, step), rtol=1e-9, atol=1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_subproblem_step_stays_inside_radius(seed):
    problem = exact_completion_problem(6, 2, seed)
    x = random_point(problem.shape, seed + 10)
    eg = problem.euclidean_gradient(x)
    g = riemannian_gradient(x, eg)
    H = hessian_operator(x, eg, problem.ehess_operator(x))
    for delta in (1e-3, 0.1, 1.0, 10.0):
        step, pred, _ = solve_subproblem(x, g, H, delta, TrustRegionConfig())
        assert inner(x, step, step) <= delta**2 + 1e-12
        assert pred >= 0.0


# --- outer loop ---------------------------------------------------------------------


@pytest.mark.parametrize("K,r", [(4, 1), (6, 2), (10, 3), (16, 4), (32, 2)])
def test_exact_completion_converges(K, r):
    problem = exact_completion_problem(K, r, K * 10 + r)
    rep = minimize(problem, random_point(problem.shape, 1))
    assert rep.converged and rep.termination_reason == "grad_tol"
    assert rep.final_cost <= 1e-12
    assert rep.final_grad_norm <= 1e-6
    assert rep.outer_iters <= 500


def test_stationary_start_returns_immediately():
    target = random_point(ManifoldShape(5, 2), 3)
    problem = CompletionProblem(ObservationMask.full(5, target.matrix()), 2)
    rep = minimize(problem, target)
    assert rep.converged
    assert rep.outer_iters <= 1


def _cycle_mask():
    # 8 entries of the 4x4 all-ones matrix forming one cycle through all rows and columns
    entries = frozenset({(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 0)})
    return ObservationMask(4, entries, np.ones((4, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_rank_one_all_ones_from_eight_entries(seed):
    problem = CompletionProblem(_cycle_mask(), 1)
    x0 = random_point(problem.shape, seed)
    # start with consistent signs; see the next test for the other case
    x0 = FactoredPoint(np.abs(x0.U), np.abs(x0.V))
    rep = minimize(problem, x0)
    assert rep.final_cost <= 1e-12
    assert_allclose(rep.final_point.matrix(), np.ones((4, 4)), atol=1e-6)


def test_rank_one_completion_has_spurious_local_minima():
    # from this start the factors end with inconsistent signs around the cycle; two
    # observed entries are pushed to 0 and the cost stalls near 2 with a vanishing gradient
    problem = CompletionProblem(_cycle_mask(), 1)
    rep = minimize(problem, random_point(problem.shape, 2))
    assert_allclose(rep.final_cost, 2.0, atol=1e-3)
    assert rep.final_grad_norm < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_accepted_costs_decrease_and_ratio_is_consistent(seed):
    topo = gen_topology(10, 40, seed)
    problem = SparsityProblem(topo, SmoothedL1Params(), 3)
    rep = minimize(problem, random_point(problem.shape, seed), record=True)
    hist = np.array(rep.cost_history)
    assert np.all(np.diff(hist) <= 0.0)
    # each change in the history is an accepted step, which strictly decreases the cost
    changes = np.diff(hist)[np.diff(hist) != 0]
    assert len(changes) == rep.accepted
    assert rep.converged == (rep.final_grad_norm <= 1e-6)


def test_minimize_is_deterministic():
    problem = SparsityProblem(gen_topology(8, 30, 0), SmoothedL1Params(), 2)
    x0 = random_point(problem.shape, 5)
    a = minimize(problem, x0, record=True)
    b = minimize(problem, x0, record=True)
    assert a.cost_history == b.cost_history
    assert np.array_equal(a.final_point.U, b.final_point.U)


def test_iteration_cap_is_respected():
    problem = SparsityProblem(gen_topology(8, 30, 0), SmoothedL1Params(), 2)
    rep = minimize(problem, random_point(problem.shape, 5), TrustRegionConfig(max_outer_iters=3))
    assert rep.outer_iters == 3
    assert not rep.converged and rep.termination_reason == "max_iters"


class _NaNAfter:
    """A completion problem whose cost turns NaN once its first factor grows large."""

    def __init__(self, inner_problem):
        self.p = inner_problem
        self.shape = inner_problem.shape

    def cost(self, x):
        return math.nan if np.abs(x.U).max() > 1.0 else self.p.cost(x)

    def euclidean_gradient(self, x):
        return self.p.euclidean_gradient(x)

    def euclidean_hessian_vec(self, x, xi):
        return self.p.euclidean_hessian_vec(x, xi)


def test_nan_cost_raises_with_last_good_point():
    problem = exact_completion_problem(5, 2, 0)
    x0 = FactoredPoint(0.1 * np.ones((5, 2)) + 0.05 * np.eye(5, 2), 0.1 * np.ones((5, 2)) - 0.05 * np.eye(5, 2))
    with pytest.raises(NumericalFailure) as info:
        minimize(_NaNAfter(problem), x0)
    assert np.abs(info.value.last_point.U).max() <= 1.0


# --- compiled completion solver -----------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("r", [1, 2, 4])
def test_compiled_solver_matches_reference_on_exact_problems(seed, r):
    problem = exact_completion_problem(8, r, seed)
    x0 = random_point(problem.shape, seed + 50)
    a = minimize(problem, x0, record=True)
    b = minimize_completion(problem, x0, record=True)
    assert b.converged == a.converged
    assert b.final_cost <= 1e-12
    # same iteration; trajectories agree until roundoff differences build up
    n = min(10, len(a.cost_history))
    assert_allclose(b.cost_history[:n], a.cost_history[:n], rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_compiled_solver_matches_reference_on_admission_masks(seed):
    topo = gen_topology(8, 45, seed)
    problem = CompletionProblem(ObservationMask.for_users(topo, range(1, 9)), 3)
    x0 = random_point(problem.shape, seed)
    a = minimize(problem, x0, record=True)
    b = minimize_completion(problem, x0, record=True)
    n = min(5, len(a.cost_history))
    assert_allclose(b.cost_history[:n], a.cost_history[:n], rtol=1e-8, atol=1e-12)
    assert b.termination_reason in ("grad_tol", "max_iters", "radius_collapse")
    assert np.all(np.diff(b.cost_history) <= 0.0)


def test_compiled_solver_refuses_large_grids():
    problem = exact_completion_problem(30, 2, 0)
    with pytest.raises(ValueError):
        minimize_completion(problem, random_point(problem.shape, 0))
