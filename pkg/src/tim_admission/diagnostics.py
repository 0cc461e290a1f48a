"""Numerical checks of the quotient geometry against the cost functions.

Each check draws a random point and random horizontal directions from a
seed and returns a scalar error, so that failures can be reproduced from
``(K, r, seed)`` alone.  :func:`geometry_report` bundles them for the
``check`` subcommand and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .manifold import (
    FactoredPoint,
    ManifoldShape,
    TangentVector,
    connection_correction,
    hessian_operator,
    inner,
    norm,
    project_horizontal,
    random_point,
    random_tangent,
    riemannian_gradient,
    vertical_vector,
)
from .objectives import NetworkTopology, ObservationMask, SmoothedL1Params, SparsityProblem, CompletionProblem

__all__ = [
    "CheckThresholds",
    "random_problems",
    "metric_invariance_error",
    "horizontality_error",
    "projection_idempotence_error",
    "gradient_fd_error",
    "hessian_symmetry_error",
    "taylor_slope",
    "geometry_report",
    "report_passes",
]


@dataclass(frozen=True)
class CheckThresholds:
    metric: float = 1e-10
    horizontal: float = 1e-10
    idempotence: float = 1e-10
    gradient: float = 1e-5
    symmetry: float = 1e-8
    taylor_slope: float = 2.9


def random_problems(K, r, seed):
    """A sparsity problem on a random topology and a completion problem with a random dense target.

    Neither has a critical point near a random start, so gradient and
    Hessian checks are not trivially satisfied.
    """
    rng = np.random.default_rng([seed, K, r])
    pairs = [(i, j) for i in range(1, K + 1) for j in range(1, K + 1) if i != j]
    pick = rng.random(len(pairs)) < 0.3
    topo = NetworkTopology(K, frozenset(p for p, keep in zip(pairs, pick) if keep))
    entries = frozenset((i, j) for i in range(K) for j in range(K) if i == j or rng.random() < 0.5)
    mask = ObservationMask(K, entries, rng.standard_normal((K, K)))
    return {
        "sparsity": SparsityProblem(topo, SmoothedL1Params(), r),
        "completion": CompletionProblem(mask, r),
    }


def _well_conditioned_gl(r, rng):
    Q1, _ = np.linalg.qr(rng.standard_normal((r, r)))
    Q2, _ = np.linalg.qr(rng.standard_normal((r, r)))
    return Q1 @ np.diag(rng.uniform(0.5, 2.0, r)) @ Q2


def metric_invariance_error(x: FactoredPoint, seed=None) -> float:
    """Relative change of g(xi, eta) when the point and vectors are moved by a random M in GL(r)."""
    rng = np.random.default_rng(seed)
    xi, eta = random_tangent(x, rng), random_tangent(x, rng)
    M = _well_conditioned_gl(x.shape.r, rng)
    Minv = np.linalg.inv(M)
    y = FactoredPoint(x.U @ Minv, x.V @ M.T)
    move = lambda v: TangentVector(v.U @ Minv, v.V @ M.T)  # noqa: E731
    a, b = inner(x, xi, eta), inner(y, move(xi), move(eta))
    return abs(a - b) / max(1.0, abs(a))


def horizontality_error(x: FactoredPoint, seed=None) -> float:
    """Largest |g(P(eta), v)| over a basis of the vertical space, with P(eta) normalized."""
    rng = np.random.default_rng(seed)
    eta = TangentVector(rng.standard_normal(x.U.shape), rng.standard_normal(x.V.shape))
    h = project_horizontal(x, eta)
    h = h / norm(x, h)
    r = x.shape.r
    worst = 0.0
    for a in range(r):
        for b in range(r):
            E = np.zeros((r, r))
            E[a, b] = 1.0
            v = vertical_vector(x, E)
            worst = max(worst, abs(inner(x, h, v)) / norm(x, v))
    return worst


def projection_idempotence_error(x: FactoredPoint, seed=None) -> float:
    rng = np.random.default_rng(seed)
    eta = TangentVector(rng.standard_normal(x.U.shape), rng.standard_normal(x.V.shape))
    p1 = project_horizontal(x, eta)
    p2 = project_horizontal(x, p1)
    return norm(x, p2 - p1) / norm(x, p1)


def gradient_fd_error(problem, x: FactoredPoint, seed=None, t=1e-6) -> float:
    """Relative mismatch between g(grad, xi) and a central difference of the cost."""
    xi = random_tangent(x, seed)
    g = riemannian_gradient(x, problem.euclidean_gradient(x))
    f = lambda s: problem.cost(FactoredPoint(x.U + s * xi.U, x.V + s * xi.V, check=False))  # noqa: E731
    fd = (f(t) - f(-t)) / (2 * t)
    exact = inner(x, g, xi)
    return abs(fd - exact) / max(abs(exact), norm(x, g), 1e-12)


def _hess(problem, x):
    eg = problem.euclidean_gradient(x)
    if hasattr(problem, "ehess_operator"):
        fn = problem.ehess_operator(x)
    else:
        fn = lambda v: problem.euclidean_hessian_vec(x, v)  # noqa: E731
    return eg, hessian_operator(x, eg, fn)


def hessian_symmetry_error(problem, x: FactoredPoint, seed=None) -> float:
    """|g(H xi, eta) - g(xi, H eta)| for unit xi, eta, relative to the larger of the two terms (floored at 1)."""
    rng = np.random.default_rng(seed)
    xi, eta = random_tangent(x, rng), random_tangent(x, rng)
    _, H = _hess(problem, x)
    a, b = inner(x, H(xi), eta), inner(x, xi, H(eta))
    return abs(a - b) / max(1.0, abs(a), abs(b))


def taylor_slope(problem, x: FactoredPoint, seed=None, ts=None) -> float:
    """Log-log slope of the second-order model error along a curve with zero covariant acceleration.

    The curve ``x + t xi - t^2/2 A(xi, xi)`` (``A`` the connection term)
    agrees with the geodesic to second order, so the model error decays
    like ``t^3`` when gradient and Hessian are right.  Plain factor
    addition would only show ``t^2``.  Each ``t`` is evaluated in both
    directions and the larger error kept.
    """
    xi = random_tangent(x, seed)
    eg, H = _hess(problem, x)
    g = riemannian_gradient(x, eg)
    A = connection_correction(x, xi, xi)
    f0 = problem.cost(x)
    d1 = inner(x, g, xi)
    d2 = inner(x, H(xi), xi)
    if ts is None:
        ts = np.logspace(-1.5, -3.5, 9)

    def model_error(t):
        y = FactoredPoint(x.U + t * xi.U - 0.5 * t * t * A.U, x.V + t * xi.V - 0.5 * t * t * A.V, check=False)
        return problem.cost(y) - f0 - t * d1 - 0.5 * t * t * d2

    # max over +-t equals |odd part| + |even part| of the error, so the t^3
    # and t^4 terms cannot cancel at some t and fake a shallow slope
    errs = [max(abs(model_error(t)), abs(model_error(-t))) for t in ts]
    errs = np.asarray(errs)
    keep = errs > 1e-13 * max(1.0, abs(f0))
    if keep.sum() < 3:
        # model exact to roundoff along this direction
        return np.inf
    return float(np.polyfit(np.log(ts[keep]), np.log(errs[keep]), 1)[0])


def geometry_report(K: int, r: int, seed: int = 0) -> dict:
    """Run every check at one random point; returns a flat dict of errors/slopes."""
    shape = ManifoldShape(K, r)
    x = random_point(shape, [seed, K, r, 1])
    out = {
        "K": K,
        "r": r,
        "seed": seed,
        "metric": metric_invariance_error(x, [seed, 2]),
        "horizontal": horizontality_error(x, [seed, 3]),
        "idempotence": projection_idempotence_error(x, [seed, 4]),
    }
    for name, problem in random_problems(K, r, seed).items():
        out[f"gradient_{name}"] = gradient_fd_error(problem, x, [seed, 5])
        out[f"symmetry_{name}"] = hessian_symmetry_error(problem, x, [seed, 6])
        out[f"taylor_{name}"] = taylor_slope(problem, x, [seed, 7])
    return out


def report_passes(rep: dict, th: CheckThresholds = CheckThresholds()) -> dict:
    """Map each check name in ``rep`` to pass/fail under ``th``."""
    verdict = {}
    for key, val in rep.items():
        kind = key.split("_")[0]
        if kind in ("K", "r", "seed"):
            continue
        if kind == "taylor":
            verdict[key] = val >= th.taylor_slope
        else:
            verdict[key] = val <= getattr(th, kind)
    return verdict
