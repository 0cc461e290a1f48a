"""Riemannian trust-region minimization on the factored rank-r quotient.

The outer loop follows the classical accept/reject scheme driven by the
ratio of actual to predicted decrease; each subproblem

    min  g(xi, grad) + 1/2 g(xi, Hess[xi])   s.t.  g(xi, xi) <= delta^2

is solved inexactly by truncated conjugate gradients (Steihaug-Toint).
Any object with ``shape``, ``cost``, ``euclidean_gradient`` and
``euclidean_hessian_vec`` can be minimized.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from functools import partial
from typing import Protocol

import numpy as np

from .manifold import (
    ConditioningWarning,
    FactoredPoint,
    ManifoldShape,
    TangentVector,
    hessian_operator,
    inner,
    project_horizontal,
    retract,
    riemannian_gradient,
)

__all__ = [
    "CostProblem",
    "TrustRegionConfig",
    "SolveReport",
    "NumericalFailure",
    "minimize",
    "solve_subproblem",
]

log = logging.getLogger(__name__)

RADIUS_FLOOR = 1e-14


class CostProblem(Protocol):
    shape: ManifoldShape

    def cost(self, x: FactoredPoint) -> float: ...

    def euclidean_gradient(self, x: FactoredPoint) -> TangentVector: ...

    def euclidean_hessian_vec(self, x: FactoredPoint, xi: TangentVector) -> TangentVector: ...


@dataclass(frozen=True)
class TrustRegionConfig:
    """Trust-region parameters.

    ``delta0`` and ``delta_max`` default to ``sqrt(K r)`` and 16 times that
    when left as ``None``.
    """

    delta0: float | None = None
    delta_max: float | None = None
    accept_threshold: float = 0.1
    grad_tol: float = 1e-6
    max_outer_iters: int = 500
    max_inner_iters: int | None = None
    inner_kappa: float = 0.1
    inner_theta: float = 1.0

    def __post_init__(self):
        if not 0 < self.accept_threshold <= 0.25:
            raise ValueError("accept_threshold must lie in (0, 0.25]")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.delta0 is not None and self.delta_max is not None and self.delta0 > self.delta_max:
            raise ValueError("delta0 must not exceed delta_max")

    def resolved(self, shape: ManifoldShape) -> "TrustRegionConfig":
        """Copy with radius and inner-iteration defaults filled in for ``shape``."""
        d0 = self.delta0
        dmax = self.delta_max
        if d0 is None:
            d0 = math.sqrt(shape.K * shape.r)
            if dmax is not None:
                d0 = min(d0, dmax)
        if dmax is None:
            dmax = 16.0 * d0
        inner_cap = self.max_inner_iters if self.max_inner_iters is not None else shape.dim
        return replace(self, delta0=d0, delta_max=dmax, max_inner_iters=inner_cap)


@dataclass
class SolveReport:
    final_point: FactoredPoint
    final_cost: float
    final_grad_norm: float
    outer_iters: int
    converged: bool
    termination_reason: str  # "grad_tol" | "max_iters" | "radius_collapse"
    cost_history: list | None = None
    inner_iters: int = 0
    accepted: int = 0


class NumericalFailure(FloatingPointError):
    """Cost or gradient became non-finite; ``last_point`` is the last good iterate."""

    def __init__(self, msg, last_point):
        super().__init__(msg)
        self.last_point = last_point


def solve_subproblem(x, grad, hess_operator, delta, cfg: TrustRegionConfig):
    """Truncated CG for the trust-region model at ``x``.

    ``hess_operator`` maps a horizontal vector to a horizontal vector.
    Starts from the zero step and stops on negative curvature, on crossing
    the boundary, when the residual falls below
    ``|grad| min(|grad|^theta, kappa)``, or after ``max_inner_iters``.
    Returns ``(step, predicted_decrease, boundary_hit)``.
    """
    return _truncated_cg(x, grad, hess_operator, delta, cfg)[:3]


def _truncated_cg(x, grad, hess_operator, delta, cfg):
    zero = TangentVector(np.zeros_like(grad.U), np.zeros_like(grad.V))
    r_r = inner(x, grad, grad)
    if not r_r > 0 or not delta > 0:
        return zero, 0.0, False, 0
    max_inner = cfg.max_inner_iters if cfg.max_inner_iters is not None else x.shape.dim
    norm_r0 = math.sqrt(r_r)
    stop = norm_r0 * min(norm_r0**cfg.inner_theta, cfg.inner_kappa)
    delta2 = delta * delta

    eta = zero
    Heta = zero
    r = grad
    d = -r
    e_e = 0.0  # <eta, eta>
    e_d = 0.0  # <eta, d>
    d_d = r_r  # <d, d>
    boundary = False
    j = 0
    for j in range(1, max_inner + 1):
        Hd = hess_operator(d)
        d_Hd = inner(x, d, Hd)
        alpha = r_r / d_Hd if d_Hd != 0 else math.inf
        e_e_new = e_e + 2.0 * alpha * e_d + alpha * alpha * d_d
        if d_Hd <= 0 or e_e_new >= delta2:
            # step to the boundary along d
            disc = e_d * e_d + d_d * (delta2 - e_e)
            tau = (-e_d + math.sqrt(max(disc, 0.0))) / d_d
            eta = eta.axpy(tau, d)
            Heta = Heta.axpy(tau, Hd)
            boundary = True
            break
        eta = eta.axpy(alpha, d)
        Heta = Heta.axpy(alpha, Hd)
        e_e = e_e_new
        r = r.axpy(alpha, Hd)
        r_r_new = inner(x, r, r)
        if math.sqrt(r_r_new) <= stop:
            break
        beta = r_r_new / r_r
        r_r = r_r_new
        d = project_horizontal(x, (-r).axpy(beta, d))
        e_d = beta * (e_d + alpha * d_d)
        d_d = r_r + beta * beta * d_d
    model = inner(x, grad, eta) + 0.5 * inner(x, eta, Heta)
    if model > 0:
        # roundoff pushed the model uphill; fall back to the Cauchy step
        gHg = inner(x, grad, hess_operator(grad))
        gn = math.sqrt(inner(x, grad, grad))
        tau = delta / gn
        if gHg > 0:
            tau = min(tau, gn * gn / gHg)
        eta = grad * (-tau)
        model = -tau * gn * gn + 0.5 * tau * tau * gHg
        boundary = tau * gn >= delta * (1 - 1e-12)
    return eta, max(-model, 0.0), boundary, j


def _evaluate(problem, x, last_good):
    f = problem.cost(x)
    eg = problem.euclidean_gradient(x)
    if not math.isfinite(f) or not (np.all(np.isfinite(eg.U)) and np.all(np.isfinite(eg.V))):
        raise NumericalFailure("non-finite cost or gradient", last_good)
    g = riemannian_gradient(x, eg)
    gn = math.sqrt(max(inner(x, g, g), 0.0))
    return f, eg, g, gn


def minimize(problem: CostProblem, x0: FactoredPoint, cfg: TrustRegionConfig | None = None, record=False):
    """Minimize ``problem.cost`` from ``x0``.

    Accepted costs are monotonically non-increasing.  Terminates when the
    Riemannian gradient norm drops to ``cfg.grad_tol`` (converged), after
    ``cfg.max_outer_iters`` iterations, or when the radius collapses below
    1e-14.  Raises :class:`NumericalFailure` on NaN/Inf.
    """
    cfg = (cfg or TrustRegionConfig()).resolved(problem.shape)
    x = x0
    f, eg, g, gn = _evaluate(problem, x, x)
    delta = cfg.delta0
    history = [f] if record else None
    inner_total = 0
    accepted = 0
    reason = "max_iters"
    k = 0
    while True:
        if gn <= cfg.grad_tol:
            reason = "grad_tol"
            break
        if k >= cfg.max_outer_iters:
            reason = "max_iters"
            break
        if delta < RADIUS_FLOOR:
            reason = "radius_collapse"
            break
        k += 1

        if hasattr(problem, "ehess_operator"):
            ehess_fn = problem.ehess_operator(x)
        else:
            ehess_fn = partial(problem.euclidean_hessian_vec, x)
        hess = hessian_operator(x, eg, ehess_fn)

        step, pred, boundary, n_inner = _truncated_cg(x, g, hess, delta, cfg)
        inner_total += n_inner

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConditioningWarning)
            x_new = retract(x, step)
        rho = -math.inf
        if not x_new.degraded:
            f_new = problem.cost(x_new)
            if not math.isfinite(f_new):
                raise NumericalFailure("non-finite cost", x)
            # regularize the ratio so that roundoff-level decreases near
            # the optimum are still judged correctly
            reg = max(1.0, abs(f)) * np.finfo(float).eps * 1e3
            rho = (f - f_new + reg) / (pred + reg)

        if rho < 0.25:
            delta *= 0.25
        elif rho > 0.75 and boundary:
            delta = min(2.0 * delta, cfg.delta_max)

        if rho > cfg.accept_threshold:
            if f_new < f:
                _, eg, g, gn = _evaluate(problem, x_new, x)
                x, f = x_new, f_new
                accepted += 1
            elif rho >= 0.25:
                delta *= 0.25
        if record:
            history.append(f)
        log.debug("iter %d f=%.6e |g|=%.3e delta=%.3e rho=%.3f", k, f, gn, delta, rho)

    return SolveReport(
        final_point=x,
        final_cost=f,
        final_grad_norm=gn,
        outer_iters=k,
        converged=reason == "grad_tol",
        termination_reason=reason,
        cost_history=history,
        inner_iters=inner_total,
        accepted=accepted,
    )
