"""Compiled trust-region solver for small dense completion problems.

Admission control solves thousands of completion problems on grids of at
most a couple of dozen users, where per-call numpy overhead dominates the
generic solver.  ``minimize_completion`` runs exactly the iteration of
:func:`tim_admission.trust_region.minimize` (same model, truncated CG,
radius rule and acceptance test) on the masked least-squares cost, inside
one numba-compiled loop.  Results agree with the generic solver up to
floating-point roundoff.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .manifold import PIVOT_RTOL, CONDITION_WARN, FactoredPoint
from .trust_region import RADIUS_FLOOR, NumericalFailure, SolveReport, TrustRegionConfig

__all__ = ["minimize_completion"]

_REASONS = ("grad_tol", "max_iters", "radius_collapse")
_EPS_REG = np.finfo(float).eps * 1e3


@njit(cache=True)
def _gram(A):
    G = A.T @ A
    r = G.shape[0]
    L = np.zeros((r, r))
    for j in range(r):
        s = G[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0:
            return G, G, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, r):
            t = G[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    pmin = np.inf
    pmax = 0.0
    for j in range(r):
        p = L[j, j] * L[j, j]
        pmin = min(pmin, p)
        pmax = max(pmax, p)
    if pmin < PIVOT_RTOL * pmax:
        return G, G, False
    Linv = np.linalg.inv(L)
    return G, Linv.T @ Linv, True


@njit(cache=True)
def _cond(G):
    e = np.linalg.eigvalsh(G)
    if e[0] <= 0:
        return np.inf
    return e[-1] / e[0]


@njit(cache=True)
def _inner(UtU, VtV, aU, aV, bU, bV):
    return np.sum((aU @ VtV) * bU) + np.sum((aV @ UtU) * bV)


@njit(cache=True)
def _sym(A):
    return 0.5 * (A + A.T)


@njit(cache=True)
def _hess(U, V, Uinv, Vinv, M, R2, gU, gV, sgU, sgV, UinvUt, VVinv, xU, xV):
    dR2 = 2.0 * M * (xU @ V.T + U @ xV.T)
    ehU = dR2 @ V + R2 @ xV
    ehV = dR2.T @ U + R2.T @ xU
    hU = (ehU - gU @ _sym(xV.T @ V) + xU @ sgV - U @ _sym(gV.T @ xV)) @ Vinv
    hV = (ehV - gV @ _sym(xU.T @ U) + xV @ sgU - V @ _sym(gU.T @ xU)) @ Uinv
    lam = 0.5 * (hV.T @ VVinv - UinvUt @ hU)
    return hU + U @ lam, hV - V @ lam.T


@njit(cache=True)
def _solve(U, V, M, T, delta0, delta_max, accept, grad_tol, max_outer, max_inner, kappa, theta, record):
    hist = np.empty(max_outer + 1 if record else 0)
    UtU, Uinv, okU = _gram(U)
    VtV, Vinv, okV = _gram(V)
    R = M * (U @ V.T) - T
    f = np.sum(R * R)
    egU = 2.0 * (R @ V)
    egV = 2.0 * (R.T @ U)
    if not (np.isfinite(f) and np.all(np.isfinite(egU)) and np.all(np.isfinite(egV))):
        return U, V, f, np.nan, 0, 3, 0, 0, hist
    gU = egU @ Vinv
    gV = egV @ Uinv
    gn = math.sqrt(max(_inner(UtU, VtV, gU, gV, gU, gV), 0.0))
    if record:
        hist[0] = f
    delta = delta0
    inner_total = 0
    accepted = 0
    k = 0
    status = 1
    while True:
        if gn <= grad_tol:
            status = 0
            break
        if k >= max_outer:
            status = 1
            break
        if delta < RADIUS_FLOOR:
            status = 2
            break
        k += 1

        R2 = 2.0 * R
        sgV = _sym(gV.T @ V)
        sgU = _sym(gU.T @ U)
        UinvUt = Uinv @ U.T
        VVinv = V @ Vinv

        # truncated CG
        eU = np.zeros_like(U)
        eV = np.zeros_like(V)
        HeU = np.zeros_like(U)
        HeV = np.zeros_like(V)
        r_r = _inner(UtU, VtV, gU, gV, gU, gV)
        boundary = False
        j = 0
        if r_r > 0 and delta > 0:
            norm_r0 = math.sqrt(r_r)
            stop = norm_r0 * min(norm_r0**theta, kappa)
            delta2 = delta * delta
            rU = gU.copy()
            rV = gV.copy()
            dU = -rU
            dV = -rV
            e_e = 0.0
            e_d = 0.0
            d_d = r_r
            for j in range(1, max_inner + 1):
                HdU, HdV = _hess(U, V, Uinv, Vinv, M, R2, gU, gV, sgU, sgV, UinvUt, VVinv, dU, dV)
                d_Hd = _inner(UtU, VtV, dU, dV, HdU, HdV)
                alpha = r_r / d_Hd if d_Hd != 0 else np.inf
                e_e_new = e_e + 2.0 * alpha * e_d + alpha * alpha * d_d
                if d_Hd <= 0 or e_e_new >= delta2:
                    disc = e_d * e_d + d_d * (delta2 - e_e)
                    tau = (-e_d + math.sqrt(max(disc, 0.0))) / d_d
                    eU = eU + tau * dU
                    eV = eV + tau * dV
                    HeU = HeU + tau * HdU
                    HeV = HeV + tau * HdV
                    boundary = True
                    break
                eU = eU + alpha * dU
                eV = eV + alpha * dV
                HeU = HeU + alpha * HdU
                HeV = HeV + alpha * HdV
                e_e = e_e_new
                rU = rU + alpha * HdU
                rV = rV + alpha * HdV
                r_r_new = _inner(UtU, VtV, rU, rV, rU, rV)
                if math.sqrt(r_r_new) <= stop:
                    break
                beta = r_r_new / r_r
                r_r = r_r_new
                pU = -rU + beta * dU
                pV = -rV + beta * dV
                lam = 0.5 * (pV.T @ VVinv - UinvUt @ pU)
                dU = pU + U @ lam
                dV = pV - V @ lam.T
                e_d = beta * (e_d + alpha * d_d)
                d_d = r_r + beta * beta * d_d
            model = _inner(UtU, VtV, gU, gV, eU, eV) + 0.5 * _inner(UtU, VtV, eU, eV, HeU, HeV)
            if model > 0:
                HgU, HgV = _hess(U, V, Uinv, Vinv, M, R2, gU, gV, sgU, sgV, UinvUt, VVinv, gU, gV)
                gHg = _inner(UtU, VtV, gU, gV, HgU, HgV)
                gn2 = _inner(UtU, VtV, gU, gV, gU, gV)
                gnc = math.sqrt(gn2)
                tau = delta / gnc
                if gHg > 0:
                    tau = min(tau, gnc * gnc / gHg)
                eU = -tau * gU
                eV = -tau * gV
                model = -tau * gnc * gnc + 0.5 * tau * tau * gHg
                boundary = tau * gnc >= delta * (1 - 1e-12)
            pred = max(-model, 0.0)
        else:
            pred = 0.0
        inner_total += j

        # trial point
        Un = U + eU
        Vn = V + eV
        UtUn, Uinvn, okU = _gram(Un)
        VtVn, Vinvn, okV = _gram(Vn)
        degraded = not (okU and okV)
        if not degraded:
            degraded = max(_cond(UtUn), _cond(VtVn)) > CONDITION_WARN
        rho = -np.inf
        if not degraded:
            Rn = M * (Un @ Vn.T) - T
            fn = np.sum(Rn * Rn)
            if not np.isfinite(fn):
                return U, V, f, gn, k, 3, inner_total, accepted, hist[: k if record else 0]
            reg = max(1.0, abs(f)) * _EPS_REG
            rho = (f - fn + reg) / (pred + reg)

        if rho < 0.25:
            delta *= 0.25
        elif rho > 0.75 and boundary:
            delta = min(2.0 * delta, delta_max)

        if rho > accept:
            if fn < f:
                egU = 2.0 * (Rn @ Vn)
                egV = 2.0 * (Rn.T @ Un)
                if not (np.all(np.isfinite(egU)) and np.all(np.isfinite(egV))):
                    return U, V, f, gn, k, 3, inner_total, accepted, hist[: k if record else 0]
                U, V, R, f = Un, Vn, Rn, fn
                UtU, Uinv, VtV, Vinv = UtUn, Uinvn, VtVn, Vinvn
                gU = egU @ Vinv
                gV = egV @ Uinv
                gn = math.sqrt(max(_inner(UtU, VtV, gU, gV, gU, gV), 0.0))
                accepted += 1
            elif rho >= 0.25:
                delta *= 0.25
        if record:
            hist[k] = f
    return U, V, f, gn, k, status, inner_total, accepted, hist[: k + 1 if record else 0]


def minimize_completion(problem, x0: FactoredPoint, cfg: TrustRegionConfig | None = None, record=False):
    """Compiled equivalent of ``minimize(problem, x0, cfg)`` for a dense :class:`CompletionProblem`."""
    if not getattr(problem, "dense", False):
        raise ValueError("compiled solver needs a dense completion problem")
    cfg = (cfg or TrustRegionConfig()).resolved(problem.shape)
    U, V, f, gn, k, status, n_inner, accepted, hist = _solve(
        np.ascontiguousarray(x0.U, dtype=float),
        np.ascontiguousarray(x0.V, dtype=float),
        problem._M,
        problem._T,
        float(cfg.delta0),
        float(cfg.delta_max),
        float(cfg.accept_threshold),
        float(cfg.grad_tol),
        int(cfg.max_outer_iters),
        int(cfg.max_inner_iters),
        float(cfg.inner_kappa),
        float(cfg.inner_theta),
        bool(record),
    )
    if status == 3:
        raise NumericalFailure("non-finite cost or gradient", FactoredPoint(U, V, check=False))
    return SolveReport(
        final_point=FactoredPoint(U, V),
        final_cost=float(f),
        final_grad_norm=float(gn),
        outer_iters=int(k),
        converged=status == 0,
        termination_reason=_REASONS[status],
        cost_history=hist.tolist() if record else None,
        inner_iters=int(n_inner),
        accepted=int(accepted),
    )
