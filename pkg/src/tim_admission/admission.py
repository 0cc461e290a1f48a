"""User admission control for topological interference management.

The pipeline has three stages:

1. minimize the regularized smoothed-l1 sparsity cost over K x K rank-r
   matrices and rank users by the magnitude of the diagonal of the result;
2. bisect over prefixes of that ranking, solving a masked completion
   problem to decide whether each prefix is simultaneously alignable;
3. re-solve the completion problem on the admitted prefix to obtain
   decoders (rows of U) and precoders (rows of V).

Users are numbered from 1.  A user set is feasible at rank r when some
X of rank <= r has ``X_ii = 1`` on the set and ``X_ij = 0`` on every
interfering link inside it; numerically, when the best completion cost
satisfies ``sqrt(cost / |S|) <= feasibility_tol``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .manifold import FactoredPoint, random_point
from .objectives import (
    CompletionProblem,
    NetworkTopology,
    ObservationMask,
    SmoothedL1Params,
    SparsityProblem,
    completion_cost,
    extract_diag,
)
from .trust_region import SolveReport, TrustRegionConfig, minimize
from ._compiled import minimize_completion

__all__ = [
    "AdmissionConfig",
    "AdmissionResult",
    "StageError",
    "InconsistencyError",
    "ORACLE_MAX_K",
    "induce_sparsity",
    "priority_order",
    "scalar_minimizer",
    "feasibility_check",
    "bisection_admit",
    "scan_admit",
    "design_transceivers",
    "exhaustive_oracle",
    "orthogonal_baseline",
    "run_pipeline",
]

log = logging.getLogger(__name__)

ORACLE_MAX_K = 16

# seed-stream tags
_SPARSITY, _FEASIBILITY, _DESIGN = 0, 1, 2


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


class InconsistencyError(RuntimeError):
    """A set judged feasible could not be completed to tolerance again."""


@dataclass(frozen=True)
class AdmissionConfig:
    r: int
    params: SmoothedL1Params = field(default_factory=SmoothedL1Params)
    feasibility_tol: float = 1e-3
    restarts: int = 3
    tr_config: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    seed: int = 0
    scan: bool = False
    compiled: bool = True  # compiled solver for small completion grids

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("rank must be positive")
        if not self.feasibility_tol > 0:
            raise ValueError("feasibility_tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclass
class AdmissionResult:
    """Outcome of :func:`run_pipeline`.

    ``feasibility_residual`` is the Frobenius residual
    ``||P_Omega(X) - I||_F`` of the final transceivers on the admitted set.
    """

    priority: list
    admitted: list
    N0: int
    stage1_diag: np.ndarray
    final_point: FactoredPoint | None
    feasibility_residual: float
    solve_stats: dict
    checks: dict = field(default_factory=dict)

    def to_dict(self):
        pt = self.final_point
        return {
            "N0": self.N0,
            "admitted": list(self.admitted),
            "priority": list(self.priority),
            "stage1_diag": [float(v) for v in self.stage1_diag],
            "feasibility_residual": float(self.feasibility_residual),
            "prefix_checks": {str(m): bool(v) for m, v in sorted(self.checks.items())},
            "decoders": pt.U.tolist() if pt is not None else [],
            "precoders": pt.V.tolist() if pt is not None else [],
            "iterations": {
                stage: [rep.outer_iters for rep in reps] for stage, reps in self.solve_stats.items()
            },
        }


def _rng(seed, tag, *extra):
    return np.random.default_rng([int(seed), tag, *map(int, extra)])


def orthogonal_baseline(K: int, r: int) -> int:
    """Users served by orthogonal scheduling with DoF 1/r each."""
    return min(r, K)


def induce_sparsity(topo: NetworkTopology, cfg: AdmissionConfig, record=False):
    """Stage 1: returns ``(x_star, z_star, priority, report)``.

    ``priority`` lists users (1-based) by decreasing ``|z_star|``, ties
    going to the smaller index.  At most ``cfg.restarts`` starts are tried.
    """
    if cfg.r > topo.K:
        raise ValueError(f"rank {cfg.r} exceeds K={topo.K}")
    problem = SparsityProblem(topo, cfg.params, cfg.r)
    t = scalar_minimizer(cfg.params)
    if cfg.r == topo.K and t > 0:
        # Every K x K matrix has rank <= K, so the cost separates entrywise and
        # t * I is a global minimizer.  Random starts on the full-rank set can
        # be cut off from it by the singular matrices (det cannot change sign).
        x0 = FactoredPoint(math.sqrt(t) * np.eye(topo.K), math.sqrt(t) * np.eye(topo.K))
        rep = minimize(problem, x0, cfg.tr_config, record=record)
        z = extract_diag(rep.final_point)
        return rep.final_point, z, priority_order(z), rep
    rep = None
    for attempt in range(cfg.restarts):
        # a run that stalls against the rank-deficient boundary (its radius
        # collapses) is retried from a fresh start; the best cost is kept
        rng = _rng(cfg.seed, _SPARSITY, *([attempt] if attempt else []))
        trial = minimize(problem, random_point(problem.shape, rng), cfg.tr_config, record=record)
        if rep is None or trial.final_cost < rep.final_cost:
            rep = trial
        if trial.termination_reason != "radius_collapse":
            break
    z = extract_diag(rep.final_point)
    return rep.final_point, z, priority_order(z), rep


def scalar_minimizer(params: SmoothedL1Params) -> float:
    """Positive minimizer of ``lam t^2 - sqrt(t^2 + eps^2)``; 0 when the map has none."""
    if params.lam <= 0:
        return 0.0
    half = 1.0 / (2.0 * params.lam)
    return math.sqrt(half * half - params.epsilon**2) if half > params.epsilon else 0.0


def priority_order(z):
    """Users (1-based) by decreasing ``|z|``; equal magnitudes keep index order."""
    z = np.asarray(z, dtype=float)
    order = np.lexsort((np.arange(len(z)), -np.abs(z)))
    return [int(i) + 1 for i in order]


def _certificate(n, m):
    """Full-rank n x m factors with unit diagonal product and no other constraint."""
    if n == m:
        return FactoredPoint(np.eye(n), np.eye(n))
    U = np.vander(np.linspace(1.0, 2.0, n), m, increasing=True)
    V = U / np.einsum("ij,ij->i", U, U)[:, None]
    return FactoredPoint(U, V)


def _complete(mask, m, cfg, seeds, reports=None):
    """Best completion over seeded restarts; stops early once within tolerance."""
    problem = CompletionProblem(mask, m)
    n = mask.n
    solve = minimize_completion if cfg.compiled and problem.dense else minimize
    best = None
    for rng in seeds:
        rep = solve(problem, random_point(problem.shape, rng), cfg.tr_config)
        if reports is not None:
            reports.append(rep)
        if best is None or rep.final_cost < best.final_cost:
            best = rep
        if math.sqrt(max(best.final_cost, 0.0) / n) <= cfg.feasibility_tol:
            break
    return best


def _forced_identity_block(topo, S, r):
    """Users of ``S`` that pairwise interfere both ways, if more than ``r`` of them exist.

    On such a block every entry of X is pinned, so X restricted to it is
    the identity and any rank-r approximation misses it by at least 1.
    """
    s = set(S)
    G = nx.Graph()
    G.add_edges_from((i, j) for i, j in topo.links if i < j and i in s and j in s and (j, i) in topo.links)
    for clique in nx.find_cliques(G):
        if len(clique) > r:
            return sorted(clique)[: r + 1]
    return None


def _reorder(point, perm):
    return FactoredPoint(point.U[perm], point.V[perm], check=False)


def feasibility_check(topo: NetworkTopology, S, cfg: AdmissionConfig, reports=None):
    """Decide whether the users ``S`` can be aligned at rank ``cfg.r``.

    Returns ``(feasible, residual, point)`` where ``residual`` is the
    normalized ``sqrt(cost / |S|)`` and ``point`` the best factors found
    (row ``k`` belongs to user ``S[k]``).  The verdict depends on the set
    and ``cfg`` only, not on the order of ``S``.

    Sets of at most r users and sets without internal links are certified
    feasible directly; sets containing r + 1 users that all interfere with
    each other in both directions are certified infeasible.
    """
    S = list(S)
    if not S:
        raise ValueError("empty user set")
    n = len(S)
    m = min(cfg.r, n)
    key = sorted(S)
    if len(set(key)) != n:
        raise ValueError("repeated user")
    mask = ObservationMask.for_users(topo, key)
    perm = np.argsort(np.argsort(S))
    if n <= cfg.r or len(mask) == n:
        return True, 0.0, _certificate(n, m)
    if cfg.feasibility_tol**2 * n < 1 and _forced_identity_block(topo, key, cfg.r):
        return False, 1.0 / math.sqrt(n), None
    seeds = (_rng(cfg.seed, _FEASIBILITY, k, *key) for k in range(cfg.restarts))
    best = _complete(mask, m, cfg, seeds, reports)
    residual = math.sqrt(max(best.final_cost, 0.0) / n)
    return residual <= cfg.feasibility_tol, residual, _reorder(best.final_point, perm)


def _prefix_checker(topo, pi, cfg, checks, reports):
    def feasible(m):
        if m not in checks:
            checks[m] = feasibility_check(topo, pi[:m], cfg, reports)[0]
        return checks[m]

    return feasible


def bisection_admit(topo: NetworkTopology, pi, cfg: AdmissionConfig, checks=None, reports=None):
    """Largest admissible prefix of ``pi`` by bisection.

    Checks the full prefix first; otherwise keeps ``lo`` feasible and
    ``up`` infeasible and halves until they are adjacent, then admits
    ``lo`` users.  Returns ``(N0, admitted)``.
    """
    pi = list(pi)
    K = len(pi)
    checks = {} if checks is None else checks
    feasible = _prefix_checker(topo, pi, cfg, checks, reports)
    if feasible(K):
        return K, pi
    lo, up = 0, K
    while up - lo > 1:
        i = (lo + up) // 2
        if feasible(i):
            lo = i
        else:
            up = i
    return lo, pi[:lo]


def scan_admit(topo: NetworkTopology, pi, cfg: AdmissionConfig, checks=None, reports=None):
    """Largest m such that every prefix of size <= m is feasible (linear scan)."""
    pi = list(pi)
    checks = {} if checks is None else checks
    feasible = _prefix_checker(topo, pi, cfg, checks, reports)
    m = 0
    while m < len(pi) and feasible(m + 1):
        m += 1
    return m, pi[:m]


def design_transceivers(topo: NetworkTopology, S, cfg: AdmissionConfig, reports=None) -> FactoredPoint:
    """Stage 3: decoders/precoders for an admitted set.

    Row ``k`` of ``U`` is the decoder and row ``k`` of ``V`` the precoder of
    user ``S[k]``.  Raises :class:`InconsistencyError` if no restart reaches
    the feasibility tolerance.
    """
    S = list(S)
    if not S:
        raise ValueError("empty user set")
    n = len(S)
    m = min(cfg.r, n)
    key = sorted(S)
    mask = ObservationMask.for_users(topo, key)
    perm = np.argsort(np.argsort(S))
    if n <= cfg.r or len(mask) == n:
        return _certificate(n, m)
    # the feasibility stream first, so a set that passed is re-solved identically
    seeds = itertools.chain(
        (_rng(cfg.seed, _FEASIBILITY, k, *key) for k in range(cfg.restarts)),
        (_rng(cfg.seed, _DESIGN, k, *key) for k in range(cfg.restarts)),
    )
    best = _complete(mask, m, cfg, seeds, reports)
    if math.sqrt(max(best.final_cost, 0.0) / n) > cfg.feasibility_tol:
        raise InconsistencyError(
            f"users {S} judged feasible but best residual is {math.sqrt(best.final_cost / n):.3g}"
        )
    return _reorder(best.final_point, perm)


def exhaustive_oracle(topo: NetworkTopology, cfg: AdmissionConfig):
    """Largest feasible user set by brute force over subsets.

    Cardinalities are tried from K downwards, subsets of each size in
    lexicographic order; the first feasible subset found is returned as
    ``(N_max, S_best)``.  Refuses ``K > ORACLE_MAX_K``.
    """
    K = topo.K
    if K > ORACLE_MAX_K:
        raise ValueError(f"exhaustive search refused for K={K} > {ORACLE_MAX_K}")
    users = range(1, K + 1)
    for m in range(K, min(cfg.r, K), -1):
        for S in itertools.combinations(users, m):
            if feasibility_check(topo, S, cfg)[0]:
                return m, list(S)
    m = min(cfg.r, K)
    return m, list(range(1, m + 1))


def run_pipeline(topo: NetworkTopology, cfg: AdmissionConfig) -> AdmissionResult:
    """Sparsity induction, prefix admission and transceiver design."""
    stats = {}
    try:
        _, z, pi, rep = induce_sparsity(topo, cfg)
        stats["sparsity"] = [rep]
    except Exception as exc:
        raise StageError("sparsity", exc) from exc

    checks = {}
    try:
        reports = []
        admit = scan_admit if cfg.scan else bisection_admit
        N0, S = admit(topo, pi, cfg, checks, reports)
        stats["admission"] = reports
    except Exception as exc:
        raise StageError("admission", exc) from exc

    try:
        reports = []
        point = design_transceivers(topo, S, cfg, reports) if S else None
        stats["design"] = reports
    except Exception as exc:
        raise StageError("design", exc) from exc

    residual = 0.0
    if point is not None:
        residual = math.sqrt(completion_cost(point, ObservationMask.for_users(topo, S)))
    return AdmissionResult(
        priority=pi,
        admitted=S,
        N0=N0,
        stage1_diag=z,
        final_point=point,
        feasibility_residual=residual,
        solve_stats=stats,
        checks=checks,
    )
