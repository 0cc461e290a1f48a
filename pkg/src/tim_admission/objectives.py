"""Cost functions for topological interference management on factored matrices.

Two costs are provided, each with its Euclidean partial derivatives with
respect to the factors and the exact directional derivative of those
partials (a Hessian-vector product):

* the regularized smoothed-l1 sparsity cost over a network topology,
  ``1/2 sum_{(i,j) in links} X_ij^2 + rho sum_i (lam X_ii^2 - sqrt(X_ii^2 + eps^2))``;
* the masked completion least squares ``sum_{(i,j) in mask} (X_ij - delta_ij)^2``.

Entries of ``X = U V^T`` are only ever formed on the index sets that
appear in a cost, so gradients cost O(|links| r + K r).

User indices in :class:`NetworkTopology` are 1-based, as in topology
files.  :class:`ObservationMask` lives on its own local ``n x n`` grid and
is 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .manifold import FactoredPoint, ManifoldShape, TangentVector

__all__ = [
    "NetworkTopology",
    "ObservationMask",
    "SmoothedL1Params",
    "assemble_matrix",
    "extract_diag",
    "sparsity_cost",
    "sparsity_egrad",
    "sparsity_ehess_vec",
    "completion_cost",
    "completion_egrad",
    "completion_ehess_vec",
    "SparsityProblem",
    "CompletionProblem",
]

# below this side length the pattern products go through a dense scratch matrix
_DENSE_MAX = 24


class _Pattern:
    """Fixed sparsity pattern of an n x n matrix with fast S @ B and S^T @ B."""

    def __init__(self, n, rows, cols):
        self.n = n
        self.rows = np.asarray(rows, dtype=np.intp)
        self.cols = np.asarray(cols, dtype=np.intp)
        self.dense = n <= _DENSE_MAX
        if not self.dense:
            m = len(self.rows)
            self._R = sp.csr_matrix((np.ones(m), (self.rows, np.arange(m))), shape=(n, m))
            self._C = sp.csr_matrix((np.ones(m), (self.cols, np.arange(m))), shape=(n, m))

    def values(self, A, B):
        """Entries ``(A B^T)_ij`` on the pattern."""
        return np.einsum("ij,ij->i", A[self.rows], B[self.cols])

    def matmul(self, vals, B, transpose=False):
        """``S @ B`` (or ``S^T @ B``) with S holding ``vals`` on the pattern."""
        rows, cols = (self.cols, self.rows) if transpose else (self.rows, self.cols)
        if self.dense:
            S = np.zeros((self.n, self.n))
            S[rows, cols] = vals
            return S @ B
        P = self._C if transpose else self._R
        return P @ (vals[:, None] * B[cols])


def assemble_matrix(x: FactoredPoint):
    """Dense ``U V^T``."""
    return x.U @ x.V.T


def extract_diag(x: FactoredPoint):
    """``diag(U V^T)`` without forming the product."""
    return np.einsum("ij,ij->i", x.U, x.V)


@dataclass(frozen=True)
class NetworkTopology:
    """Directed interfering pairs ``(i, j)``, ``i != j``, among users ``1..K``.

    Desired links ``(i, i)`` are implicit and never stored.
    """

    K: int
    links: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        links = frozenset((int(i), int(j)) for i, j in self.links)
        for i, j in links:
            if i == j:
                raise ValueError(f"self link ({i}, {i}) is not an interfering pair")
            if not (1 <= i <= self.K and 1 <= j <= self.K):
                raise ValueError(f"link ({i}, {j}) out of range for K={self.K}")
        object.__setattr__(self, "links", links)

    @classmethod
    def from_pairs(cls, K, pairs):
        pairs = [tuple(p) for p in pairs]
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate links")
        return cls(K, frozenset(pairs))

    @classmethod
    def empty(cls, K):
        return cls(K, frozenset())

    @classmethod
    def fully_connected(cls, K):
        return cls(K, frozenset((i, j) for i in range(1, K + 1) for j in range(1, K + 1) if i != j))

    def __len__(self):
        return len(self.links)

    def sorted_links(self):
        return sorted(self.links)

    @cached_property
    def _pattern(self):
        arr = np.array(self.sorted_links(), dtype=np.intp).reshape(-1, 2) - 1
        return _Pattern(self.K, arr[:, 0], arr[:, 1])

    def adjacency(self):
        """Boolean K x K matrix, ``A[i-1, j-1]`` true for each link."""
        A = np.zeros((self.K, self.K), dtype=bool)
        for i, j in self.links:
            A[i - 1, j - 1] = True
        return A

    def induced_links(self, users):
        """Links with both ends in ``users`` (1-based)."""
        s = set(users)
        return sorted((i, j) for i, j in self.links if i in s and j in s)


@dataclass(frozen=True)
class ObservationMask:
    """Observed entries on an ``n x n`` grid (0-based).

    The target is 1 on diagonal entries and 0 elsewhere unless a dense
    ``target`` matrix is given, in which case its values on the observed
    entries are used.
    """

    n: int
    entries: frozenset
    target: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        entries = frozenset((int(i), int(j)) for i, j in self.entries)
        for i, j in entries:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"entry ({i}, {j}) outside {self.n}x{self.n} grid")
        object.__setattr__(self, "entries", entries)
        if self.target is not None:
            T = np.array(self.target, dtype=float)
            if T.shape != (self.n, self.n):
                raise ValueError(f"target shape {T.shape} is not {(self.n, self.n)}")
            T.flags.writeable = False
            object.__setattr__(self, "target", T)

    @classmethod
    def for_users(cls, topo: NetworkTopology, users):
        """Mask of the feasibility problem for the ordered user list ``users``.

        Local index ``k`` stands for ``users[k]``.  The diagonal and every
        link between two users of the set are observed.
        """
        users = list(users)
        pos = {u: k for k, u in enumerate(users)}
        if len(pos) != len(users):
            raise ValueError("repeated user")
        entries = {(k, k) for k in range(len(users))}
        for i, j in topo.links:
            if i in pos and j in pos:
                entries.add((pos[i], pos[j]))
        return cls(len(users), frozenset(entries))

    @classmethod
    def full(cls, n, target=None):
        return cls(n, frozenset((i, j) for i in range(n) for j in range(n)), target)

    def __len__(self):
        return len(self.entries)

    @cached_property
    def _arrays(self):
        arr = np.array(sorted(self.entries), dtype=np.intp).reshape(-1, 2)
        if self.target is None:
            target = (arr[:, 0] == arr[:, 1]).astype(float)
        else:
            target = self.target[arr[:, 0], arr[:, 1]]
        return _Pattern(self.n, arr[:, 0], arr[:, 1]), target

    def target_matrix(self):
        """Dense target with NaN outside the mask."""
        T = np.full((self.n, self.n), np.nan)
        pat, target = self._arrays
        T[pat.rows, pat.cols] = target
        return T


@dataclass(frozen=True)
class SmoothedL1Params:
    """Quadratic weight ``lam``, regularization weight ``rho``, smoothing ``epsilon``."""

    lam: float = 0.5
    rho: float = 0.01
    epsilon: float = 0.01

    def __post_init__(self):
        if self.lam < 0 or self.rho < 0:
            raise ValueError("lam and rho must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _check_topo(x, topo):
    if x.U.shape[0] != topo.K:
        raise ValueError(f"point has side {x.U.shape[0]}, topology has K={topo.K}")


def sparsity_cost(x: FactoredPoint, topo: NetworkTopology, p: SmoothedL1Params) -> float:
    _check_topo(x, topo)
    xl = topo._pattern.values(x.U, x.V)
    d = extract_diag(x)
    return float(0.5 * xl @ xl + p.rho * np.sum(p.lam * d * d - np.sqrt(d * d + p.epsilon**2)))


def _sparsity_residual(x, topo, p):
    xl = topo._pattern.values(x.U, x.V)
    d = extract_diag(x)
    sd = p.rho * (2.0 * p.lam * d - d / np.sqrt(d * d + p.epsilon**2))
    return xl, d, sd


def sparsity_egrad(x: FactoredPoint, topo: NetworkTopology, p: SmoothedL1Params) -> TangentVector:
    """``(S V, S^T U)`` with S the sparse residual (links plus diagonal)."""
    _check_topo(x, topo)
    xl, _, sd = _sparsity_residual(x, topo, p)
    pat = topo._pattern
    gU = pat.matmul(xl, x.V) + sd[:, None] * x.V
    gV = pat.matmul(xl, x.U, transpose=True) + sd[:, None] * x.U
    return TangentVector(gU, gV)


def sparsity_ehess_vec(
    x: FactoredPoint, topo: NetworkTopology, p: SmoothedL1Params, xi: TangentVector
) -> TangentVector:
    """Directional derivative of :func:`sparsity_egrad` along ``xi``."""
    _check_topo(x, topo)
    pat = topo._pattern
    U, V = x.U, x.V
    xl, d, sd = _sparsity_residual(x, topo, p)
    dxl = pat.values(xi.U, V) + pat.values(U, xi.V)
    dd = np.einsum("ij,ij->i", xi.U, V) + np.einsum("ij,ij->i", U, xi.V)
    eps2 = p.epsilon**2
    dsd = p.rho * (2.0 * p.lam - eps2 / (d * d + eps2) ** 1.5) * dd
    hU = pat.matmul(dxl, V) + pat.matmul(xl, xi.V) + dsd[:, None] * V + sd[:, None] * xi.V
    hV = (
        pat.matmul(dxl, U, transpose=True)
        + pat.matmul(xl, xi.U, transpose=True)
        + dsd[:, None] * U
        + sd[:, None] * xi.U
    )
    return TangentVector(hU, hV)


def _check_mask(x, mask):
    if x.U.shape[0] != mask.n:
        raise ValueError(f"point has side {x.U.shape[0]}, mask has n={mask.n}")


def completion_cost(x: FactoredPoint, mask: ObservationMask) -> float:
    _check_mask(x, mask)
    pat, target = mask._arrays
    res = pat.values(x.U, x.V) - target
    return float(res @ res)


def completion_egrad(x: FactoredPoint, mask: ObservationMask) -> TangentVector:
    """``(2 R V, 2 R^T U)`` with R the masked residual."""
    _check_mask(x, mask)
    pat, target = mask._arrays
    res = 2.0 * (pat.values(x.U, x.V) - target)
    return TangentVector(pat.matmul(res, x.V), pat.matmul(res, x.U, transpose=True))


def completion_ehess_vec(x: FactoredPoint, mask: ObservationMask, xi: TangentVector) -> TangentVector:
    _check_mask(x, mask)
    pat, target = mask._arrays
    U, V = x.U, x.V
    res = 2.0 * (pat.values(U, V) - target)
    dres = 2.0 * (pat.values(xi.U, V) + pat.values(U, xi.V))
    hU = pat.matmul(dres, V) + pat.matmul(res, xi.V)
    hV = pat.matmul(dres, U, transpose=True) + pat.matmul(res, xi.U, transpose=True)
    return TangentVector(hU, hV)


class SparsityProblem:
    """Sparsity cost bundled for :func:`tim_admission.trust_region.minimize`."""

    def __init__(self, topo: NetworkTopology, params: SmoothedL1Params, r: int):
        self.topo = topo
        self.params = params
        self.shape = ManifoldShape(topo.K, r)

    def cost(self, x):
        return sparsity_cost(x, self.topo, self.params)

    def euclidean_gradient(self, x):
        return sparsity_egrad(x, self.topo, self.params)

    def euclidean_hessian_vec(self, x, xi):
        return sparsity_ehess_vec(x, self.topo, self.params, xi)


class CompletionProblem:
    """Masked completion cost bundled for :func:`tim_admission.trust_region.minimize`.

    Small grids work on a dense 0/1 mask and keep the residual of the most
    recent point, since the solver asks for cost, gradient and many
    Hessian-vector products at the same point.
    """

    def __init__(self, mask: ObservationMask, r: int):
        self.mask = mask
        self.shape = ManifoldShape(mask.n, r)
        self.dense = mask.n <= _DENSE_MAX
        if self.dense:
            pat, target = mask._arrays
            self._M = np.zeros((mask.n, mask.n))
            self._M[pat.rows, pat.cols] = 1.0
            self._T = np.zeros((mask.n, mask.n))
            self._T[pat.rows, pat.cols] = target
        self._last = (None, None)

    def _residual(self, x):
        if self._last[0] is not x:
            self._last = (x, self._M * (x.U @ x.V.T) - self._T)
        return self._last[1]

    def cost(self, x):
        if not self.dense:
            return completion_cost(x, self.mask)
        R = self._residual(x)
        return float(np.vdot(R, R))

    def euclidean_gradient(self, x):
        if not self.dense:
            return completion_egrad(x, self.mask)
        R = self._residual(x)
        return TangentVector(2.0 * (R @ x.V), 2.0 * (R.T @ x.U))

    def euclidean_hessian_vec(self, x, xi):
        return self.ehess_operator(x)(xi)

    def ehess_operator(self, x):
        """``xi -> ehess(x)[xi]`` with the residual at ``x`` computed once."""
        if not self.dense:
            return lambda xi: completion_ehess_vec(x, self.mask, xi)
        U, V, M = x.U, x.V, self._M
        R2 = 2.0 * self._residual(x)
        R2t = R2.T

        def apply(xi):
            dR2 = 2.0 * M * (xi.U @ V.T + U @ xi.V.T)
            return TangentVector(dR2 @ V + R2 @ xi.V, dR2.T @ U + R2t @ xi.U)

        return apply
