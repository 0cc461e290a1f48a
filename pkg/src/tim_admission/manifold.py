"""Quotient geometry of rank-r matrices factored as X = U V^T.

A point is a pair of full-column-rank K x r factors (U, V).  Two pairs
represent the same matrix when they differ by (U M^{-1}, V M^T) for an
invertible r x r matrix M, so every geometric object below is expressed
in terms of horizontal representatives at the chosen pair.

The metric is

    g_x(xi, eta) = Tr((V^T V) xi_U^T eta_U) + Tr((U^T U) xi_V^T eta_V)

which is invariant along the equivalence classes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "ManifoldShape",
    "FactoredPoint",
    "TangentVector",
    "RankDeficiencyError",
    "ConditioningWarning",
    "inner",
    "norm",
    "project_horizontal",
    "vertical_vector",
    "riemannian_gradient",
    "riemannian_hessian",
    "hessian_operator",
    "connection_correction",
    "retract",
    "random_point",
    "random_tangent",
]

# smallest/largest Cholesky pivot below which a Gram matrix is singular
PIVOT_RTOL = 1e-12
# condition number of a Gram matrix past which a retraction is flagged
CONDITION_WARN = 1e10


class RankDeficiencyError(np.linalg.LinAlgError):
    """A factor does not have full column rank."""


class ConditioningWarning(RuntimeWarning):
    """A retraction produced a badly conditioned factor."""


@dataclass(frozen=True)
class ManifoldShape:
    """Side length ``K`` of the square matrix and rank parameter ``r``."""

    K: int
    r: int

    def __post_init__(self):
        if int(self.K) != self.K or int(self.r) != self.r:
            raise TypeError("K and r must be integers")
        if not 1 <= self.r <= self.K:
            raise ValueError(f"need 1 <= r <= K, got K={self.K}, r={self.r}")

    @property
    def dim(self) -> int:
        """Dimension of the quotient (the rank-r matrix manifold)."""
        return 2 * self.K * self.r - self.r * self.r


def _gram_inverse(A, name):
    G = A.T @ A
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(f"{name}^T {name} is not positive definite") from None
    piv = np.diag(L) ** 2
    if piv.min() < PIVOT_RTOL * piv.max():
        raise RankDeficiencyError(f"{name} is rank deficient (pivot ratio {piv.min() / piv.max():.3g})")
    Linv = np.linalg.inv(L)
    return G, Linv.T @ Linv


class FactoredPoint:
    """A pair of factors ``(U, V)`` standing for ``X = U V^T``.

    Gram matrices and their inverses are computed lazily and cached; a
    rank-deficient pair is rejected the first time they are needed (or
    immediately when ``check=True``, the default).
    """

    degraded = False

    def __init__(self, U, V, check=True):
        U = np.array(U, dtype=float, ndmin=2)
        V = np.array(V, dtype=float, ndmin=2)
        if U.shape != V.shape:
            raise ValueError(f"factor shapes differ: {U.shape} vs {V.shape}")
        if U.shape[1] > U.shape[0]:
            raise ValueError(f"rank {U.shape[1]} exceeds side {U.shape[0]}")
        U.flags.writeable = False
        V.flags.writeable = False
        self.U = U
        self.V = V
        if check:
            self.Uinv
            self.Vinv

    @property
    def shape(self) -> ManifoldShape:
        return ManifoldShape(*self.U.shape)

    @cached_property
    def _ugram(self):
        return _gram_inverse(self.U, "U")

    @cached_property
    def _vgram(self):
        return _gram_inverse(self.V, "V")

    @property
    def UtU(self):
        return self._ugram[0]

    @property
    def VtV(self):
        return self._vgram[0]

    @property
    def Uinv(self):
        """(U^T U)^{-1}"""
        return self._ugram[1]

    @property
    def Vinv(self):
        """(V^T V)^{-1}"""
        return self._vgram[1]

    def condition(self) -> float:
        """Largest condition number of the two Gram matrices."""
        eu = np.linalg.eigvalsh(self.UtU)
        ev = np.linalg.eigvalsh(self.VtV)
        if eu[0] <= 0 or ev[0] <= 0:
            return np.inf
        return float(max(eu[-1] / eu[0], ev[-1] / ev[0]))

    def matrix(self):
        return self.U @ self.V.T

    def __repr__(self):
        K, r = self.U.shape
        return f"FactoredPoint(K={K}, r={r})"


@dataclass(frozen=True, eq=False)
class TangentVector:
    """An ambient tangent pair ``(Z_U, Z_V)``; supports vector-space arithmetic."""

    U: np.ndarray
    V: np.ndarray

    def __add__(self, other):
        return TangentVector(self.U + other.U, self.V + other.V)

    def __sub__(self, other):
        return TangentVector(self.U - other.U, self.V - other.V)

    def __neg__(self):
        return TangentVector(-self.U, -self.V)

    def __mul__(self, a):
        return TangentVector(a * self.U, a * self.V)

    __rmul__ = __mul__

    def __truediv__(self, a):
        return TangentVector(self.U / a, self.V / a)

    @classmethod
    def zeros(cls, shape):
        if isinstance(shape, ManifoldShape):
            shape = (shape.K, shape.r)
        return cls(np.zeros(shape), np.zeros(shape))

    def axpy(self, a, other):
        """Return ``self + a * other``."""
        return TangentVector(self.U + a * other.U, self.V + a * other.V)

    def euclidean_inner(self, other) -> float:
        return float(np.vdot(self.U, other.U) + np.vdot(self.V, other.V))


def _check(x, *vecs):
    for v in vecs:
        if v.U.shape != x.U.shape or v.V.shape != x.V.shape:
            raise ValueError(
                f"tangent shape {v.U.shape}/{v.V.shape} does not match point {x.U.shape}"
            )


def inner(x: FactoredPoint, xi: TangentVector, eta: TangentVector) -> float:
    """Metric ``Tr((V^T V) xi_U^T eta_U) + Tr((U^T U) xi_V^T eta_V)``."""
    if xi.U.shape != x.U.shape or eta.U.shape != x.U.shape:
        _check(x, xi, eta)
    # Tr(G A^T B) = sum((A G) * B) for symmetric G
    return float(np.vdot(xi.U @ x.VtV, eta.U) + np.vdot(xi.V @ x.UtU, eta.V))


def norm(x: FactoredPoint, xi: TangentVector) -> float:
    return float(np.sqrt(max(inner(x, xi, xi), 0.0)))


def _sym(A):
    return 0.5 * (A + A.T)


def horizontal_lambda(x: FactoredPoint, eta: TangentVector):
    """The r x r matrix Lambda making ``(eta_U + U Lambda, eta_V - V Lambda^T)`` horizontal."""
    return 0.5 * (eta.V.T @ x.V @ x.Vinv - x.Uinv @ x.U.T @ eta.U)


def project_horizontal(x: FactoredPoint, eta: TangentVector) -> TangentVector:
    """Orthogonal projection of an ambient pair onto the horizontal space at ``x``."""
    _check(x, eta)
    lam = horizontal_lambda(x, eta)
    return TangentVector(eta.U + x.U @ lam, eta.V - x.V @ lam.T)


def vertical_vector(x: FactoredPoint, lam) -> TangentVector:
    """The vertical direction ``(-U Lambda, V Lambda^T)`` tangent to the class of ``x``."""
    lam = np.asarray(lam, dtype=float)
    return TangentVector(-x.U @ lam, x.V @ lam.T)


def riemannian_gradient(x: FactoredPoint, egrad: TangentVector) -> TangentVector:
    """Convert Euclidean partials ``(df/dU, df/dV)`` into the Riemannian gradient."""
    _check(x, egrad)
    return TangentVector(egrad.U @ x.Vinv, egrad.V @ x.Uinv)


def connection_correction(x: FactoredPoint, xi: TangentVector, eta: TangentVector) -> TangentVector:
    """Christoffel term ``(A_U, A_V)`` of the total-space connection ``nabla_xi eta``."""
    U, V = x.U, x.V
    AU = (eta.U @ _sym(xi.V.T @ V) + xi.U @ _sym(eta.V.T @ V) - U @ _sym(eta.V.T @ xi.V)) @ x.Vinv
    AV = (eta.V @ _sym(xi.U.T @ U) + xi.V @ _sym(eta.U.T @ U) - V @ _sym(eta.U.T @ xi.U)) @ x.Uinv
    return TangentVector(AU, AV)


def riemannian_hessian(
    x: FactoredPoint, egrad: TangentVector, ehess: TangentVector, xi: TangentVector
) -> TangentVector:
    """Horizontal lift of ``Hess f(x)[xi]``.

    ``ehess`` is the Euclidean directional derivative of ``egrad`` along
    ``xi``.  The gradient field is differentiated (including the Gram
    inverses), corrected by the connection term and then projected.
    """
    _check(x, egrad, ehess, xi)
    Uinv, Vinv = x.Uinv, x.Vinv
    grad = TangentVector(egrad.U @ Vinv, egrad.V @ Uinv)
    # D(A^{-1})[B] = -A^{-1} B A^{-1}, with D(V^T V)[xi] = 2 Sym(xi_V^T V)
    dU = ehess.U @ Vinv - egrad.U @ (Vinv @ (2.0 * _sym(xi.V.T @ x.V)) @ Vinv)
    dV = ehess.V @ Uinv - egrad.V @ (Uinv @ (2.0 * _sym(xi.U.T @ x.U)) @ Uinv)
    corr = connection_correction(x, xi, grad)
    return project_horizontal(x, TangentVector(dU + corr.U, dV + corr.V))


def hessian_operator(x: FactoredPoint, egrad: TangentVector, ehess_fn):
    """Return ``xi -> Hess f(x)[xi]`` with the point-dependent terms precomputed.

    ``ehess_fn(xi)`` must return the Euclidean Hessian-vector product at
    ``x``.  Same operator as :func:`riemannian_hessian`, with the
    derivative of the Gram inverses and the connection term merged:

        H_U = (ehess_U - grad_U Sym(xi_V^T V) + xi_U Sym(grad_V^T V) - U Sym(grad_V^T xi_V)) (V^T V)^{-1}

    and symmetrically for V, followed by the horizontal projection.
    """
    U, V, Uinv, Vinv = x.U, x.V, x.Uinv, x.Vinv
    UtU, VtV = x.UtU, x.VtV
    gU = egrad.U @ Vinv
    gV = egrad.V @ Uinv
    sgV = _sym(gV.T @ V)
    sgU = _sym(gU.T @ U)
    UinvUt = Uinv @ U.T
    VVinv = V @ Vinv

    def apply(xi):
        eh = ehess_fn(xi)
        a = xi.V.T @ V
        b = gV.T @ xi.V
        c = xi.U.T @ U
        d = gU.T @ xi.U
        hU = (eh.U - gU @ (0.5 * (a + a.T)) + xi.U @ sgV - U @ (0.5 * (b + b.T))) @ Vinv
        hV = (eh.V - gV @ (0.5 * (c + c.T)) + xi.V @ sgU - V @ (0.5 * (d + d.T))) @ Uinv
        lam = 0.5 * (hV.T @ VVinv - UinvUt @ hU)
        return TangentVector(hU + U @ lam, hV - V @ lam.T)

    return apply


def retract(x: FactoredPoint, xi: TangentVector, warn=True) -> FactoredPoint:
    """Move from ``x`` along ``xi`` by plain factor addition.

    The result is not re-orthogonalised.  If it is rank deficient, or its
    Gram matrices are worse conditioned than ``CONDITION_WARN``, a
    :class:`ConditioningWarning` is issued (when ``warn``) and the point is
    returned unchecked; its ``degraded`` attribute is set.
    """
    _check(x, xi)
    y = FactoredPoint(x.U + xi.U, x.V + xi.V, check=False)
    try:
        y.Uinv, y.Vinv
        bad = y.condition() > CONDITION_WARN
    except RankDeficiencyError:
        bad = True
    y.degraded = bad
    if bad and warn:
        warnings.warn("retraction left the well-conditioned rank-r set", ConditioningWarning, stacklevel=2)
    return y


def random_point(shape: ManifoldShape, seed=None) -> FactoredPoint:
    """I.i.d. standard normal factors."""
    rng = np.random.default_rng(seed)
    return FactoredPoint(rng.standard_normal((shape.K, shape.r)), rng.standard_normal((shape.K, shape.r)))


def random_tangent(x: FactoredPoint, seed=None) -> TangentVector:
    """Unit-norm horizontal vector drawn from a projected normal pair."""
    rng = np.random.default_rng(seed)
    eta = project_horizontal(x, TangentVector(rng.standard_normal(x.U.shape), rng.standard_normal(x.V.shape)))
    return eta / norm(x, eta)
