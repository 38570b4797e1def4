"""Incrementally maintained Kd x Kd Gram matrices and ellipsoid projection.

A :class:`GramState` keeps a symmetric positive definite matrix together with
its inverse (Sherman-Morrison) and lower Cholesky factor (rank-one update),
so that adding ``grad_mu kron x x^T`` costs O(K^3 + K^2 d^2) instead of a
fresh O(K^3 d^3) factorisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import ConvergenceError, InvalidInputError, NumericalDegeneracyError

PIVOT_TOL = 1e-12
PSD_TOL = 1e-8
REFACTOR_TOL = 1e-6


def pivoted_cholesky(a, tol=PIVOT_TOL):
    """Factor a PSD matrix as ``L @ L.T`` with ``L`` of shape (n, rank).

    Diagonal pivoting; pivots below ``tol`` are treated as zero so that
    rank-deficient inputs such as the softmax Jacobian (kernel ``1_K``) give a
    factor with at most K - 1 columns.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if np.max(np.abs(a - a.T), initial=0.0) > PSD_TOL:
        raise InvalidInputError("matrix is not symmetric")
    cols = []
    for _ in range(n):
        diag = np.diag(a)
        if diag.min() < -PSD_TOL:
            raise InvalidInputError(f"matrix is not PSD (pivot {diag.min():.3e})")
        j = int(np.argmax(diag))
        if diag[j] <= tol:
            break
        col = a[:, j] / np.sqrt(diag[j])
        cols.append(col)
        a -= np.outer(col, col)
    # whatever is left must be numerically zero or PSD-negligible
    if n and np.min(np.diag(a)) < -PSD_TOL:
        raise InvalidInputError("matrix is not PSD")
    if not cols:
        return np.zeros((n, 0))
    return np.column_stack(cols)


def chol_rank_one_update(chol, v):
    """In place: ``chol`` becomes the factor of ``chol chol^T + v v^T``."""
    x = np.array(v, dtype=float)
    n = x.shape[0]
    for k in range(n):
        lkk = chol[k, k]
        r = np.hypot(lkk, x[k])
        c = r / lkk
        s = x[k] / lkk
        chol[k, k] = r
        if k + 1 < n:
            col = chol[k + 1:, k]
            col += s * x[k + 1:]
            col /= c
            x[k + 1:] *= c
            x[k + 1:] -= s * col
    return chol


class GramState:
    """``lam * I + sum_i w_i v_i v_i^T`` with maintained inverse and Cholesky factor.

    Updates mutate the state in place and return it. Every ``audit_every``
    updates the three representations are cross-checked and the inverse and
    factor are rebuilt from the (exactly accumulated) matrix if they drifted
    by more than ``REFACTOR_TOL``.
    """

    def __init__(self, dim, lam, track_cholesky=True, audit_every=512):
        if lam <= 0:
            raise InvalidInputError("regularisation must be positive")
        self.dim = int(dim)
        self.lam = float(lam)
        self.matrix = lam * np.eye(self.dim)
        self.inverse = np.eye(self.dim) / lam
        self.chol = np.sqrt(lam) * np.eye(self.dim) if track_cholesky else None
        self.audit_every = audit_every
        self.n_updates = 0
        self.n_refactors = 0

    def copy(self):
        new = object.__new__(GramState)
        new.__dict__.update(self.__dict__)
        new.matrix = self.matrix.copy()
        new.inverse = self.inverse.copy()
        new.chol = None if self.chol is None else self.chol.copy()
        return new

    def rank_one_update(self, v, weight=1.0):
        if weight < 0:
            raise InvalidInputError("weight must be nonnegative")
        if weight == 0:
            return self
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("update vector contains non-finite entries")
        self.matrix += weight * np.outer(v, v)
        mv = self.inverse @ v
        denom = 1.0 + weight * (v @ mv)
        if denom <= 1e-14:
            raise NumericalDegeneracyError(f"Sherman-Morrison denominator {denom:.3e}")
        self.inverse -= (weight / denom) * np.outer(mv, mv)
        if self.chol is not None:
            chol_rank_one_update(self.chol, np.sqrt(weight) * v)
        self.n_updates += 1
        if self.audit_every and self.n_updates % self.audit_every == 0:
            self.audit()
        return self

    def low_rank_update(self, U):
        """Add ``U @ U.T`` (``U`` is dim x r) with one Woodbury step."""
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if not np.all(np.isfinite(U)):
            raise InvalidInputError("update vectors contain non-finite entries")
        r = U.shape[1]
        if r == 0:
            return self
        self.matrix += U @ U.T
        MU = self.inverse @ U
        cap = U.T @ MU
        cap[np.diag_indices(r)] += 1.0
        try:
            c = np.linalg.cholesky(cap)
        except np.linalg.LinAlgError:
            raise NumericalDegeneracyError("Woodbury capacitance is not positive definite") from None
        G = scipy.linalg.solve_triangular(c, MU.T, lower=True)
        self.inverse -= G.T @ G
        if self.chol is not None:
            for col in U.T:
                chol_rank_one_update(self.chol, col)
        before = self.n_updates
        self.n_updates += r
        if self.audit_every and self.n_updates // self.audit_every > before // self.audit_every:
            self.audit()
        return self

    def add_softmax_block(self, grad, x, factor=None):
        """Add ``grad kron x x^T`` as one rank-one update per factor column.

        ``factor`` may supply a precomputed ``L`` with ``grad = L L^T``;
        otherwise a pivoted Cholesky factor of ``grad`` is used.
        """
        x = np.asarray(x, dtype=float)
        if factor is None:
            factor = pivoted_cholesky(grad)
        if factor.shape[1] == 0:
            return self
        # column j of the result is vec(factor[:, j] x^T)
        U = (factor[:, None, :] * x[None, :, None]).reshape(-1, factor.shape[1])
        return self.low_rank_update(U)

    def add_identity_block(self, x, weight=1.0):
        """Add ``weight * I_K kron x x^T``."""
        x = np.asarray(x, dtype=float)
        K = self.dim // x.shape[0]
        v = np.zeros(self.dim)
        for k in range(K):
            v[:] = 0.0
            v[k * x.shape[0]:(k + 1) * x.shape[0]] = x
            self.rank_one_update(v, weight)
        return self

    def quad_form(self, v, inverse=False):
        v = np.asarray(v, dtype=float).ravel()
        m = self.inverse if inverse else self.matrix
        return float(v @ m @ v)

    def block_matrix(self, x, inverse=True):
        """K x K matrix ``(I_K kron x^T) M^{-1} (I_K kron x)``; ``x`` may be (n, d)."""
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        K = self.dim // d
        m = (self.inverse if inverse else self.matrix).reshape(K, d, K, d)
        if x.ndim == 1:
            return np.einsum("a,iajb,b->ij", x, m, x)
        return np.einsum("na,iajb,nb->nij", x, m, x)

    def block_operator_norm(self, x):
        """Largest eigenvalue of :meth:`block_matrix`; vectorised over (n, d) input."""
        return np.linalg.eigvalsh(self.block_matrix(x))[..., -1]

    def consistency_residual(self):
        eye = np.eye(self.dim)
        res = np.max(np.abs(self.matrix @ self.inverse - eye))
        if self.chol is not None:
            res = max(res, np.max(np.abs(self.chol @ self.chol.T - self.matrix)))
        return float(res)

    def refactorize(self):
        self.matrix = 0.5 * (self.matrix + self.matrix.T)
        c = np.linalg.cholesky(self.matrix)
        self.inverse = scipy.linalg.cho_solve((c, True), np.eye(self.dim))
        if self.chol is not None:
            self.chol = c
        self.n_refactors += 1
        return self

    def audit(self):
        if self.consistency_residual() > REFACTOR_TOL:
            self.refactorize()


@dataclass(frozen=True)
class Ellipsoid:
    """``{theta in Pi R^{K x d} : ||theta - center||_metric^2 <= radius_sq}``."""

    center: np.ndarray
    metric: np.ndarray
    radius_sq: float

    def __post_init__(self):
        if not self.radius_sq > 0:
            raise InvalidInputError("radius_sq must be positive")
        object.__setattr__(self, "center", np.array(self.center, dtype=float))
        object.__setattr__(self, "metric", np.array(self.metric, dtype=float))

    def excess(self, theta):
        """``||theta - center||^2_metric - radius_sq`` (<= 0 inside)."""
        diff = (np.asarray(theta, dtype=float) - self.center).ravel()
        return float(diff @ self.metric @ diff - self.radius_sq)

    def contains(self, theta, tol=1e-8):
        return self.excess(theta) <= tol * max(1.0, self.radius_sq)

    def diameter(self):
        """Euclidean diameter ``2 * sqrt(radius_sq / lambda_min(metric))``."""
        lam_min = np.linalg.eigvalsh(self.metric)[0]
        return float(2.0 * np.sqrt(self.radius_sq / lam_min))


def centred_basis(K, d):
    """Orthonormal basis (Kd x (K-1)d) of vectorised zero-column-sum matrices."""
    q = scipy.linalg.null_space(np.ones((1, K)))
    return np.kron(q, np.eye(d))


class EllipsoidProjector:
    """Projection in the ``work`` metric onto an ellipsoid of the other metric.

    Solves ``min ||theta - p||_W^2`` subject to ``||theta - c||_V^2 <= r^2``
    and zero column sums. Both metrics are reduced to the centred subspace and
    simultaneously diagonalised once, so each projection is a scalar secular
    equation in the Lagrange multiplier.
    """

    def __init__(self, ellipsoid, work, K, d, tol=1e-10, max_iter=200):
        self.ellipsoid = ellipsoid
        self.K, self.d = K, d
        self.tol = tol
        self.max_iter = max_iter
        work = work.matrix if isinstance(work, GramState) else np.asarray(work, dtype=float)
        self.work = work
        self.basis = centred_basis(K, d)
        w_red = self.basis.T @ work @ self.basis
        v_red = self.basis.T @ ellipsoid.metric @ self.basis
        self.gammas, self.vecs = scipy.linalg.eigh(v_red, w_red)
        # maps a centred offset p - c to generalized coordinates xi
        self.to_xi = self.vecs.T @ w_red @ self.basis.T
        self.multiplier = 0.0

    def _secular(self, nu, xi_sq):
        g = self.gammas
        return float(np.sum(g * xi_sq / (1.0 + nu * g) ** 2)) - self.ellipsoid.radius_sq

    def project(self, point):
        e = self.ellipsoid
        point = np.asarray(point, dtype=float)
        offset = (point - e.center).ravel()
        # roundoff-level excess counts as feasible, which keeps projection idempotent
        if offset @ e.metric @ offset <= e.radius_sq * (1.0 + 1e-12):
            self.multiplier = 0.0
            return point
        xi = self.to_xi @ offset
        xi_sq = xi * xi
        lo, hi = 0.0, 1.0
        for _ in range(self.max_iter):
            if self._secular(hi, xi_sq) <= 0:
                break
            lo, hi = hi, 2.0 * hi
        else:
            raise ConvergenceError("could not bracket the Lagrange multiplier",
                                   bracket=(lo, hi))
        g = self.gammas
        nu = 0.5 * (lo + hi)
        for _ in range(self.max_iter):
            f = self._secular(nu, xi_sq)
            if -self.tol * e.radius_sq <= f <= 0:
                break
            if f > 0:
                lo = nu
            else:
                hi = nu
            df = -2.0 * float(np.sum(g * g * xi_sq / (1.0 + nu * g) ** 3))
            step = nu - f / df if df < 0 else 0.5 * (lo + hi)
            if not lo <= step <= hi:
                step = 0.5 * (lo + hi)
            if abs(step - nu) <= self.tol * nu or hi - lo <= self.tol * hi:
                nu = step
                break
            nu = step
        else:
            raise ConvergenceError("secular equation did not converge", bracket=(lo, hi))
        # land on the feasible side of the root
        bump = self.tol
        while self._secular(nu, xi_sq) > 0:
            nu = min(hi, nu * (1.0 + bump))
            bump *= 4.0
        self.multiplier = nu
        s = self.vecs @ (xi / (1.0 + nu * g))
        return e.center + (self.basis @ s).reshape(point.shape)


def project_ellipsoid(ellipsoid, point, work_metric):
    """One-off projection; see :class:`EllipsoidProjector`."""
    point = np.asarray(point, dtype=float)
    K, d = point.shape
    return EllipsoidProjector(ellipsoid, work_metric, K, d).project(point)
