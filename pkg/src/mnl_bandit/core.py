"""Softmax model, multinomial logistic loss and problem constants.

Parameters are K x d matrices whose columns sum to zero. Whenever a
parameter is flattened to a vector of length K*d, rows are stacked, so that
``(I_K kron x^T) @ theta.ravel() == theta @ x``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

STRUCT_TOL = 1e-10
FD_TOL = 1e-6


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateInstanceError(ValueError):
    """Raised when a problem constant is undefined for the given instance."""


class NumericalDegeneracyError(ArithmeticError):
    pass


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance.

    ``diagnostics`` carries whatever the solver knew when it gave up.
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def _finite(z, name="input"):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return z


def softmax(z):
    """Softmax along the last axis, stable for large logits."""
    z = _finite(z, "logits")
    if z.shape[-1] < 2:
        raise InvalidInputError("softmax needs at least two outcomes")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_gradient(z):
    """Jacobian ``diag(mu) - mu mu^T`` of the softmax (batched on leading axes)."""
    p = softmax(z)
    jac = -p[..., :, None] * p[..., None, :]
    idx = np.arange(p.shape[-1])
    jac[..., idx, idx] += p
    return jac


def softmax_gradient_factor(z):
    """``L`` (K x (K-1)) with ``L @ L.T == softmax_gradient(z)`` in O(K^2).

    ``diag(mu) - mu mu^T = D^(1/2) (I - s s^T) D^(1/2)`` with ``s = sqrt(mu)``
    a unit vector; a Householder reflection sending ``s`` to ``-e_K`` gives an
    orthonormal basis of ``s^perp`` in its first K - 1 columns.
    """
    p = softmax(z)
    s = np.sqrt(p)
    w = s.copy()
    w[-1] += 1.0
    h = -(2.0 / (w @ w)) * np.outer(w, w[:-1])
    h[np.arange(len(p) - 1), np.arange(len(p) - 1)] += 1.0
    return s[:, None] * h


def _check_outcome(y, K):
    if not (0 <= int(y) < K) or int(y) != y:
        raise InvalidInputError(f"outcome {y} outside 0..{K - 1}")
    return int(y)


def log_loss(theta, x, y):
    """Negative log-likelihood ``-log mu(theta x)_y`` (outcomes are 0-based)."""
    theta = np.asarray(theta, dtype=float)
    y = _check_outcome(y, theta.shape[0])
    z = _finite(theta @ np.asarray(x, dtype=float))
    return float(logsumexp(z) - z[y])


def log_loss_gradient(theta, x, y):
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    y = _check_outcome(y, theta.shape[0])
    g = softmax(theta @ x)
    g[y] -= 1.0
    return np.outer(g, x)


def project_pi(m):
    """Remove the mean of every column (projection onto zero column sums)."""
    m = np.asarray(m, dtype=float)
    return m - m.mean(axis=0, keepdims=True)


def expected_reward(theta, x, rho):
    """``rho^T mu(theta x)``; ``x`` may be a single action or an (n, d) stack."""
    z = np.asarray(x, dtype=float) @ np.asarray(theta, dtype=float).T
    return softmax(z) @ np.asarray(rho, dtype=float)


def best_action(theta, actions, rho):
    """Index of the reward-maximising action; ties go to the lowest index."""
    return int(np.argmax(expected_reward(theta, actions, rho)))


def kappa_star(theta_star, rho, actions):
    """Inverse reward curvature ``1 / (rho^T grad_mu(theta* x*) rho)`` at the optimum."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if actions.shape[0] == 0:
        raise InvalidInputError("empty action set")
    rho = np.asarray(rho, dtype=float)
    x_best = actions[best_action(theta_star, actions, rho)]
    curvature = rho @ softmax_gradient(np.asarray(theta_star) @ x_best) @ rho
    if curvature <= 1e-300:
        raise DegenerateInstanceError(
            f"rho^T grad_mu rho = {curvature:.3e} at the optimal action")
    return float(1.0 / curvature)


class KappaBracket(NamedTuple):
    lower: float
    upper: float
    lower_valid: bool


def kappa_bounds(S, X, K):
    """Analytic bracket ``K/4 + K/4 e^{2SX} <= kappa <= K e^{2SX}``.

    The lower bound is only established for even ``K``; for odd ``K`` the
    trivial lower bound 1 is returned and ``lower_valid`` is False.
    """
    if S < 0 or not 0 < X <= 1:
        raise InvalidInputError("need S >= 0 and X in (0, 1]")
    upper = K * np.exp(2 * S * X)
    if K % 2:
        return KappaBracket(1.0, float(upper), False)
    return KappaBracket(float(K / 4 + K / 4 * np.exp(2 * S * X)), float(upper), True)


def convert_legacy_param(m_tilde):
    """Map a parameter whose last row is pinned to zero onto the centred convention."""
    m_tilde = np.asarray(m_tilde, dtype=float)
    if np.max(np.abs(m_tilde[-1]), initial=0.0) > 1e-12:
        raise InvalidInputError("last row of the legacy parameter must be zero")
    return project_pi(m_tilde)


def legacy_probabilities(m_tilde, x):
    """Outcome probabilities of the pinned-last-row parameterisation."""
    m_tilde = np.asarray(m_tilde, dtype=float)
    e = np.exp(m_tilde[:-1] @ np.asarray(x, dtype=float))
    denom = 1.0 + e.sum()
    return np.append(e / denom, 1.0 / denom)
