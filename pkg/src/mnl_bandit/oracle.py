"""Independent numerical oracles for the model, Gram and projection code.

Everything here recomputes its quantity from dense linear algebra instead of
calling the routine under test, so a bug cannot cancel itself out. The
``CHECKS`` registry drives the ``verify`` command.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import core, environment, gram

FD_REL_TOL = 1e-6
GRAM_TOL = 1e-8
KKT_TOL = 1e-8


@dataclass
class OracleReport:
    name: str
    max_abs_err: float
    samples: int
    passed: bool
    details: str = ""
    tolerance: float = float("nan")

    def to_dict(self):
        doc = asdict(self)
        # JSON has no NaN/inf
        for key in ("max_abs_err", "tolerance"):
            if not math.isfinite(doc[key]):
                doc[key] = None
        return doc

    def to_json(self):
        return json.dumps(self.to_dict())


def _report(name, err, samples, tol, details=""):
    return OracleReport(name, float(err), int(samples), bool(err <= tol), details, tol)


def _dense_softmax(z):
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _dense_jacobian(z):
    p = _dense_softmax(z)
    return np.einsum("...i,ij->...ij", p, np.eye(p.shape[-1])) - np.einsum("...i,...j->...ij", p, p)


# ---------------------------------------------------------------- gradients

def fd_gradient(fn, point, step=1e-5):
    """Central-difference gradient of a scalar function of an array."""
    point = np.asarray(point, dtype=float)
    grad = np.zeros_like(point)
    flat = grad.reshape(-1)
    work = point.copy().reshape(-1)
    for i in range(work.size):
        orig = work[i]
        work[i] = orig + step
        f_plus = fn(work.reshape(point.shape))
        work[i] = orig - step
        f_minus = fn(work.reshape(point.shape))
        work[i] = orig
        flat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def fd_gradient_check(fn, grad, point, step=1e-5, tol=FD_REL_TOL, name="fd_gradient"):
    """Compare ``grad(point)`` with central differences of ``fn``.

    The error is ``max|fd - analytic| / max(1, max|analytic|)``, a relative
    error that stays meaningful when the gradient vanishes.
    """
    if not 1e-7 <= step <= 1e-3:
        raise core.InvalidInputError("step must lie in [1e-7, 1e-3]")
    point = np.asarray(point, dtype=float)
    analytic = np.asarray(grad(point), dtype=float)
    numeric = fd_gradient(fn, point, step)
    scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)))
    err = float(np.max(np.abs(numeric - analytic), initial=0.0)) / scale
    return _report(name, err, point.size, tol, f"step={step:g}")


# -------------------------------------------------------------------- kappa

def _centred_ball(n, K, d, S, rng, boundary_fraction=0.5):
    """Points of the Frobenius ball of radius S inside the zero-column-sum space."""
    g = rng.standard_normal((n, K, d))
    g -= g.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(g.reshape(n, -1), axis=1)
    dim = (K - 1) * d
    radii = S * rng.random(n) ** (1.0 / dim)
    radii[: int(boundary_fraction * n)] = S
    return g * (radii / np.where(norms > 0, norms, 1.0))[:, None, None]


def brute_force_kappa(inst, n_theta=1000, n_dirs=1000, rng=0, chunk=200):
    """Sampling under-estimate of ``kappa`` over ``||theta||_F <= S`` and actions.

    Parameters are drawn in the centred Frobenius ball (half of them on its
    boundary); actions are the instance's actions together with ``n_dirs``
    random unit vectors. Returns ``1 / min lambda_{K-1}`` over all pairs, so
    the value never exceeds the true constant.
    """
    if n_theta < 1000 or n_dirs < 1000:
        raise core.InvalidInputError("brute_force_kappa needs at least 1000 samples of each kind")
    rng = environment.as_generator(rng)
    K, d, S = inst.K, inst.d, inst.S
    dirs = rng.standard_normal((n_dirs, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    xs = np.vstack([inst.actions, dirs])
    if S == 0:
        thetas = np.zeros((1, K, d))
    else:
        thetas = _centred_ball(n_theta, K, d, S, rng)
    worst = np.inf
    for start in range(0, len(thetas), chunk):
        z = np.einsum("nkd,md->nmk", thetas[start:start + chunk], xs)
        eig = np.linalg.eigvalsh(_dense_jacobian(z))
        worst = min(worst, float(eig[..., 1].min()))
    return 1.0 / worst


def exact_kappa_two_outcomes(S, X=1.0):
    """Exact ``kappa`` for K = 2 under the Frobenius norm: ``1 + cosh(sqrt 2 S X)``."""
    return 1.0 + math.cosh(math.sqrt(2.0) * S * X)


# --------------------------------------------------------------------- gram

class DenseReplay(NamedTuple):
    matrix: np.ndarray
    inverse: np.ndarray
    chol: np.ndarray


def dense_gram_replay(updates, lam, dim):
    """Naive accumulation of an update list followed by dense inversion.

    Updates are tuples ``("rank_one", v, weight)``, ``("softmax_block",
    grad, x)`` or ``("identity_block", x, weight)``.
    """
    m = lam * np.eye(dim)
    for kind, *args in updates:
        if kind == "rank_one":
            v, w = np.asarray(args[0], dtype=float), args[1]
            m = m + w * np.outer(v, v)
        elif kind == "softmax_block":
            grad, x = np.asarray(args[0], dtype=float), np.asarray(args[1], dtype=float)
            m = m + np.kron(grad, np.outer(x, x))
        elif kind == "identity_block":
            x, w = np.asarray(args[0], dtype=float), args[1]
            m = m + w * np.kron(np.eye(dim // x.size), np.outer(x, x))
        else:
            raise core.InvalidInputError(f"unknown update kind {kind!r}")
    if not np.all(np.isfinite(m)):
        raise core.InvalidInputError("non-finite update")
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise core.NumericalDegeneracyError("accumulated matrix is not positive definite") from None
    return DenseReplay(m, np.linalg.inv(m), chol)


def random_gram_updates(n, K, d, rng):
    """A mixed list of rank-one and softmax-block updates with unit-ball actions."""
    rng = environment.as_generator(rng)
    out = []
    for _ in range(n):
        x = rng.standard_normal(d)
        x /= max(1.0, np.linalg.norm(x))
        if rng.random() < 0.5:
            out.append(("rank_one", rng.standard_normal(K * d) / math.sqrt(K * d), float(rng.random())))
        else:
            z = 2.0 * rng.standard_normal(K)
            out.append(("softmax_block", _dense_jacobian(z), x))
    return out


def apply_gram_updates(state, updates):
    for kind, *args in updates:
        if kind == "rank_one":
            state.rank_one_update(args[0], args[1])
        elif kind == "softmax_block":
            state.add_softmax_block(args[0], args[1])
        else:
            state.add_identity_block(args[0], args[1])
    return state


def gram_replay_check(n_updates=500, K=4, d=3, lam=1.0, rng=0, tol=GRAM_TOL):
    updates = random_gram_updates(n_updates, K, d, rng)
    state = apply_gram_updates(gram.GramState(K * d, lam), updates)
    ref = dense_gram_replay(updates, lam, K * d)
    err = max(np.max(np.abs(state.matrix - ref.matrix)),
              np.max(np.abs(state.inverse - ref.inverse)),
              np.max(np.abs(state.chol - ref.chol)))
    return _report("gram_replay", err, n_updates, tol, f"K={K} d={d} lam={lam}")


# --------------------------------------------------------------- projection

def random_projection_problem(K, d, rng):
    """Random (ellipsoid, infeasible-or-not point, work metric) triple."""
    dim = K * d
    basis = gram.centred_basis(K, d)

    def spd():
        a = rng.standard_normal((dim, dim))
        return a @ a.T / dim + 0.1 * np.eye(dim)

    center = core.project_pi(rng.standard_normal((K, d)))
    ell = gram.Ellipsoid(center, spd(), float(rng.uniform(0.1, 2.0)))
    point = center + (basis @ (3.0 * rng.standard_normal(basis.shape[1]))).reshape(K, d)
    return ell, point, spd()


def projection_kkt(ell, point, work, proj, multiplier):
    """Residual of stationarity, feasibility and complementary slackness.

    Stationarity is measured on the centred subspace:
    ``Q^T (W (p* - p) + nu V (p* - c)) = 0``.
    """
    K, d = point.shape
    basis = gram.centred_basis(K, d)
    diff = (proj - point).ravel()
    off = (proj - ell.center).ravel()
    stat = basis.T @ (work @ diff + multiplier * (ell.metric @ off))
    scale = max(1.0, float(np.linalg.norm(basis.T @ (work @ diff))))
    excess = off @ ell.metric @ off - ell.radius_sq
    feas = max(excess, 0.0) / max(1.0, ell.radius_sq)
    slack = abs(multiplier * excess) / max(1.0, ell.radius_sq) if multiplier > 0 else 0.0
    centred = float(np.max(np.abs(proj.sum(axis=0))))
    return max(float(np.max(np.abs(stat))) / scale, feas, slack, centred)


def projection_dominance(ell, point, work, proj, n, rng):
    """Largest ``||p* - p||_W^2 - ||q - p||_W^2`` over random feasible ``q`` (must be <= 0)."""
    K, d = point.shape
    basis = gram.centred_basis(K, d)
    v_red = basis.T @ ell.metric @ basis
    c = np.linalg.cholesky(v_red)
    u = rng.standard_normal((n, basis.shape[1]))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= (rng.random(n) ** (1.0 / basis.shape[1]))[:, None] * math.sqrt(ell.radius_sq)
    # solve c^T s = u so that s^T v_red s = |u|^2 <= r^2
    s = np.linalg.solve(c.T, u.T).T
    q = ell.center.ravel() + s @ basis.T
    diffs = q - point.ravel()
    dist_q = np.einsum("ni,ij,nj->n", diffs, work, diffs)
    pd = (proj - point).ravel()
    dist_p = pd @ work @ pd
    return float(np.max(dist_p - dist_q) / max(1.0, dist_p))


def projection_check(n_problems=100, n_points=100_000, K=3, d=2, rng=0, tol=KKT_TOL):
    rng = environment.as_generator(rng)
    worst_kkt, worst_dom = 0.0, -np.inf
    for _ in range(n_problems):
        ell, point, work = random_projection_problem(K, d, rng)
        projector = gram.EllipsoidProjector(ell, work, K, d)
        proj = projector.project(point)
        worst_kkt = max(worst_kkt, projection_kkt(ell, point, work, proj, projector.multiplier))
        if n_points:
            worst_dom = max(worst_dom, projection_dominance(ell, point, work, proj, n_points, rng))
    err = max(worst_kkt, worst_dom)
    return _report("ellipsoid_projection", err, n_problems, tol,
                   f"kkt={worst_kkt:.3e} dominance={worst_dom:.3e} points={n_points}")


# ------------------------------------------------------------------- reward

def mc_reward_estimate(inst, x, n=10_000, rng=0):
    """Monte-Carlo ``E[rho_y]`` with ``y`` from the environment sampler; (mean, stderr)."""
    if n < 10_000:
        raise core.InvalidInputError("mc_reward_estimate needs n >= 10^4")
    rng = environment.as_generator(rng)
    ys = environment.sample_outcomes(inst, x, rng, n)
    r = inst.rho[ys]
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(n))


def reward_check(n=20_000, rng=0):
    rng = environment.as_generator(rng)
    inst = environment.make_random_instance(4, 3, 2.0, 6, rng=rng)
    worst = 0.0
    for i, x in enumerate(inst.actions):
        mean, se = mc_reward_estimate(inst, x, n, rng)
        exact = float(_dense_softmax(inst.theta_star @ x) @ inst.rho)
        worst = max(worst, abs(mean - exact) / max(se, 1e-12))
    # the error is in units of standard errors
    return _report("mc_reward", worst, n * inst.n_actions, 4.0, "max |mean - exact| / stderr")


# --------------------------------------------------------------- registered

def model_gradient_check(n_probes=1000, rng=0, tol=FD_REL_TOL):
    rng = environment.as_generator(rng)
    worst = 0.0
    for _ in range(n_probes):
        K, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        theta = rng.standard_normal((K, d))
        x = rng.standard_normal(d)
        y = int(rng.integers(K))
        rep = fd_gradient_check(lambda th: core.log_loss(th, x, y),
                                lambda th: core.log_loss_gradient(th, x, y), theta)
        worst = max(worst, rep.max_abs_err)
        v = rng.standard_normal(K)
        z = 3.0 * rng.standard_normal(K)
        rep = fd_gradient_check(lambda zz: float(core.softmax(zz) @ v),
                                lambda zz: core.softmax_gradient(zz).T @ v, z)
        worst = max(worst, rep.max_abs_err)
    return _report("model_gradients", worst, 2 * n_probes, tol, "log_loss and softmax Jacobian")


def model_identity_check(n_probes=1000, rng=0, tol=1e-12):
    """Normalisation, shift invariance and kernel/PSD of the Jacobian against dense code."""
    rng = environment.as_generator(rng)
    K = 5
    z = 5.0 * rng.standard_normal((n_probes, K))
    p = core.softmax(z)
    jac = core.softmax_gradient(z)
    errs = [
        np.max(np.abs(p.sum(axis=1) - 1.0)),
        np.max(np.abs(core.softmax(z + rng.standard_normal((n_probes, 1))) - p)),
        np.max(np.abs(p - _dense_softmax(z))),
        np.max(np.abs(jac @ np.ones(K))),
        np.max(np.abs(jac - _dense_jacobian(z))),
        max(-float(np.linalg.eigvalsh(jac).min()), 0.0),
    ]
    return _report("model_identities", max(errs), n_probes, tol)


def kappa_closed_form_check(tol=1e-9):
    worst = 0.0
    n = 0
    for K in (2, 3, 4, 8):
        for S in (0.5, 1.0, 2.0):
            inst = environment.make_large_kappa_star_instance(K, 3, S, 6, rng=0)
            a = (K - 1) * math.exp(-S)
            closed = (1.0 + a) ** 2 / a
            worst = max(worst, abs(inst.kappa_star - closed) / closed,
                        abs(inst.metadata["kappa_star_closed_form"] - closed) / closed)
            n += 1
    return _report("kappa_star_closed_form", worst, n, tol, "relative error")


def negative_control_check():
    """The gradient oracle must reject a gradient shifted by 1e-3."""
    rng = np.random.default_rng(0)
    theta, x = rng.standard_normal((3, 2)), rng.standard_normal(2)
    rep = fd_gradient_check(lambda th: core.log_loss(th, x, 0),
                            lambda th: core.log_loss_gradient(th, x, 0) + 1e-3, theta)
    # passes when the corrupted gradient is caught
    return _report("negative_control", 0.0 if not rep.passed else rep.max_abs_err, 1, 0.0,
                   f"corrupted gradient error {rep.max_abs_err:.3e}")


def optimism_coverage_check(n_seeds=200, T=2000, tau=None):
    """Optimism violation rate of strict-mode K-ATA-LOG on the tiny instance."""
    from .kata_log import PolicyConfig, run

    inst = tiny_instance()
    delta = 0.1
    cfg = PolicyConfig(T=T, delta=delta, paper_constants=True,
                       tau_override=tau or 10 * inst.K * inst.d)
    checks = violations = 0
    for seed in range(n_seeds):
        res = run(inst, "kata_log", cfg, seed, check_optimism=True)
        checks += res.optimism_checks
        violations += res.optimism_violations
    rate = violations / max(checks, 1)
    return _report("optimism_coverage", rate, checks, delta, f"{violations}/{checks} violations")


def tiny_instance():
    """K=3, d=2, five actions, S=1; fixed generator seed."""
    return environment.make_random_instance(3, 2, 1.0, 5, rng=1)


@dataclass(frozen=True)
class Check:
    fn: Callable[..., OracleReport]
    quick: dict
    full: dict


CHECKS = {
    "model_identities": Check(model_identity_check, {"n_probes": 1000}, {"n_probes": 10_000}),
    "model_gradients": Check(model_gradient_check, {"n_probes": 200}, {"n_probes": 1000}),
    "negative_control": Check(negative_control_check, {}, {}),
    "gram_replay": Check(gram_replay_check, {"n_updates": 500}, {"n_updates": 2000}),
    "ellipsoid_projection": Check(projection_check, {"n_problems": 20, "n_points": 10_000},
                                  {"n_problems": 100, "n_points": 100_000}),
    "mc_reward": Check(reward_check, {"n": 20_000}, {"n": 200_000}),
    "kappa_star_closed_form": Check(kappa_closed_form_check, {}, {}),
    "optimism_coverage": Check(optimism_coverage_check, {"n_seeds": 5, "T": 500},
                               {"n_seeds": 200, "T": 2000}),
}


def run_checks(level="quick", names=None):
    if level not in ("quick", "full"):
        raise core.InvalidInputError("level must be 'quick' or 'full'")
    reports = []
    for name, check in CHECKS.items():
        if names is not None and name not in names:
            continue
        kwargs = check.quick if level == "quick" else check.full
        try:
            reports.append(check.fn(**kwargs))
        except Exception as exc:  # a crashing oracle is a failed oracle
            reports.append(OracleReport(name, float("inf"), 0, False, f"{type(exc).__name__}: {exc}"))
    return reports
