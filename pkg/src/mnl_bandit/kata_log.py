"""K-ATA-LOG and baseline policies for multinomial logistic bandits.

K-ATA-LOG runs in two phases. During the first ``tau`` rounds it plays the
action of largest uncertainty under ``V_t`` and then fits a regularised MLE,
which defines a confidence ellipsoid ``Theta``. Afterwards it plays the
argmax of a closed-form optimistic reward and refines its estimate with one
implicit online-mirror-descent step per round, constrained to ``Theta``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConvergenceError,
    InvalidInputError,
    expected_reward,
    kappa_bounds,
    project_pi,
    softmax,
    softmax_gradient,
    softmax_gradient_factor,
)
from .environment import RoundRecord, as_generator, sample_outcome
from .gram import Ellipsoid, EllipsoidProjector, GramState

# weight exp(-sqrt 6) / 3 of the proximal term in the OMD objective
OMD_WEIGHT = math.exp(-math.sqrt(6.0)) / 3.0
EXPLORATION_RADIUS = 84.0
TAU_CONSTANT = 336.0
# upper bound on the largest eigenvalue of grad_mu used for step sizes
SOFTMAX_LIPSCHITZ = 1.0
PRACTICAL_SIGMA_SCALE = 0.05
PRACTICAL_TAU_PER_DIM = 10


@dataclass
class PolicyConfig:
    """Tuning knobs shared by all policies.

    With ``paper_constants=True`` every constant follows the theory: the
    exploration length ``tau = 336^2 lambda kappa K d log T`` (capped at
    ``T``) and confidence scale 1. Otherwise ``tau = 10 K d`` and the
    confidence scale is 0.05. Explicit overrides win in both modes.
    """

    T: int
    delta: float = 0.1
    paper_constants: bool = False
    lambda_override: float | None = None
    tau_override: int | None = None
    sigma_scale: float | None = None
    pgd_max_iters: int = 10_000
    pgd_tol: str | float = "paper"

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError("horizon T must be >= 1")
        if not 0 < self.delta <= 1:
            raise InvalidInputError("delta must lie in (0, 1]")
        if self.sigma_scale is not None and self.sigma_scale <= 0:
            raise InvalidInputError("sigma_scale must be positive")
        if self.lambda_override is not None and self.lambda_override <= 0:
            raise InvalidInputError("lambda_override must be positive")
        if self.tau_override is not None and self.tau_override < 1:
            raise InvalidInputError("tau_override must be >= 1")
        if self.pgd_tol != "paper" and not float(self.pgd_tol) > 0:
            raise InvalidInputError("pgd_tol must be 'paper' or a positive float")

    @property
    def confidence_scale(self):
        if self.sigma_scale is not None:
            return self.sigma_scale
        return 1.0 if self.paper_constants else PRACTICAL_SIGMA_SCALE

    def resolve(self, K, d, S):
        return Constants.from_config(self, K, d, S)


@dataclass(frozen=True)
class Constants:
    lam: float
    tau: int
    sigma: float
    kappa: float
    radius_sq: float

    @classmethod
    def from_config(cls, cfg, K, d, S):
        log_td = math.log(cfg.T / cfg.delta)
        if cfg.lambda_override is not None:
            lam = cfg.lambda_override
        else:
            lam = max((S + 1) * K * d * log_td, 1.0)
        kappa = kappa_bounds(S, 1.0, K).upper
        if cfg.tau_override is not None:
            tau = cfg.tau_override
        elif cfg.paper_constants:
            raw = TAU_CONSTANT**2 * lam * kappa * K * d * math.log(cfg.T)
            tau = cfg.T if raw >= cfg.T else math.ceil(raw)
        else:
            tau = PRACTICAL_TAU_PER_DIM * K * d
        tau = max(1, min(tau, cfg.T))
        sigma = sigma_t(cfg.confidence_scale, S, K, d, cfg.T, cfg.delta)
        return cls(lam, tau, sigma, kappa, EXPLORATION_RADIUS**2 * lam)


def sigma_t(sigma_scale, S, K, d, T, delta):
    """Confidence level ``scale * (S + 1) K d log(T / delta)`` (constant in t)."""
    return sigma_scale * (S + 1) * K * d * math.log(T / delta)


def _mle_objective(theta, X, y, lam):
    z = X @ theta.T
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(np.sum(lse - z[np.arange(len(y)), y]) + 0.5 * lam * np.sum(theta * theta))


def fit_mle(X, y, lam, K, theta0=None, tol=1e-8, max_iter=10_000):
    """Regularised multinomial logistic MLE by damped Newton.

    Minimises ``sum_s -log mu(theta x_s)_{y_s} + lam/2 ||theta||_F^2``; the
    minimiser has zero column sums. Raises :class:`ConvergenceError` if the
    gradient norm is still above ``tol`` after ``max_iter`` iterations.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise InvalidInputError("fit_mle needs at least one observation")
    n, d = X.shape
    dim = K * d
    theta = np.zeros((K, d)) if theta0 is None else project_pi(theta0)
    onehot = np.zeros((n, K))
    onehot[np.arange(n), y] = 1.0
    f = _mle_objective(theta, X, y, lam)
    gnorm = np.inf
    for it in range(max_iter):
        z = X @ theta.T
        p = softmax(z)
        grad = (p - onehot).T @ X + lam * theta
        gnorm = np.linalg.norm(grad)
        if gnorm <= tol:
            return project_pi(theta)
        jac = softmax_gradient(z)
        hess = np.einsum("sij,sa,sb->iajb", jac, X, X).reshape(dim, dim)
        hess[np.diag_indices(dim)] += lam
        step = np.linalg.solve(hess, grad.ravel()).reshape(K, d)
        slope = float(np.sum(grad * step))
        t = 1.0
        if slope <= 1e-13 * max(1.0, abs(f)):
            # predicted decrease is below the roundoff of f: Newton is in its quadratic regime
            theta = theta - step
            f = _mle_objective(theta, X, y, lam)
            continue
        for _ in range(60):
            cand = theta - t * step
            f_cand = _mle_objective(cand, X, y, lam)
            if f_cand <= f - 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # objective flat to roundoff: take the Newton step and let the gradient decide
            cand = theta - step
            f_cand = _mle_objective(cand, X, y, lam)
        theta, f = cand, f_cand
    raise ConvergenceError("fit_mle did not reach the gradient tolerance",
                           iterations=max_iter, grad_norm=float(gnorm))


def optimistic_reward(x, theta, w_bar, sigma, rho):
    """Optimistic reward ``rho^T mu(theta x) + eps1 + eps2`` and its two bonuses.

    ``x`` is one action or an (n, d) stack; ``w_bar`` is the :class:`GramState`
    holding ``W_bar_t``.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    rho = np.asarray(rho, dtype=float)
    z = X @ theta.T
    p = softmax(z)
    w = softmax_gradient(z) @ rho
    blocks = w_bar.block_matrix(X)
    q = np.einsum("ni,nij,nj->n", w, blocks, w)
    eps1 = math.sqrt(sigma) * np.sqrt(np.maximum(q, 0.0))
    eps2 = 3.0 * sigma * np.linalg.eigvalsh(blocks)[:, -1]
    r = p @ rho + eps1 + eps2
    if single:
        return float(r[0]), float(eps1[0]), float(eps2[0])
    return r, eps1, eps2


@dataclass
class StepInfo:
    iterations: int = 0
    projected: bool = False
    certificate: float = 0.0


def omd_step(theta_prev, W, x, y, eps_target, region=None, max_iters=10_000):
    """Approximate implicit OMD update over the confidence region.

    Solves ``min_{theta in region} OMD_WEIGHT ||theta - theta_prev||_W^2 +
    loss(theta; x, y)`` by projected gradient descent on the variable
    ``u = U^T theta`` (``W = U U^T``), where the objective is ``2 OMD_WEIGHT``
    strongly convex and ``2 OMD_WEIGHT + lambda_max(B)`` smooth with
    ``B = (I kron x^T) W^{-1} (I kron x)``. The step is the inverse smoothness
    constant, so the iteration map contracts by ``q = 1 - mu / L`` and
    ``q / (1 - q) * ||u_{k+1} - u_k|| / sqrt(lambda)`` bounds the Euclidean
    distance to the exact minimiser; iterations stop once it is below
    ``eps_target``.

    While iterates stay inside ``region`` they live in the K-dimensional
    affine space ``theta_prev + W^{-1}(I kron x) a``, which is what the fast
    path iterates on. The first infeasible iterate switches to the full
    projected iteration.
    """
    theta_prev = np.asarray(theta_prev, dtype=float)
    K, d = theta_prev.shape
    x = np.asarray(x, dtype=float)
    info = StepInfo()
    strong = 2.0 * OMD_WEIGHT
    P = W.inverse.reshape(K * d, K, d) @ x
    B = np.einsum("iaj,a->ij", P.reshape(K, d, K), x)
    smooth = strong + SOFTMAX_LIPSCHITZ * max(np.linalg.eigvalsh(B)[-1], 0.0)
    eta = 1.0 / smooth
    q = 1.0 - strong / smooth
    factor = q / (1.0 - q) / math.sqrt(W.lam)
    z0 = theta_prev @ x
    target = np.zeros(K)
    target[y] = 1.0

    if region is not None:
        off = (theta_prev - region.center).ravel()
        v_off = region.metric @ off
        base = float(off @ v_off) - region.radius_sq
        lin = P.T @ v_off
        quad = P.T @ region.metric @ P
        slack = 1e-8 * max(1.0, region.radius_sq)

    a = np.zeros(K)
    for it in range(1, max_iters + 1):
        z = z0 + B @ a
        e = np.exp(z - z.max())
        g = e / e.sum() - target
        a_new = a - eta * (2.0 * OMD_WEIGHT * a + g)
        if region is not None and base + 2.0 * a_new @ lin + a_new @ quad @ a_new > slack:
            start = theta_prev + (P @ a).reshape(K, d)
            return _projected_omd(theta_prev, start, W, P, x, target, eta, factor,
                                  eps_target, region, max_iters - it + 1, info)
        da = a_new - a
        a = a_new
        info.iterations = it
        info.certificate = factor * math.sqrt(max(da @ B @ da, 0.0))
        if info.certificate <= eps_target:
            return project_pi(theta_prev + (P @ a).reshape(K, d)), info
    raise ConvergenceError("OMD step did not reach its precision", iterations=max_iters,
                           certificate=info.certificate, target=eps_target)


def _projected_omd(theta_prev, theta, W, P, x, target, eta, factor, eps_target,
                   region, max_iters, info):
    K, d = theta.shape
    projector = EllipsoidProjector(region, W, K, d)
    info.projected = True
    for it in range(1, max_iters + 1):
        g = softmax(theta @ x) - target
        step = 2.0 * OMD_WEIGHT * (theta - theta_prev) + (P @ g).reshape(K, d)
        new = projector.project(project_pi(theta - eta * step))
        diff = (new - theta).ravel()
        theta = new
        info.iterations += 1
        info.certificate = factor * math.sqrt(max(diff @ W.matrix @ diff, 0.0))
        if info.certificate <= eps_target:
            return theta, info
    raise ConvergenceError("projected OMD step did not reach its precision",
                           iterations=info.iterations, certificate=info.certificate,
                           target=eps_target)


class Policy:
    """Common interface: the harness only calls ``select_action`` and ``observe``.

    Policies see the action set, the reward vector and the norm bound, never
    the hidden parameter.
    """

    name = "policy"

    def __init__(self, actions, rho, S, K, config, rng=None):
        self.actions = np.atleast_2d(np.asarray(actions, dtype=float))
        self.rho = np.asarray(rho, dtype=float)
        self.S = float(S)
        self.K = int(K)
        self.d = self.actions.shape[1]
        self.config = config
        self.rng = as_generator(rng)
        self.t = 0
        self.last_scores = None
        self.last_bonus = (0.0, 0.0)

    @property
    def theta_estimate(self):
        return None

    def select_action(self):
        raise NotImplementedError

    def observe(self, action, outcome):
        self.t += 1


class RandomPolicy(Policy):
    name = "random"

    def select_action(self):
        return int(self.rng.integers(self.actions.shape[0]))


class GreedyMLE(Policy):
    """Plays ``argmax rho^T mu(theta_hat x)`` and refits at rounds 1, 2, 4, 8, ..."""

    name = "greedy_mle"

    def __init__(self, actions, rho, S, K, config, rng=None):
        super().__init__(actions, rho, S, K, config, rng)
        self.lam = config.resolve(K, self.d, S).lam
        self.theta = np.zeros((K, self.d))
        self.xs, self.ys = [], []
        self.refit_rounds = []

    @property
    def theta_estimate(self):
        return self.theta

    def select_action(self):
        return int(np.argmax(expected_reward(self.theta, self.actions, self.rho)))

    def observe(self, action, outcome):
        super().observe(action, outcome)
        self.xs.append(action)
        self.ys.append(outcome)
        if self.t & (self.t - 1) == 0:
            self.theta = fit_mle(self.actions[self.xs], self.ys, self.lam, self.K,
                                 theta0=self.theta)
            self.refit_rounds.append(self.t)


class KataLog(Policy):
    name = "kata_log"

    def __init__(self, actions, rho, S, K, config, rng=None):
        super().__init__(actions, rho, S, K, config, rng)
        self.constants = c = config.resolve(K, self.d, S)
        dim = K * self.d
        self.V = GramState(dim, c.lam, track_cholesky=False)
        self.explore_x, self.explore_y = [], []
        self.region = None
        self.theta = None
        self.W = None
        self.W_bar = None
        self.omd_iterations = 0
        self.projected_steps = 0

    @property
    def exploring(self):
        return self.region is None

    @property
    def theta_estimate(self):
        return self.theta

    def select_action(self):
        if self.exploring:
            self.last_scores = None
            self.last_bonus = (0.0, 0.0)
            return int(np.argmax(self.V.block_operator_norm(self.actions)))
        r, e1, e2 = optimistic_reward(self.actions, self.theta, self.W_bar,
                                      self.constants.sigma, self.rho)
        self.last_scores = r
        a = int(np.argmax(r))
        self.last_bonus = (float(e1[a]), float(e2[a]))
        return a

    def observe(self, action, outcome):
        super().observe(action, outcome)
        x = self.actions[action]
        if self.exploring:
            self.V.add_identity_block(x, 1.0 / self.constants.kappa)
            self.explore_x.append(action)
            self.explore_y.append(outcome)
            if self.t >= self.constants.tau:
                self._finish_exploration()
            return
        tol = self.config.pgd_tol
        eps = (self.t + 1.0) ** -2 if tol == "paper" else float(tol)
        self.theta, info = omd_step(self.theta, self.W, x, outcome, eps, self.region,
                                    self.config.pgd_max_iters)
        self.omd_iterations += info.iterations
        self.projected_steps += info.projected
        factor = softmax_gradient_factor(self.theta @ x)
        self.W.add_softmax_block(None, x, factor)
        # W_bar also gets the (1_K / sqrt K) kron x direction
        extended = np.column_stack([factor, np.full(self.K, 1.0 / math.sqrt(self.K))])
        self.W_bar.add_softmax_block(None, x, extended)

    def _finish_exploration(self):
        c = self.constants
        dim = self.K * self.d
        center = fit_mle(self.actions[self.explore_x], self.explore_y, c.lam, self.K)
        self.region = Ellipsoid(center, self.V.matrix.copy(), c.radius_sq)
        self.theta = center.copy()
        # the theta-space PGD never needs the Cholesky factor of W
        self.W = GramState(dim, c.lam, track_cholesky=False)
        self.W_bar = GramState(dim, c.lam, track_cholesky=False)


POLICIES = {cls.name: cls for cls in (KataLog, RandomPolicy, GreedyMLE)}


def seed_streams(seed):
    """Independent (environment, policy) generators derived from one seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    env, pol = ss.spawn(2)
    return np.random.Generator(np.random.Philox(env)), np.random.Generator(np.random.Philox(pol))


@dataclass
class RunResult:
    policy: str
    seed: object
    records: list = field(default_factory=list)
    optimism_checks: int = 0
    optimism_violations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def cum_regret(self):
        return np.cumsum([r.inst_regret for r in self.records])


def play(inst, policy, T, env_rng, check_optimism=False):
    """Run ``policy`` against ``inst`` for ``T`` rounds and trace every round."""
    result = RunResult(policy.name, None)
    records = result.records
    rho = inst.rho
    theta_star = inst.theta_star
    gaps = inst.gaps
    means = inst.mean_rewards
    for t in range(1, T + 1):
        est = policy.theta_estimate
        dist = float(np.linalg.norm(est - theta_star)) if est is not None else float("nan")
        start = time.perf_counter_ns()
        a = policy.select_action()
        mid = time.perf_counter_ns()
        y = sample_outcome(inst, a, env_rng)
        resume = time.perf_counter_ns()
        policy.observe(a, y)
        elapsed = (mid - start) + (time.perf_counter_ns() - resume)
        if check_optimism and policy.last_scores is not None:
            result.optimism_checks += len(means)
            result.optimism_violations += int(np.sum(policy.last_scores < means))
        e1, e2 = policy.last_bonus
        records.append(RoundRecord(t, a, y, float(rho[y]), float(gaps[a]), e1, e2, dist, elapsed))
    return result


def make_policy(name, inst, config, rng):
    try:
        cls = POLICIES[name]
    except KeyError:
        raise InvalidInputError(f"unknown policy {name!r}; pick from {sorted(POLICIES)}") from None
    return cls(inst.actions, inst.rho, inst.S, inst.K, config, rng)


def run(inst, policy_name, config, seed, check_optimism=False):
    """Seeded run of a named policy; returns a :class:`RunResult`."""
    env_rng, pol_rng = seed_streams(seed)
    policy = make_policy(policy_name, inst, config, pol_rng)
    result = play(inst, policy, config.T, env_rng, check_optimism)
    result.seed = seed
    if isinstance(policy, KataLog):
        result.extra.update(tau=policy.constants.tau, omd_iterations=policy.omd_iterations,
                            projected_steps=policy.projected_steps)
    if isinstance(policy, GreedyMLE):
        result.extra["refit_rounds"] = policy.refit_rounds
    return result


def kata_log_run(inst, config, seed):
    return run(inst, "kata_log", config, seed).records


def baseline_random(inst, T, seed):
    return run(inst, "random", PolicyConfig(T=T), seed).records


def baseline_greedy_mle(inst, config, seed):
    return run(inst, "greedy_mle", config, seed).records


def exploration_routine(actions, sampler, tau, lam, kappa, K):
    """Stand-alone exploration phase.

    ``sampler(index)`` returns the observed outcome for the action at
    ``index``. Returns the confidence :class:`Ellipsoid` together with the
    sequence of played indices.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if tau < 1 or lam <= 0:
        raise InvalidInputError("need tau >= 1 and lam > 0")
    V = GramState(K * actions.shape[1], lam, track_cholesky=False)
    played, outcomes = [], []
    for _ in range(tau):
        a = int(np.argmax(V.block_operator_norm(actions)))
        outcomes.append(sampler(a))
        played.append(a)
        V.add_identity_block(actions[a], 1.0 / kappa)
    center = fit_mle(actions[played], outcomes, lam, K)
    return Ellipsoid(center, V.matrix.copy(), EXPLORATION_RADIUS**2 * lam), played
