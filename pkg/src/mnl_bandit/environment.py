"""MNL bandit environments: hidden parameter, outcome sampling and regret."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .core import (
    STRUCT_TOL,
    InvalidInputError,
    expected_reward,
    kappa_star,
    project_pi,
    softmax,
)


def as_generator(rng):
    """Accept a seed, ``None`` or an existing ``np.random.Generator``."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(rng))


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    theta_star: np.ndarray
    rho: np.ndarray
    actions: np.ndarray
    S: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.array(self.theta_star, dtype=float, ndmin=2)
        rho = np.array(self.rho, dtype=float)
        actions = np.array(self.actions, dtype=float, ndmin=2)
        for name, value in (("theta_star", theta), ("rho", rho), ("actions", actions)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "S", float(self.S))
        self.validate()

    def validate(self):
        theta, rho, actions = self.theta_star, self.rho, self.actions
        K, d = theta.shape
        if K < 2 or d < 1:
            raise InvalidInputError("need K >= 2 and d >= 1")
        if rho.shape != (K,) or actions.ndim != 2 or actions.shape[1] != d:
            raise InvalidInputError("inconsistent dimensions")
        if actions.shape[0] == 0:
            raise InvalidInputError("empty action set")
        if np.max(np.abs(theta.sum(axis=0))) > STRUCT_TOL:
            raise InvalidInputError("theta_star columns must sum to zero")
        if np.linalg.norm(theta) > self.S + STRUCT_TOL:
            raise InvalidInputError("||theta_star||_F exceeds S")
        if np.any(rho < 0) or abs(np.linalg.norm(rho) - 1.0) > STRUCT_TOL:
            raise InvalidInputError("rho must be nonnegative with unit norm")
        if rho.sum() / np.sqrt(K) > 1.0 - 1e-12:
            raise InvalidInputError("rho is collinear with the all-ones vector")
        if np.any(np.linalg.norm(actions, axis=1) > 1.0 + 1e-12):
            raise InvalidInputError("actions must lie in the unit ball")

    @property
    def K(self):
        return self.theta_star.shape[0]

    @property
    def d(self):
        return self.theta_star.shape[1]

    @property
    def n_actions(self):
        return self.actions.shape[0]

    @cached_property
    def mean_rewards(self):
        return expected_reward(self.theta_star, self.actions, self.rho)

    @cached_property
    def best_index(self):
        return int(np.argmax(self.mean_rewards))

    @cached_property
    def gaps(self):
        return self.mean_rewards[self.best_index] - self.mean_rewards

    @cached_property
    def kappa_star(self):
        return kappa_star(self.theta_star, self.rho, self.actions)

    def to_dict(self):
        return {
            "K": self.K,
            "d": self.d,
            "S": self.S,
            "theta_star": self.theta_star.tolist(),
            "rho": self.rho.tolist(),
            "actions": self.actions.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            inst = cls(doc["theta_star"], doc["rho"], doc["actions"], doc["S"],
                       dict(doc.get("metadata", {})))
        except KeyError as exc:
            raise InvalidInputError(f"instance document lacks field {exc}") from None
        if inst.K != doc.get("K", inst.K) or inst.d != doc.get("d", inst.d):
            raise InvalidInputError("declared K/d disagree with theta_star")
        return inst

    def to_json(self, **kwargs):
        # json emits repr() floats, which round-trip exactly
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json(indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


@dataclass(slots=True)
class RoundRecord:
    t: int
    action_index: int
    outcome: int
    reward: float
    inst_regret: float
    eps1: float = 0.0
    eps2: float = 0.0
    est_dist: float = float("nan")
    elapsed_ns: int = 0


def _action(inst, x):
    if np.ndim(x) == 0:
        return inst.actions[int(x)]
    return np.asarray(x, dtype=float)


def sample_outcome(inst, x, rng):
    """Draw ``y ~ Categorical(mu(theta* x))``; ``x`` is an action or its index."""
    p = softmax(inst.theta_star @ _action(inst, x))
    y = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(y, inst.K - 1)


def sample_outcomes(inst, x, rng, size):
    p = softmax(inst.theta_star @ _action(inst, x))
    y = np.searchsorted(np.cumsum(p), rng.random(size), side="right")
    return np.minimum(y, inst.K - 1)


def regret_increment(inst, x):
    """``rho^T mu(theta* x*) - rho^T mu(theta* x)`` with ``x*`` the best listed action."""
    if np.ndim(x) == 0:
        return float(inst.gaps[int(x)])
    best = inst.mean_rewards[inst.best_index]
    return float(max(best - expected_reward(inst.theta_star, x, inst.rho), 0.0))


def random_unit_vectors(n, d, rng):
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def large_kappa_star_closed_form(K, gap):
    """``kappa*`` when outcome 1 leads every other logit by ``gap`` and ``rho = e_1``."""
    a = (K - 1) * np.exp(-gap)
    return float((1.0 + a) ** 2 / a)


def make_large_kappa_star_instance(K, d, S, n_actions, rng=0):
    """Single-entry instance where ``kappa*`` grows like ``e^S / (K - 1)``.

    Outcome 1 leads every other logit by ``S * x_1``, rewards are ``e_1`` and
    the action set is ``e_1`` followed by ``n_actions - 1`` random unit
    vectors, so ``x* = e_1`` and the curvature at the optimum has the closed
    form stored in ``metadata["kappa_star_closed_form"]``.
    """
    if n_actions < 1 or K < 2 or d < 1 or S < 0:
        raise InvalidInputError("need K >= 2, d >= 1, S >= 0, n_actions >= 1")
    rng = as_generator(rng)
    m = np.zeros((K, d))
    m[0, 0] = S
    rho = np.zeros(K)
    rho[0] = 1.0
    first = np.zeros((1, d))
    first[0, 0] = 1.0
    actions = np.vstack([first, random_unit_vectors(n_actions - 1, d, rng)])
    meta = {
        "generator": "large_kappa_star",
        "params": {"K": K, "d": d, "S": S, "n_actions": n_actions},
        "K_even": K % 2 == 0,
        "kappa_star_closed_form": large_kappa_star_closed_form(K, S),
    }
    return ProblemInstance(project_pi(m), rho, actions, S, meta)


def sphere_net(n, d, anchor=None):
    """Deterministic, roughly uniform unit vectors; ``anchor`` comes first if given."""
    if anchor is not None:
        anchor = np.asarray(anchor, dtype=float)
        anchor = anchor / np.linalg.norm(anchor)
    if d == 1:
        pts = np.array([[1.0], [-1.0]])[:n]
        if anchor is not None:
            pts = np.vstack([anchor, -anchor])[:n]
        return pts
    if d == 2:
        phase = 0.0 if anchor is None else np.arctan2(anchor[1], anchor[0])
        ang = phase + 2 * np.pi * np.arange(n) / n
        pts = np.column_stack([np.cos(ang), np.sin(ang)])
        if anchor is not None:
            pts[0] = anchor
        return pts
    m = n if anchor is None else n - 1
    g = ndtri(qmc.Halton(d, scramble=False).random(m + 1)[1:])
    pts = g / np.linalg.norm(g, axis=1, keepdims=True)
    if anchor is None:
        return pts
    return np.vstack([anchor, pts])


def make_lower_bound_instance(K, d, epsilon, signs, net_size):
    """Perturbed hard instance ``Pi(M_0 + eps * sum_i v_i e_{1i})`` with ``rho = e_1``.

    The unit sphere is replaced by a deterministic net of ``net_size`` points
    whose first element is the exact optimum ``x* = M_1 / ||M_1||``.
    """
    signs = np.asarray(signs, dtype=float)
    if K < 2 or d < 2:
        raise InvalidInputError("need K >= 2 and d >= 2")
    if signs.shape != (d - 1,) or not np.all(np.abs(signs) == 1):
        raise InvalidInputError("signs must be a (d-1)-vector of +-1")
    if not 0 <= epsilon <= 1 / np.sqrt(d - 1):
        raise InvalidInputError("epsilon must lie in [0, 1/sqrt(d-1)]")
    if net_size < d:
        raise InvalidInputError("net_size must be at least d")
    m = np.zeros((K, d))
    m[0, 0] = 1.0
    m[0, 1:] = epsilon * signs
    theta = project_pi(m)
    rho = np.zeros(K)
    rho[0] = 1.0
    row = m[0]
    x_star = row / np.linalg.norm(row)
    meta = {
        "generator": "lower_bound",
        "params": {"K": K, "d": d, "epsilon": epsilon, "signs": signs.tolist(),
                   "net_size": net_size},
        "x_star": x_star.tolist(),
        "kappa_star_closed_form": large_kappa_star_closed_form(K, np.linalg.norm(row)),
    }
    return ProblemInstance(theta, rho, sphere_net(net_size, d, x_star),
                           float(np.linalg.norm(theta)), meta)


def make_random_instance(K, d, S, n_actions, rng=0):
    """Gaussian parameter rescaled to ``||theta*||_F = S``, actions uniform in the ball."""
    if K < 2 or d < 1 or S < 0 or n_actions < 1:
        raise InvalidInputError("need K >= 2, d >= 1, S >= 0, n_actions >= 1")
    rng = as_generator(rng)
    theta = project_pi(rng.standard_normal((K, d)))
    norm = np.linalg.norm(theta)
    theta = theta * (S / norm) if norm > 0 else theta
    ones = np.ones(K) / np.sqrt(K)
    while True:
        g = np.abs(rng.standard_normal(K))
        rho = g / np.linalg.norm(g)
        if np.arccos(min(rho @ ones, 1.0)) > 1e-6:
            break
    radii = rng.random(n_actions) ** (1.0 / d)
    actions = random_unit_vectors(n_actions, d, rng) * radii[:, None]
    meta = {"generator": "random",
            "params": {"K": K, "d": d, "S": S, "n_actions": n_actions}}
    return ProblemInstance(theta, rho, actions, S, meta)


GENERATORS = {
    "large_kappa_star": make_large_kappa_star_instance,
    "lower_bound": make_lower_bound_instance,
    "random": make_random_instance,
}


def build_instance(spec):
    """Instance from ``{"generator": name, "params": {...}}`` or ``{"path": file}``."""
    if "path" in spec:
        return ProblemInstance.load(spec["path"])
    name = spec.get("generator")
    if name not in GENERATORS:
        raise InvalidInputError(f"unknown generator {name!r}; pick from {sorted(GENERATORS)}")
    try:
        return GENERATORS[name](**spec.get("params", {}))
    except TypeError as exc:
        raise InvalidInputError(f"bad parameters for {name}: {exc}") from None
