"""Experiment configuration, multi-seed execution and result files."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import InvalidInputError
from .environment import build_instance
from .kata_log import POLICIES, PolicyConfig, run

OUT_ENV = "MNL_BANDIT_OUT"
DEFAULT_OUT = "results"
TRACE_HEADER = "t,action,outcome,reward,inst_regret,cum_regret,eps1,eps2,est_dist,elapsed_ns"
TRACE_VERSION = 1
POLICY_FIELDS = ("delta", "paper_constants", "lambda_override", "tau_override",
                 "sigma_scale", "pgd_max_iters", "pgd_tol")


class ConfigError(InvalidInputError):
    """The experiment configuration is malformed."""


def default_out_dir():
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


@dataclass
class ExperimentConfig:
    instance: dict
    policies: list
    T: int
    seeds: list
    policy: dict = field(default_factory=dict)
    out: str | None = None
    trace: bool = True
    aggregates: bool = True
    oracle: bool = False
    trace_timing: bool = False
    check_optimism: bool = True
    checkpoints: list | None = None
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.instance, dict) or not self.instance:
            raise ConfigError("'instance' must be an object with a generator or a path")
        if isinstance(self.policies, str):
            self.policies = [self.policies]
        if not self.policies:
            raise ConfigError("at least one policy is required")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown:
            raise ConfigError(f"unknown policies {unknown}; pick from {sorted(POLICIES)}")
        if not isinstance(self.T, int) or self.T < 1:
            raise ConfigError("T must be a positive integer")
        self.seeds = parse_seeds(self.seeds)
        bad = set(self.policy) - set(POLICY_FIELDS)
        if bad:
            raise ConfigError(f"unknown policy settings {sorted(bad)}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.checkpoints is not None:
            if not all(isinstance(c, int) and 1 <= c <= self.T for c in self.checkpoints):
                raise ConfigError("checkpoints must be integers in [1, T]")
        self.policy_config()

    def policy_config(self):
        try:
            return PolicyConfig(T=self.T, **self.policy)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None

    def out_dir(self):
        return Path(self.out) if self.out else default_out_dir()

    def checkpoint_grid(self):
        if self.checkpoints:
            return sorted(set(self.checkpoints))
        return default_checkpoints(self.T)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in fields(cls)}
        doc = dict(doc)
        emit = doc.pop("emit", {})
        for key in ("trace", "aggregates", "oracle", "trace_timing"):
            if key in emit:
                doc[key] = emit[key]
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        missing = {"instance", "policies", "T", "seeds"} - set(doc)
        if missing:
            raise ConfigError(f"missing config keys {sorted(missing)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)


def parse_seeds(seeds):
    """An integer count ``n`` means seeds 0..n-1; a list or "1,2,5" is taken literally."""
    if isinstance(seeds, str):
        try:
            seeds = [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad seed list {seeds!r}") from None
        if len(seeds) == 1:
            seeds = list(range(seeds[0]))
    elif isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = list(range(seeds))
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a positive count or a nonempty list of nonnegative ints")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("duplicate seeds")
    return seeds


def default_checkpoints(T):
    grid = {T}
    step = 1
    while step < T:
        grid.update(c for c in (step, 2 * step, 5 * step) if c <= T)
        step *= 10
    return sorted(grid)


def _fmt(v):
    return format(float(v), ".17g")


def write_trace(path, records, timing=False):
    """Write a per-round trace; floats carry 17 significant digits."""
    lines = [TRACE_HEADER]
    cum = 0.0
    for r in records:
        cum += r.inst_regret
        lines.append(",".join((
            str(r.t), str(r.action_index), str(r.outcome), _fmt(r.reward),
            _fmt(r.inst_regret), _fmt(cum), _fmt(r.eps1), _fmt(r.eps2),
            _fmt(r.est_dist), str(r.elapsed_ns if timing else 0))))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path):
    """Parse a trace file into a dict of numpy columns."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TRACE_HEADER:
            raise InvalidInputError(f"unexpected trace header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return {name: data[:, i] for i, name in enumerate(TRACE_HEADER.split(","))}


@dataclass
class RunSummary:
    policy: str
    seed: int
    inst_regret: np.ndarray
    eps1: np.ndarray
    eps2: np.ndarray
    elapsed_ns: np.ndarray
    optimism_checks: int
    optimism_violations: int
    extra: dict


def execute(job):
    """One (policy, seed) run; writes its trace and returns a compact summary."""
    cfg, inst, policy, seed = job
    res = run(inst, policy, cfg.policy_config(), seed, check_optimism=cfg.check_optimism)
    if cfg.trace:
        write_trace(cfg.out_dir() / f"trace_{policy}_{seed}.csv", res.records, cfg.trace_timing)
    recs = res.records
    return RunSummary(
        policy, seed,
        np.array([r.inst_regret for r in recs]),
        np.array([r.eps1 for r in recs]),
        np.array([r.eps2 for r in recs]),
        np.array([r.elapsed_ns for r in recs], dtype=np.int64),
        res.optimism_checks, res.optimism_violations, res.extra)


def _quantiles(values, qs):
    return {f"q{int(q * 100):02d}": float(np.quantile(values, q)) for q in qs}


def aggregate(summaries, checkpoints):
    """Per-policy statistics at the checkpoint grid."""
    out = {}
    idx = np.asarray(checkpoints) - 1
    for policy in dict.fromkeys(s.policy for s in summaries):
        runs = [s for s in summaries if s.policy == policy]
        cum = np.stack([np.cumsum(s.inst_regret)[idx] for s in runs])
        q25, med, q75 = np.quantile(cum, [0.25, 0.5, 0.75], axis=0)
        checks = sum(s.optimism_checks for s in runs)
        viol = sum(s.optimism_violations for s in runs)
        timing = np.concatenate([s.elapsed_ns for s in runs]).astype(float)
        out[policy] = {
            "seeds": [s.seed for s in runs],
            "checkpoints": [
                {"t": int(t), "mean": float(cum[:, i].mean()), "median": float(med[i]),
                 "q25": float(q25[i]), "q75": float(q75[i]), "iqr": float(q75[i] - q25[i])}
                for i, t in enumerate(checkpoints)],
            "final_regret": [float(np.sum(s.inst_regret)) for s in runs],
            "eps1_mean": [float(np.mean([s.eps1[i] for s in runs])) for i in idx],
            "eps2_mean": [float(np.mean([s.eps2[i] for s in runs])) for i in idx],
            "optimism": {"checks": checks, "violations": viol,
                         "rate": viol / checks if checks else None},
            "timing_ns": _quantiles(timing, (0.5, 0.9, 0.99)) | {"max": float(timing.max())},
            "extra": {str(s.seed): _jsonable(s.extra) for s in runs},
        }
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def run_experiment(cfg):
    """Execute every (policy, seed) pair and write traces plus ``aggregates.json``."""
    inst = build_instance(cfg.instance)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, inst, p, s) for p in cfg.policies for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            summaries = list(pool.map(execute, jobs))
    else:
        summaries = [execute(j) for j in jobs]
    # everything below runs after all workers have joined
    result = {
        "trace_version": TRACE_VERSION,
        "T": cfg.T,
        "instance": inst.to_dict(),
        "policies": aggregate(summaries, cfg.checkpoint_grid()),
    }
    if cfg.oracle:
        from .oracle import run_checks
        reports = run_checks("quick")
        result["oracle"] = [r.to_dict() for r in reports]
    if cfg.aggregates:
        (out / "aggregates.json").write_text(json.dumps(result, indent=1))
    return result


def instance_info(inst):
    """Problem constants of an instance as a JSON-ready dict."""
    from .core import kappa_bounds

    # the bracket refers to the whole unit ball, X = 1
    bracket = kappa_bounds(inst.S, 1.0, inst.K)
    info = {
        "K": inst.K, "d": inst.d, "S": inst.S, "n_actions": inst.n_actions, "X": 1.0,
        "kappa_bracket": {"lower": bracket.lower, "upper": bracket.upper,
                          "lower_valid": bracket.lower_valid},
        "kappa_star": inst.kappa_star,
        "best_index": inst.best_index,
        "x_star": inst.actions[inst.best_index].tolist(),
        "mean_rewards": inst.mean_rewards.tolist(),
        "gaps": inst.gaps.tolist(),
    }
    if "kappa_star_closed_form" in inst.metadata:
        info["kappa_star_closed_form"] = inst.metadata["kappa_star_closed_form"]
    info["metadata"] = inst.metadata
    return info
