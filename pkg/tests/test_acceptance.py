"""Acceptance criteria, one test each, at their stated tolerances and budgets.

Each test prints a ``PASS``/``FAIL criterion N`` line; the lines are also
collected into the terminal summary.
"""

import json
import time

import numpy as np
import pytest

from conftest import CRITERIA
from mnl_bandit import oracle
from mnl_bandit.cli import main
from mnl_bandit.core import kappa_bounds
from mnl_bandit.environment import ProblemInstance, make_large_kappa_star_instance, sphere_net
from mnl_bandit.kata_log import PolicyConfig, baseline_random, kata_log_run, run


def verdict(n, ok, text):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    CRITERIA[n] = line
    print(line)
    assert ok, line


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def final_regret(records):
    return float(np.sum([r.inst_regret for r in records]))


def test_criterion_1_model_math():
    with Clock() as clock:
        ident = oracle.model_identity_check(n_probes=1000)
        grads = oracle.model_gradient_check(n_probes=1000)
    ok = ident.passed and grads.passed and clock.seconds < 10
    verdict(1, ok, f"identities err={ident.max_abs_err:.2e}, fd rel err={grads.max_abs_err:.2e} "
                   f"(tol 1e-6), {clock.seconds:.1f}s < 10s")


def test_criterion_2_incremental_algebra():
    with Clock() as clock:
        rep = oracle.gram_replay_check(n_updates=500, K=4, d=3)
    ok = rep.max_abs_err <= 1e-8 and clock.seconds < 30
    verdict(2, ok, f"W, W^-1, Cholesky max-abs err={rep.max_abs_err:.2e} (tol 1e-8), "
                   f"{clock.seconds:.1f}s < 30s")


def test_criterion_3_ellipsoid_projection():
    with Clock() as clock:
        rep = oracle.projection_check(n_problems=100, n_points=100_000)
    ok = rep.max_abs_err <= 1e-8 and clock.seconds < 60
    verdict(3, ok, f"{rep.details} (tol 1e-8), {clock.seconds:.1f}s < 60s")


def test_criterion_4_kappa_bracket():
    cells = []
    with Clock() as clock:
        for K in (2, 4):
            for S in (0.5, 1.0, 2.0):
                rho = np.zeros(K)
                rho[0] = 1.0
                inst = ProblemInstance(np.zeros((K, 2)), rho, sphere_net(16, 2), S)
                est = oracle.brute_force_kappa(inst, n_theta=1000, n_dirs=1000, rng=0)
                lo, hi, _ = kappa_bounds(S, 1.0, K)
                cells.append((K, S, est, lo, hi, lo <= est <= hi))
    bad = [f"K={K} S={S}: {est:.3f} not in [{lo:.3f}, {hi:.3f}]" for K, S, est, lo, hi, ok in cells if not ok]
    ok = not bad and clock.seconds < 120
    verdict(4, ok, f"{6 - len(bad)}/6 cells in bracket, {clock.seconds:.1f}s < 120s"
                   + ("; " + "; ".join(bad) if bad else ""))


def test_criterion_5_closed_form_kappa_star():
    with Clock() as clock:
        rep = oracle.kappa_closed_form_check(tol=1e-9)
    ok = rep.passed and clock.seconds < 5
    verdict(5, ok, f"max rel err={rep.max_abs_err:.2e} over {rep.samples} (K, S) cells, "
                   f"{clock.seconds:.2f}s < 5s")


def test_criterion_6_optimism():
    with Clock() as clock:
        rep = oracle.optimism_coverage_check(n_seeds=200, T=2000)
    ok = rep.max_abs_err <= 0.1 and clock.seconds < 1200
    verdict(6, ok, f"violation rate {rep.max_abs_err:.4f} ({rep.details}) <= 0.1, "
                   f"{clock.seconds:.0f}s < 1200s")


def test_criterion_7_sublinear_regret():
    inst = oracle.tiny_instance()
    T = 40_000
    cfg = PolicyConfig(T=T)
    ratios, kata, rand = [], [], []
    with Clock() as clock:
        for seed in range(20):
            cum = np.cumsum([r.inst_regret for r in kata_log_run(inst, cfg, seed)])
            ratios.append(cum[-1] / cum[T // 4 - 1])
            kata.append(cum[-1])
            rand.append(final_regret(baseline_random(inst, T, seed)))
    ratio, k_med, r_med = np.median(ratios), np.median(kata), np.median(rand)
    ok = ratio <= 2.5 and k_med <= r_med / 5 and clock.seconds < 1800
    verdict(7, ok, f"median Reg(T)/Reg(T/4)={ratio:.3f} <= 2.5, median final {k_med:.1f} vs "
                   f"random {r_med:.1f} (ratio {k_med / r_med:.4f} <= 0.2), {clock.seconds:.0f}s < 1800s")


def test_criterion_8_kappa_star_effect():
    T = 40_000
    cfg = PolicyConfig(T=T)
    medians, kstars = {}, {}
    with Clock() as clock:
        for S in (0.5, 2.0):
            inst = make_large_kappa_star_instance(3, 2, S, 5, rng=0)
            kstars[S] = inst.kappa_star
            medians[S] = np.median([final_regret(kata_log_run(inst, cfg, seed)) for seed in range(20)])
    ok = medians[2.0] < medians[0.5] and clock.seconds < 1800
    verdict(8, ok, f"median final regret {medians[2.0]:.1f} (kappa*={kstars[2.0]:.2f}) < "
                   f"{medians[0.5]:.1f} (kappa*={kstars[0.5]:.2f}), {clock.seconds:.0f}s < 1800s")


def test_criterion_9_per_round_cost():
    inst = oracle.tiny_instance()
    with Clock() as clock:
        res = run(inst, "kata_log", PolicyConfig(T=10_000), 0, check_optimism=False)
    ns = np.array([r.elapsed_ns for r in res.records], dtype=float)
    early, late = np.median(ns[899:1000]), np.median(ns[8999:10_000])
    ok = late <= 3 * early and clock.seconds < 600
    verdict(9, ok, f"median round time {late / 1e3:.1f}us at t in [9000,10000] vs "
                   f"{early / 1e3:.1f}us at t in [900,1000] (ratio {late / early:.2f} <= 3), "
                   f"{clock.seconds:.0f}s < 600s")


def test_criterion_10_determinism(tmp_path):
    doc = {"instance": {"generator": "random",
                        "params": {"K": 3, "d": 2, "S": 1.0, "n_actions": 5, "rng": 1}},
           "policies": ["kata_log", "random", "greedy_mle"], "T": 2000, "seeds": [3]}
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(doc))
    with Clock() as clock:
        codes = [main(["run", "--config", str(cfg), "--out", str(tmp_path / name)]) for name in ("a", "b")]
    files = sorted(p.name for p in (tmp_path / "a").glob("trace_*.csv"))
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ok = codes == [0, 0] and len(files) == 3 and same and clock.seconds < 120
    verdict(10, ok, f"{len(files)} trace files byte-identical across two executions: {same}, "
                    f"{clock.seconds:.1f}s < 120s")
