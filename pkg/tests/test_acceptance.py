"""End-to-end acceptance checks, one test per criterion.

Each test records its verdict in ``conftest.ACCEPTANCE`` so the terminal
summary prints one PASS/FAIL line per criterion. Thresholds are fixed here
and must not be loosened to make a run pass.
"""

import dataclasses
import filecmp
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oapd.agent import AgentConfig, EvalPolicy, evaluate, train
from oapd.cli import main
from oapd.env import AS_GIVEN, UNIFORM, EnvConfig, dispatch_cost, inertia_redispatch
from oapd.neural import MLP
from oapd.oracle import OracleConfig, coordinate_descent, exhaustive_search
from oapd.powerflow import NewtonSystem, SolverConfig, solve

from .conftest import ACCEPTANCE, random_case
from .test_neural import _fd_check
from .test_powerflow import _check_jacobian

TRAIN_SEEDS = (0, 1, 2)
BENCH_TOL = 0.001  # benchmark stop at oracle cost + 0.1%
FACTORS = (0.8, 0.9, 1.1, 1.2)
TESTS = Path(__file__).parent


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="session")
def oracle_base(case14):
    return coordinate_descent(case14, EnvConfig(), OracleConfig())


@pytest.fixture(scope="session")
def trained(case14):
    """One training run per documented seed with the default configuration."""
    runs = {}
    for seed in TRAIN_SEEDS:
        t = time.perf_counter()
        res = train(case14, EnvConfig(), AgentConfig(), seed=seed)
        runs[seed] = (res, time.perf_counter() - t)
    return runs


def test_c1_power_flow_fidelity(case14):
    cfg = SolverConfig(tolerance=1e-9)
    solve(case14, cfg)  # warm caches before timing
    best = min(_timed(lambda: solve(case14, cfg))[1] for _ in range(5))
    sol = solve(case14, cfg)
    ok = sol.converged and sol.iterations <= 10 and sol.max_mismatch <= 1e-9 and best < 0.05
    record(1, ok, f"iterations={sol.iterations} mismatch={sol.max_mismatch:.2e} time={best * 1e3:.1f}ms")


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def test_c2_cost_exactness(case14):
    checks = [
        ([176.9, 48.2, 5.8, 11.5, 0.3], 7.1341),
        ([126.7, 48.1, 5.8, 11.4, 0.3], 5.4663),
        ([201.7, 48.2, 5.8, 11.5, 0.3], 8.0338),
    ]
    got = [dispatch_cost(case14, pg) for pg, _ in checks]
    ok = all(abs(g - want) <= 5e-5 for g, (_, want) in zip(got, checks))
    record(2, ok, " ".join(f"{g:.6f}" for g in got))


def _reduced_case(case):
    """Only G2 and G3 move: G4 and G5 get p_min == p_max. Setpoints snapped onto the p_min lattice."""
    gens = list(case.generators)
    for i in (3, 4):
        g = gens[i]
        gens[i] = dataclasses.replace(g, p_min=g.pg, p_max=g.pg)
    for i in (1, 2):
        g = gens[i]
        gens[i] = dataclasses.replace(g, pg=g.p_min + 0.5 * round((g.pg - g.p_min) / 0.5))
    return dataclasses.replace(case, generators=tuple(gens))


def test_c3_oracle_validity(case14, oracle_base):
    t = time.perf_counter()
    env = EnvConfig()
    red = _reduced_case(case14)
    cd = coordinate_descent(red, env, OracleConfig(restarts=10))
    lo = red.gen_array("p_min")[list(red.controllable)]
    hi = red.gen_array("p_max")[list(red.controllable)]
    ex = exhaustive_search(red, env, list(zip(lo, hi)))
    window = [(x - 2.5, x + 2.5) for x in oracle_base.setpoints]
    local = exhaustive_search(case14, env, window)
    elapsed = time.perf_counter() - t
    ok = cd.cost == ex.cost and local.cost >= oracle_base.cost and elapsed < 300
    record(3, ok, f"reduced cd={cd.cost:.6f} exhaustive={ex.cost:.6f}; base oracle={oracle_base.cost:.6f} "
                  f"window best={local.cost:.6f}; {elapsed:.0f}s")


def test_c4_gradient_checks():
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        n = 3 + seed % 5
        sys_ = NewtonSystem.from_case(random_case(rng, n), rng.uniform(0.9, 1.1, n), rng.uniform(-0.3, 0.3, n))
        _check_jacobian(sys_, sys_.x0)
        sizes = (int(rng.integers(1, 6)), int(rng.integers(1, 10)), int(rng.integers(1, 5)))
        net = MLP.init(sizes, rng)
        for b in net.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        B = int(rng.integers(1, 6))
        _fd_check(net, rng.normal(size=(B, sizes[0])), rng.integers(0, sizes[-1], B), rng.normal(size=B))
    record(4, True, "20 Jacobians within 1e-6, 20 MLP gradients within 1e-5")


def test_c5_training_outcome(trained, oracle_base):
    gaps = {s: trained[s][0].best_cost / oracle_base.cost - 1 for s in TRAIN_SEEDS}
    times = {s: trained[s][1] for s in TRAIN_SEEDS}
    hits = sum(g <= 0.005 for g in gaps.values())
    ok = hits >= 2 and max(times.values()) < 1800
    detail = " ".join(f"seed{s}={100 * gaps[s]:.3f}%/{times[s]:.0f}s" for s in TRAIN_SEEDS)
    record(5, ok, f"{hits}/3 within 0.5%: {detail}")


def test_c6_case_study_one(case14, trained, oracle_base):
    res = trained[TRAIN_SEEDS[0]][0]
    ref = oracle_base.cost
    policy = EvalPolicy("benchmark", ref * (1 + BENCH_TOL))
    reps = [evaluate(res.net, case14, EnvConfig(), policy, seed=TRAIN_SEEDS[0], init=UNIFORM,
                     normalizer=res.agent.normalizer, run=run) for run in range(45)]
    gaps = np.array([r.best_cost / ref - 1 for r in reps])
    w01 = float(np.mean(gaps <= 0.001))
    w1 = float(np.mean(gaps <= 0.01))
    steps = float(np.mean([r.steps for r in reps]))
    ok = w01 >= 0.5 and w1 >= 0.9 and steps <= 100
    record(6, ok, f"within 0.1%: {w01:.0%}, within 1%: {w1:.0%}, mean steps {steps:.1f}")


def test_c7_case_study_two(case14, trained):
    res = trained[TRAIN_SEEDS[0]][0]
    parts, ok = [], True
    for f in FACTORS:
        fcase = inertia_redispatch(case14, f)
        orc = coordinate_descent(fcase, EnvConfig(), OracleConfig())
        rep = evaluate(res.net, fcase, EnvConfig(), EvalPolicy("budget"), seed=TRAIN_SEEDS[0], init=AS_GIVEN,
                       normalizer=res.agent.normalizer)
        gap = rep.best_cost / orc.cost - 1
        ok &= gap <= 0.02
        parts.append(f"{f}: {100 * gap:+.2f}%")
    record(7, ok, ", ".join(parts))


FAST = {"version": 1, "max_episode_steps": 20, "batch_size": 16, "memory_size": 64, "hidden": [16],
        "max_train_episodes": 2, "eval_runs": 3, "max_eval_steps": 20, "restarts": 2, "max_sweeps": 5}


def _run_all(root: Path, config: str) -> None:
    for argv in (["pf"], ["train"], ["oracle"]):
        assert main([*argv, "--config", config, "--out", str(root), "--seed", "7"]) == 0
    ckpt = root / "train" / "checkpoint.bin"
    assert main(["eval", "--config", config, "--out", str(root), "--seed", "7", "--checkpoint", str(ckpt)]) == 0


def test_c8_determinism(tmp_path):
    config = tmp_path / "fast.json"
    config.write_text(json.dumps(FAST))
    a, b = tmp_path / "a", tmp_path / "b"
    _run_all(a, str(config))
    _run_all(b, str(config))
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".csv", ".bin"))
    same = [filecmp.cmp(a / f, b / f, shallow=False) for f in files]
    ok = len(files) >= 6 and all(same)
    record(8, ok, f"{sum(same)}/{len(files)} artifacts byte-identical")


PROPERTY_TESTS = [
    "test_env.py::test_decode_is_bijection",
    "test_env.py::test_reward_branches_exclusive",
    "test_agent.py::test_epsilon_monotone_and_floored",
    "test_agent.py::test_replay_ring",
    "test_agent.py::test_target_frozen_between_syncs",
    "test_agent.py::test_identical_nets_reduce_to_max_form",
    "test_powerflow.py::test_conservation",
    "test_powerflow.py::test_random_cases_conserve_power",
]


def test_c9_property_suites():
    ids = [str(TESTS / t) for t in PROPERTY_TESTS]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                          capture_output=True, text=True, cwd=TESTS.parent)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(9, proc.returncode == 0, tail)


# Reference-dispatch figures quoted for the original network. Our network data
# gives higher losses, so these are expected to fail; see the project notes.

@pytest.mark.xfail(strict=True, reason="published optimum depends on unpublished network data")
def test_oracle_matches_published_base_optimum(oracle_base):
    assert oracle_base.cost <= 7.141


@pytest.mark.xfail(strict=True, reason="published optimum depends on unpublished network data")
def test_oracle_matches_published_light_load_optimum(case14):
    orc = coordinate_descent(inertia_redispatch(case14, 0.8), EnvConfig(), OracleConfig())
    assert abs(orc.cost / 5.4663 - 1) <= 0.005
