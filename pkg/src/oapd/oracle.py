"""Reference dispatch on the same discrete lattice the agent searches.

Multi-start coordinate descent gives the reference cost for the case
studies; exhaustive enumeration over a window certifies it on small
problems.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .env import EnvConfig, dispatch_cost, in_band
from .network import NetworkCase, check
from .powerflow import solve
from .rng import substream

MAX_LATTICE_POINTS = 10**6


class NoFeasiblePoint(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    delta_p: float = 0.5
    restarts: int = 10
    max_sweeps: int = 1000
    seed: int = 0
    respect_voltage_band: bool = True

    def __post_init__(self) -> None:
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if not self.delta_p > 0:
            raise ValueError("delta_p must be positive")


@dataclass
class OracleResult:
    cost: float  # k$/hr
    dispatch: np.ndarray  # MW, every generator (slack as solved)
    setpoints: np.ndarray  # MW, controllable generators
    feasible: bool
    restarts_used: int = 0
    sweeps: int = 0


class _Evaluator:
    """Cost of a setpoint vector; +inf when infeasible. Memoised, start-point independent."""

    def __init__(self, case: NetworkCase, env_config: EnvConfig, respect_band: bool):
        self.case = check(case)
        self.env_config = env_config
        self.respect_band = respect_band
        self.ctrl = list(case.controllable)
        self.base_pg = case.gen_array("pg")
        s = case.slack_gen
        self.slack_limits = (case.generators[s].p_min, case.generators[s].p_max)
        self.cache: dict[tuple[float, ...], tuple[float, np.ndarray]] = {}

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        key = tuple(np.round(x, 9))
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        pg = self.base_pg.copy()
        pg[self.ctrl] = key
        sol = solve(self.case, self.env_config.solver_config, pg=pg)
        ok = sol.converged and (in_band(sol, self.env_config) if self.respect_band else True)
        if ok:
            # the slack balances the system, so its limits are checked after the solve
            p_slack = sol.pg[self.case.slack_gen]
            ok = self.slack_limits[0] - 1e-9 <= p_slack <= self.slack_limits[1] + 1e-9
        hit = (dispatch_cost(self.case, sol.pg) if ok else math.inf, sol.pg)
        self.cache[key] = hit
        return hit


def _better(cost: float, x: np.ndarray, best_cost: float, best_x: np.ndarray | None) -> bool:
    """Lower cost wins; equal cost falls back to the lexicographically smaller dispatch."""
    if cost < best_cost:
        return True
    if cost == best_cost and best_x is not None and math.isfinite(cost):
        return tuple(x) < tuple(best_x)
    return False


def _lattice_point(lo: np.ndarray, hi: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    steps = np.floor((hi - lo) / delta + 1e-9).astype(int)
    return lo + delta * rng.integers(0, steps + 1)


def coordinate_descent(
    case: NetworkCase,
    env_config: EnvConfig = EnvConfig(),
    config: OracleConfig = OracleConfig(),
) -> OracleResult:
    """Multi-start coordinate descent over +/-delta_p moves of each controllable generator.

    Restart 0 starts from the case setpoints, later restarts from random points
    of the lattice anchored at each generator's p_min.
    """
    ev = _Evaluator(case, env_config, config.respect_voltage_band)
    ctrl = ev.ctrl
    lo = case.gen_array("p_min")[ctrl]
    hi = case.gen_array("p_max")[ctrl]
    rng = substream(config.seed, "oracle")
    d = config.delta_p

    best_cost, best_x, best_pg = math.inf, None, None
    total_sweeps = 0
    for restart in range(config.restarts):
        x = case.gen_array("pg")[ctrl] if restart == 0 else _lattice_point(lo, hi, d, rng)
        cost, pg = ev(x)
        for _ in range(config.max_sweeps):
            total_sweeps += 1
            improved = False
            for i in range(len(ctrl)):
                cand_cost, cand_x, cand_pg = cost, x, pg
                for move in (-d, d):
                    y = x.copy()
                    y[i] = min(max(y[i] + move, lo[i]), hi[i])
                    if y[i] == x[i]:
                        continue
                    c, p = ev(y)
                    if c < cand_cost or (c == cand_cost and math.isfinite(c) and tuple(y) < tuple(cand_x)):
                        cand_cost, cand_x, cand_pg = c, y, p
                if cand_cost < cost:
                    cost, x, pg = cand_cost, cand_x, cand_pg
                    improved = True
            if not improved:
                break
        if _better(cost, x, best_cost, best_x):
            best_cost, best_x, best_pg = cost, x, pg
    if best_x is None:
        raise NoFeasiblePoint(f"no feasible dispatch found in {config.restarts} restarts")
    return OracleResult(best_cost, best_pg.copy(), best_x.copy(), True, config.restarts, total_sweeps)


def window_points(lo: float, hi: float, delta: float, p_min: float, p_max: float) -> np.ndarray:
    """Lattice ``lo, lo+delta, ...`` up to ``hi`` (plus ``hi`` itself), clamped to the limits."""
    n = int(math.floor((hi - lo) / delta + 1e-9))
    pts = lo + delta * np.arange(n + 1)
    if hi - pts[-1] > 1e-9:
        pts = np.append(pts, hi)
    return np.unique(np.round(np.clip(pts, p_min, p_max), 9))


def exhaustive_search(
    case: NetworkCase,
    env_config: EnvConfig,
    window: Sequence[tuple[float, float]],
    delta_p: float = 0.5,
    respect_voltage_band: bool = True,
) -> OracleResult:
    """Evaluate every lattice point of ``window`` (one (lo, hi) MW range per controllable generator)."""
    ev = _Evaluator(case, env_config, respect_voltage_band)
    ctrl = ev.ctrl
    if len(window) != len(ctrl):
        raise ValueError(f"window needs one range per controllable generator ({len(ctrl)})")
    p_lo = case.gen_array("p_min")[ctrl]
    p_hi = case.gen_array("p_max")[ctrl]
    axes = [window_points(a, b, delta_p, p_lo[i], p_hi[i]) for i, (a, b) in enumerate(window)]
    total = math.prod(len(ax) for ax in axes)
    if total > MAX_LATTICE_POINTS:
        raise ValueError(f"window holds {total} lattice points (limit {MAX_LATTICE_POINTS})")

    best_cost, best_x, best_pg = math.inf, None, None
    # product() walks points in lexicographic order, so the first minimum is the tie winner
    for point in itertools.product(*axes):
        x = np.array(point)
        cost, pg = ev(x)
        if cost < best_cost:
            best_cost, best_x, best_pg = cost, x, pg
    if best_x is None:
        raise NoFeasiblePoint("no feasible point in the window")
    return OracleResult(best_cost, best_pg.copy(), best_x, True, 1, 0)


ORACLE_HEADER = "cost_k$_hr"


def write_oracle_row(out: TextIO, res: OracleResult) -> None:
    w = csv.writer(out, lineterminator="\n")
    n = len(res.dispatch)
    w.writerow([ORACLE_HEADER, *(f"pg_{k + 1}" for k in range(n)), "feasible", "restarts_used", "sweeps"])
    w.writerow([f"{res.cost:.6f}", *(f"{p:.4f}" for p in res.dispatch),
                int(res.feasible), res.restarts_used, res.sweeps])
