"""Dispatch environment: observations, joint discrete actions, cost, reward, episodes."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .network import NetworkCase, check, scale_load
from .powerflow import PowerFlowSolution, SolverConfig, solve


class Reason(enum.Enum):
    RUNNING = "Running"
    MAX_STEPS = "MaxSteps"
    VOLTAGE_VIOLATION = "VoltageViolation"
    DIVERGED = "Diverged"


class EpisodeTerminated(RuntimeError):
    """Raised when stepping an episode that has already ended."""


class SnapshotUnsolvable(RuntimeError):
    """The initial power flow of an episode did not converge."""


@dataclass(frozen=True)
class EnvConfig:
    delta_p: float = 0.5  # MW per action step
    v_lo: float = 0.95
    v_hi: float = 1.05
    r_p: float = 1.0
    r_n: float = 5.0
    r_e: float = 10.0
    beta: float = 0.02  # per k$/hr
    max_episode_steps: int = 100
    solver_config: SolverConfig = SolverConfig()
    enforce_slack_limits: bool = True  # reject moves that push the slack further outside its limits
    mask_idle_actions: bool = True  # the policy skips actions whose every move is clipped away

    def __post_init__(self) -> None:
        if not self.v_lo < self.v_hi:
            raise ValueError("v_lo must be below v_hi")
        if not self.delta_p > 0:
            raise ValueError("delta_p must be positive")
        for name in ("r_p", "r_n", "r_e", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be at least 1")


@dataclass(frozen=True)
class InitMode:
    """How controllable setpoints are initialised on reset.

    ``as_given`` keeps the case values, ``uniform`` draws each setpoint
    uniformly over its limits, ``perturbed`` adds N(0, sigma^2) MW noise to
    the case values and clamps.
    """

    kind: str = "as_given"
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("as_given", "uniform", "perturbed"):
            raise ValueError(f"unknown init mode {self.kind!r}")
        if self.kind == "perturbed" and not self.sigma > 0:
            raise ValueError("perturbed init needs sigma > 0")

    @classmethod
    def parse(cls, text: str) -> "InitMode":
        """``as_given`` | ``uniform`` | ``perturbed:<sigma MW>``."""
        if text.startswith("perturbed"):
            _, _, sigma = text.partition(":")
            return cls("perturbed", float(sigma or 5.0))
        return cls(text)

    def __str__(self) -> str:
        return f"perturbed:{self.sigma!r}" if self.kind == "perturbed" else self.kind


AS_GIVEN = InitMode("as_given")
UNIFORM = InitMode("uniform")


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    cost: float  # k$/hr; nan when the power flow diverged
    terminal: bool
    reason: Reason
    dispatch: np.ndarray  # MW, every generator (slack as solved)
    action: int = -1
    vm_min: float = float("nan")
    vm_max: float = float("nan")


@dataclass
class EpisodeState:
    case: NetworkCase
    setpoints: np.ndarray  # MW, controllable generators in case order
    solution: PowerFlowSolution
    observation: np.ndarray
    step_count: int = 0
    terminal: bool = False
    reason: Reason = Reason.RUNNING

    @property
    def pg(self) -> np.ndarray:
        """Full generator setpoint vector with the slack entry taken from the last solve."""
        pg = self.solution.pg.copy()
        pg[list(self.case.controllable)] = self.setpoints
        return pg

    @property
    def cost(self) -> float:
        return dispatch_cost(self.case, self.solution.pg) if self.solution.converged else float("nan")


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------


def n_actions(n_ctrl: int) -> int:
    return 3**n_ctrl


def decode_action(index: int, n_ctrl: int, delta_p: float) -> np.ndarray:
    """Base-3 digits of ``index`` (least significant = first controllable generator).

    Digit 0 decreases by ``delta_p``, 1 holds, 2 increases.
    """
    if not 0 <= index < 3**n_ctrl:
        raise ValueError(f"action {index} outside [0, {3**n_ctrl})")
    out = np.empty(n_ctrl)
    for k in range(n_ctrl):
        index, digit = divmod(index, 3)
        out[k] = (digit - 1) * delta_p
    return out


def action_digits(n_ctrl: int) -> np.ndarray:
    """(3**n_ctrl, n_ctrl) table of digits minus one: -1 decrease, 0 hold, +1 increase."""
    idx = np.arange(3**n_ctrl)
    return np.stack([(idx // 3**k) % 3 - 1 for k in range(n_ctrl)], axis=1)


def action_mask(state: EpisodeState) -> np.ndarray:
    """True for actions where every generator asked to move can move.

    A unit sitting at a limit cannot step past it, so an action that pushes it
    there would be clipped into a smaller (or no) move. Masking such actions
    loses nothing: the same effective move has its own index. Hold is always
    allowed.
    """
    case = state.case
    ctrl = list(case.controllable)
    lo = case.gen_array("p_min")[ctrl]
    hi = case.gen_array("p_max")[ctrl]
    d = action_digits(len(ctrl))
    down = state.setpoints > lo + 1e-9
    up = state.setpoints < hi - 1e-9
    return np.all((d == 0) | ((d < 0) & down) | ((d > 0) & up), axis=1)


def encode_action(deltas: Sequence[float], delta_p: float) -> int:
    """Inverse of :func:`decode_action`."""
    index = 0
    for d in reversed(deltas):
        digit = int(round(d / delta_p)) + 1
        if digit not in (0, 1, 2) or abs(d - (digit - 1) * delta_p) > 1e-9 * max(1.0, delta_p):
            raise ValueError(f"delta {d} is not one of -{delta_p}, 0, +{delta_p}")
        index = index * 3 + digit
    return index


# ---------------------------------------------------------------------------
# cost and reward
# ---------------------------------------------------------------------------


def dispatch_cost(case: NetworkCase, pg: Sequence[float]) -> float:
    """Quadratic generation cost in k$/hr for per-generator outputs ``pg`` (MW)."""
    pg = np.asarray(pg, dtype=float)
    a = case.gen_array("cost_a")
    b = case.gen_array("cost_b")
    return float(np.sum(a * pg * pg + b * pg)) / 1000.0


def compute_cost(solution: PowerFlowSolution, case: NetworkCase) -> float:
    """Generation cost of a converged solution, slack generator included."""
    if not solution.converged:
        raise ValueError("cost is undefined for an unconverged power flow")
    return dispatch_cost(case, solution.pg)


def compute_reward(solution: PowerFlowSolution, cost: float, config: EnvConfig) -> tuple[float, Reason]:
    if not solution.converged:
        return -config.r_e, Reason.DIVERGED
    if np.any(solution.vm < config.v_lo) or np.any(solution.vm > config.v_hi):
        return -config.r_n, Reason.VOLTAGE_VIOLATION
    return config.r_p - config.beta * cost, Reason.RUNNING


def in_band(solution: PowerFlowSolution, config: EnvConfig) -> bool:
    """True for a converged solution with every bus inside the reward voltage band."""
    return compute_reward(solution, 0.0, config)[1] is Reason.RUNNING


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


def observation_size(case: NetworkCase) -> int:
    n_br = sum(1 for br in case.branches if br.in_service)
    return 2 * case.n_bus + 2 * n_br


def build_observation(case: NetworkCase, solution: PowerFlowSolution) -> np.ndarray:
    """``[vm] ++ [va] ++ [p_from] ++ [q_from]``; flows in p.u. of base MVA, in-service branches only."""
    live = np.array([br.in_service for br in case.branches], dtype=bool)
    flows = solution.branch_flows[live] / case.base_mva if live.size else np.zeros((0, 4))
    return np.concatenate([solution.vm, solution.va, flows[:, 0], flows[:, 1]])


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


def initial_setpoints(case: NetworkCase, init: InitMode, rng: np.random.Generator) -> np.ndarray:
    ctrl = list(case.controllable)
    lo = case.gen_array("p_min")[ctrl]
    hi = case.gen_array("p_max")[ctrl]
    given = case.gen_array("pg")[ctrl]
    if init.kind == "as_given":
        return given
    if init.kind == "uniform":
        return rng.uniform(lo, hi)
    return np.clip(given + rng.normal(0.0, init.sigma, size=len(ctrl)), lo, hi)


MAX_INIT_DRAWS = 1000


def reset(
    case: NetworkCase,
    config: EnvConfig,
    init: InitMode = AS_GIVEN,
    seed: int | np.random.Generator | None = 0,
) -> tuple[EpisodeState, np.ndarray]:
    """Start an episode on ``case``; raises :class:`SnapshotUnsolvable` if the snapshot diverges."""
    check(case)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    slack = case.generators[case.slack_gen]
    # random draws are repeated until the slack output they imply is within its limits
    attempts = 1 if init.kind == "as_given" else MAX_INIT_DRAWS
    for _ in range(attempts):
        setpoints = initial_setpoints(case, init, rng)
        pg = case.gen_array("pg")
        pg[list(case.controllable)] = setpoints
        sol = solve(case, config.solver_config, pg=pg)
        if init.kind == "as_given":
            break
        if sol.converged and slack.p_min <= sol.pg[case.slack_gen] <= slack.p_max:
            break
    else:
        raise SnapshotUnsolvable(f"no draw out of {attempts} kept the slack generator within its limits")
    if not sol.converged:
        raise SnapshotUnsolvable(f"initial power flow did not converge ({sol.diagnostic})")
    obs = build_observation(case, sol)
    return EpisodeState(case, setpoints, sol, obs), obs


def slack_excess(case: NetworkCase, solution: PowerFlowSolution) -> float:
    """MW by which the solved slack output lies outside its limits (0 when inside)."""
    g = case.generators[case.slack_gen]
    p = solution.pg[case.slack_gen]
    return float(max(g.p_min - p, p - g.p_max, 0.0))


def step(state: EpisodeState, action: int, config: EnvConfig) -> StepOutcome:
    """Apply one joint action, re-solve the power flow and score the new state."""
    if state.terminal:
        raise EpisodeTerminated(f"episode ended ({state.reason.value}); call reset")
    case = state.case
    ctrl = list(case.controllable)
    deltas = decode_action(action, len(ctrl), config.delta_p)
    lo = case.gen_array("p_min")[ctrl]
    hi = case.gen_array("p_max")[ctrl]
    previous_setpoints = state.setpoints
    state.setpoints = np.clip(state.setpoints + deltas, lo, hi)

    prev = state.solution
    init = (prev.vm, prev.va) if prev.converged else None
    sol = solve(case, config.solver_config, pg=state.pg, init=init)
    if config.enforce_slack_limits and sol.converged and prev.converged:
        if slack_excess(case, sol) > slack_excess(case, prev) + 1e-9:
            # the slack cannot absorb this move: it acts as a hold
            state.setpoints = previous_setpoints
            sol = prev
    cost = compute_cost(sol, case) if sol.converged else float("nan")
    reward, reason = compute_reward(sol, cost, config)

    state.step_count += 1
    if reason is Reason.RUNNING and state.step_count >= config.max_episode_steps:
        reason = Reason.MAX_STEPS
    if sol.converged and np.all(np.isfinite(sol.vm)):
        state.observation = build_observation(case, sol)
    state.solution = sol
    state.reason = reason
    state.terminal = reason is not Reason.RUNNING
    return StepOutcome(
        observation=state.observation,
        reward=float(reward),
        cost=cost,
        terminal=state.terminal,
        reason=reason,
        dispatch=sol.pg.copy(),
        action=int(action),
        vm_min=float(np.min(sol.vm)),
        vm_max=float(np.max(sol.vm)),
    )


# ---------------------------------------------------------------------------
# case-study helpers
# ---------------------------------------------------------------------------


def inertia_redispatch(case: NetworkCase, factor: float) -> NetworkCase:
    """Scale the load and share the change among generators in proportion to output.

    Every generator is assigned ``pg / sum(pg)`` of the load change. Controllable
    generators that hit a limit keep the clamped value and the remainder is
    spread over the unclamped ones; the slack absorbs whatever is left when the
    power flow is solved.
    """
    if not factor > 0:
        raise ValueError(f"load factor must be positive, got {factor}")
    scaled = scale_load(case, factor)
    if factor == 1.0:
        return scaled
    pg = case.gen_array("pg")
    lo = case.gen_array("p_min")
    hi = case.gen_array("p_max")
    change = (factor - 1.0) * case.total_pd
    ctrl = np.array(case.controllable, dtype=int)
    target = change * pg[ctrl].sum() / pg.sum()

    new = pg.copy()
    free = ctrl.copy()
    remaining = target
    # water-fill: clamp, then push the residual onto generators still inside limits
    for _ in range(len(ctrl) + 1):
        if not free.size or abs(remaining) <= 1e-12:
            break
        weights = pg[free] / pg[free].sum() if pg[free].sum() > 0 else np.full(free.size, 1 / free.size)
        trial = np.clip(new[free] + remaining * weights, lo[free], hi[free])
        remaining -= float(np.sum(trial - new[free]))
        new[free] = trial
        free = free[(trial > lo[free]) & (trial < hi[free])]
    s = case.slack_gen
    new[s] = float(np.clip(pg[s] + change * pg[s] / pg.sum(), lo[s], hi[s]))
    return scaled.with_dispatch(new)


TRACE_HEADER = ["step", "action_index", "cost_k$_hr", "reward", "terminal", "reason", "vm_min", "vm_max"]


def write_trace(out: TextIO, outcomes: Iterable[StepOutcome], n_gen: int) -> None:
    """Episode trace CSV, one row per step."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRACE_HEADER + [f"pg_{k + 1}" for k in range(n_gen)])
    for i, o in enumerate(outcomes, start=1):
        w.writerow(
            [i, o.action, f"{o.cost:.6f}", f"{o.reward:.8f}", int(o.terminal), o.reason.value,
             f"{o.vm_min:.6f}", f"{o.vm_max:.6f}", *(f"{p:.4f}" for p in o.dispatch)]
        )
