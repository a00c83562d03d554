"""Double-DQN learner over the dispatch environment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence, TextIO

import numpy as np

from . import env as E
from .env import EnvConfig, InitMode, Reason, StepOutcome
from .network import NetworkCase
from .neural import (
    MLP,
    ArchitectureMismatch,
    OptimizerState,
    apply_update,
    backward,
    copy_parameters,
    forward,
)
from .rng import substream


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    alpha: float = 0.001
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    decay_rate: float = 0.999
    batch_size: int = 200
    memory_size: int = 2000
    target_sync_period: int = 1000  # learn-steps between target copies
    learn_every: int = 1  # env-steps per learn-step
    max_train_episodes: int = 300
    max_eval_steps: int = 400
    stall_patience: int = 0  # episodes without a new best cost; 0 disables the boost
    stall_epsilon: float = 0.3
    hidden: tuple[int, ...] = (128, 64)
    optimizer: str = "adam"
    single_q: bool = False
    normalize_inputs: bool = True
    normalize_rewards: bool = True
    potential_shaping: bool = True  # learn Q - R(s)/(1-gamma); leaves the greedy policy unchanged
    reward_clip: float = 10.0  # bound on stored (scaled) rewards; 0 disables
    validation_every: int = 10  # episodes between greedy validation rounds; 0 returns the final net
    validation_runs: int = 8
    validation_steps: int = 300
    validation_tie: float = 1e-4  # relative cost difference treated as a tie (then fewer steps wins)
    train_init: str = "uniform"
    eval_epsilon: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.decay_rate < 1:
            raise ValueError("decay_rate must lie in (0, 1)")
        if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")
        if self.batch_size < 1 or self.memory_size < self.batch_size:
            raise ValueError("memory_size must hold at least one batch")
        if self.reward_clip < 0:
            raise ValueError("reward_clip must be non-negative")
        if (self.validation_every < 0 or self.validation_runs < 1 or self.validation_steps < 1
                or self.validation_tie < 0):
            raise ValueError("validation settings must be positive (validation_every may be 0)")
        if self.target_sync_period < 1 or self.learn_every < 1:
            raise ValueError("target_sync_period and learn_every must be positive")
        InitMode.parse(self.train_init)


@dataclass(frozen=True)
class EvalPolicy:
    mode: str = "benchmark"  # "benchmark" (stop at reference cost) or "budget" (min cost in budget)
    reference_cost: float = math.nan

    def __post_init__(self) -> None:
        if self.mode not in ("benchmark", "budget"):
            raise ValueError(f"unknown evaluation mode {self.mode!r}")
        if self.mode == "benchmark" and not math.isfinite(self.reference_cost):
            raise ValueError("benchmark stopping needs a finite reference cost")


# ---------------------------------------------------------------------------
# replay memory
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool
    next_mask: np.ndarray | None = None  # actions allowed in s_next; None means all


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, obs_dim: int, n_actions: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros(capacity, dtype=int)
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.next_mask = None if n_actions is None else np.ones((capacity, n_actions), dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        if t.s.shape != t.s_next.shape or t.s.shape != self.s.shape[1:]:
            raise ValueError("observation dimensions do not match the buffer")
        if not math.isfinite(t.r):
            raise ValueError("reward must be finite")
        i = self.cursor
        self.s[i] = t.s
        self.a[i] = t.a
        self.r[i] = t.r
        self.s_next[i] = t.s_next
        self.terminal[i] = t.terminal
        if self.next_mask is not None:
            self.next_mask[i] = True if t.next_mask is None else t.next_mask
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Indices of a uniform batch drawn without replacement."""
        return rng.choice(self.size, size=batch_size, replace=False)

    def batch(self, idx: np.ndarray):
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.terminal[idx]

    def masks(self, idx: np.ndarray) -> np.ndarray | None:
        return None if self.next_mask is None else self.next_mask[idx]

    def transitions(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self.size)]
        return [Transition(self.s[i].copy(), int(self.a[i]), float(self.r[i]),
                           self.s_next[i].copy(), bool(self.terminal[i]),
                           None if self.next_mask is None else self.next_mask[i].copy()) for i in order]


# ---------------------------------------------------------------------------
# policy pieces
# ---------------------------------------------------------------------------


def select_action(
    net: MLP, obs: np.ndarray, epsilon: float, rng: np.random.Generator, mask: np.ndarray | None = None
) -> int:
    """Epsilon-greedy: uniform random with probability epsilon, else argmax (lowest index on ties).

    With a boolean ``mask`` both branches choose among the allowed actions only.
    """
    if mask is None:
        if epsilon > 0 and rng.random() < epsilon:
            return int(rng.integers(net.n_outputs))
        return int(np.argmax(forward(net, obs)))
    allowed = np.flatnonzero(mask)
    if epsilon > 0 and rng.random() < epsilon:
        return int(allowed[rng.integers(len(allowed))])
    q = forward(net, obs)
    return int(allowed[np.argmax(q[allowed])])


def decay_epsilon(epsilon: float, config: AgentConfig) -> float:
    nxt = config.decay_rate * epsilon
    return nxt if nxt > config.epsilon_min else config.epsilon_min


def compute_targets(
    online: MLP,
    target: MLP,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    terminal: np.ndarray,
    gamma: float,
    single_q: bool = False,
    next_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Bootstrapped regression targets.

    Double-DQN: the online net picks ``a* = argmax Q_online(s', .)`` and the
    target net scores it. ``single_q`` uses ``max Q_target(s', .)`` instead.
    Terminal samples get the bare reward. ``next_mask`` restricts both the
    argmax and the max to the actions allowed in ``s'``.
    """
    if online.layer_sizes != target.layer_sizes:
        raise ArchitectureMismatch(f"{online.layer_sizes} vs {target.layer_sizes}")
    rewards = np.asarray(rewards, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    q_next = forward(target, next_obs)
    if next_mask is not None:
        q_next = np.where(next_mask, q_next, -np.inf)
    if single_q:
        boot = q_next.max(axis=1)
    else:
        q_online = forward(online, next_obs)
        if next_mask is not None:
            q_online = np.where(next_mask, q_online, -np.inf)
        a_star = np.argmax(q_online, axis=1)
        boot = q_next[np.arange(len(a_star)), a_star]
    return np.where(terminal, rewards, rewards + gamma * boot)


# ---------------------------------------------------------------------------
# agent state and learning
# ---------------------------------------------------------------------------


MIN_INPUT_SCALE = 0.002  # p.u. or rad


class Normalizer:
    """Fixed affine input scaling, estimated once from sample observations."""

    def __init__(self, offset: np.ndarray, scale: np.ndarray):
        self.offset = np.asarray(offset, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, samples: np.ndarray, min_scale: float = MIN_INPUT_SCALE) -> "Normalizer":
        offset = samples.mean(axis=0)
        # the floor stops features that barely move with dispatch (regulated voltages,
        # load-fed branches) from exploding when the operating point shifts
        scale = np.maximum(samples.std(axis=0), min_scale)
        return cls(offset, scale)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.offset) / self.scale


@dataclass
class LearnResult:
    skipped: bool
    loss: float = math.nan
    synced: bool = False


@dataclass
class Agent:
    config: AgentConfig
    online: MLP
    target: MLP
    optimizer: OptimizerState
    buffer: ReplayBuffer
    normalizer: Normalizer
    epsilon: float
    replay_rng: np.random.Generator
    learn_steps: int = 0

    @classmethod
    def create(cls, obs_dim: int, n_act: int, config: AgentConfig, seed: int,
               normalizer: Normalizer | None = None) -> "Agent":
        sizes = (obs_dim, *config.hidden, n_act)
        online = MLP.init(sizes, substream(seed, "network"))
        target = online.copy()
        return cls(
            config=config,
            online=online,
            target=target,
            optimizer=OptimizerState.for_net(online, config.optimizer, config.alpha),
            buffer=ReplayBuffer(config.memory_size, obs_dim, n_act),
            normalizer=normalizer or Normalizer.identity(obs_dim),
            epsilon=config.epsilon_start,
            replay_rng=substream(seed, "replay"),
        )

    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator,
            mask: np.ndarray | None = None) -> int:
        return select_action(self.online, self.normalizer(obs), epsilon, rng, mask)


def learn_step(agent: Agent) -> LearnResult:
    """One minibatch update of the online net; copies it to the target every sync period."""
    cfg = agent.config
    if len(agent.buffer) < cfg.batch_size:
        return LearnResult(skipped=True)
    idx = agent.buffer.sample(cfg.batch_size, agent.replay_rng)
    s, a, r, s2, term = agent.buffer.batch(idx)
    y = compute_targets(agent.online, agent.target, r, s2, term, cfg.gamma, cfg.single_q,
                        agent.buffer.masks(idx))
    grads = backward(agent.online, s, a, y)
    apply_update(agent.online, grads, agent.optimizer)
    agent.learn_steps += 1
    synced = agent.learn_steps % cfg.target_sync_period == 0
    if synced:
        copy_parameters(agent.online, agent.target)
    return LearnResult(skipped=False, loss=grads.loss, synced=synced)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

TRAIN_HEADER = ["episode", "step", "epsilon", "action", "reward", "cost", "reason"]


@dataclass
class EpisodeSummary:
    episode: int
    steps: int
    best_cost: float  # nan if no in-band converged state was reached
    best_so_far: float
    reason: str


@dataclass
class TrainResult:
    agent: Agent
    log: list[tuple] = field(default_factory=list)  # rows matching TRAIN_HEADER
    episodes: list[EpisodeSummary] = field(default_factory=list)
    best_cost: float = math.inf
    best_dispatch: np.ndarray | None = None
    total_steps: int = 0
    trace: list[StepOutcome] = field(default_factory=list)  # every training step, in order
    validation: list[tuple[int, float, float]] = field(default_factory=list)  # (episodes, cost, steps)
    selected: MLP | None = None  # best validated snapshot of the online net
    selected_episode: int | None = None

    @property
    def net(self) -> MLP:
        """The network to deploy: the best validated snapshot, or the final online net."""
        return self.selected if self.selected is not None else self.agent.online

    @property
    def net_is_final(self) -> bool:
        return self.selected is None or self.selected_episode == len(self.episodes)


def snapshot_statistics(
    case: NetworkCase, env_config: EnvConfig, seed: int, n: int = 256
) -> tuple[Normalizer, float, float]:
    """Observation scaling plus reward mean/std over random snapshots (uniform setpoints)."""
    rng = substream(seed, "init", 1)
    obs, rewards = [], []
    while len(obs) < n:
        try:
            state, o = E.reset(case, env_config, E.UNIFORM, rng)
        except E.SnapshotUnsolvable:
            continue
        obs.append(o)
        rewards.append(E.compute_reward(state.solution, state.cost, env_config)[0])
    r = np.array(rewards)
    return Normalizer.fit(np.array(obs)), float(r.mean()), float(max(r.std(), 1e-12))


NEAR_BEST = 1e-3  # relative band around a run's cheapest cost that counts as arrived


def steps_to_best(report: EvalReport, rel: float = NEAR_BEST) -> int:
    """Steps until a run first came within ``rel`` of its cheapest cost (0 if the start already was).

    Off-lattice starts keep shaving tiny amounts off the cost late in a run,
    so the exact minimum says little about how quickly the policy got there.
    """
    if report.init_cost <= report.best_cost * (1 + rel):
        return 0
    for k, out in enumerate(report.trajectory):
        if out.reason in (Reason.RUNNING, Reason.MAX_STEPS) and out.cost <= report.best_cost * (1 + rel):
            return k + 1
    return 0


def validation_score(net: MLP, case: NetworkCase, env_config: EnvConfig, normalizer: Normalizer,
                     seed: int, runs: int, steps: int) -> tuple[float, float]:
    """Mean cheapest cost reached by the greedy policy from fixed uniform starts,
    and the mean number of steps it took to get near it."""
    reps = [evaluate(net, case, env_config, EvalPolicy("budget"), seed=seed, init=E.UNIFORM,
                     max_eval_steps=steps, normalizer=normalizer, run=run, stream="validation")
            for run in range(runs)]
    return float(np.mean([r.best_cost for r in reps])), float(np.mean([steps_to_best(r) for r in reps]))


def better_validation(new: tuple[float, float], old: tuple[float, float] | None, tie: float) -> bool:
    """Lower mean cost wins; costs within a relative ``tie`` of each other go to fewer steps."""
    if old is None:
        return True
    if abs(new[0] - old[0]) <= tie * abs(old[0]):
        return new[1] < old[1]
    return new[0] < old[0]


def train(
    case: NetworkCase,
    env_config: EnvConfig,
    agent_config: AgentConfig,
    seed: int = 0,
) -> TrainResult:
    """Run ``max_train_episodes`` episodes of epsilon-greedy DDQN training on ``case``."""
    cfg = agent_config
    obs_dim = E.observation_size(case)
    n_act = E.n_actions(len(case.controllable))
    norm, r_mean, r_std = snapshot_statistics(case, env_config, seed)
    if not cfg.normalize_inputs:
        norm = None
    if not cfg.normalize_rewards:
        r_mean, r_std = 0.0, 1.0
    agent = Agent.create(obs_dim, n_act, cfg, seed, norm)
    result = TrainResult(agent)
    init_mode = InitMode.parse(cfg.train_init)
    init_rng = substream(seed, "init")
    explore_rng = substream(seed, "exploration")

    if cfg.potential_shaping:
        r_mean = 0.0  # shaped rewards are differences, so only the scale is normalised
    phi_scale = 1.0 / (1.0 - cfg.gamma) if cfg.potential_shaping and cfg.gamma < 1 else 0.0

    stale = 0
    env_steps = 0
    best_score = None
    for episode in range(cfg.max_train_episodes):
        state, obs = E.reset(case, env_config, init_mode, init_rng)
        s = agent.normalizer(obs)
        phi = phi_scale * E.compute_reward(state.solution, state.cost, env_config)[0]
        mask = E.action_mask(state) if env_config.mask_idle_actions else None
        ep_best = math.inf
        ep_best_pg = None
        while not state.terminal:
            a = select_action(agent.online, s, agent.epsilon, explore_rng, mask)
            out = E.step(state, a, env_config)
            next_mask = E.action_mask(state) if env_config.mask_idle_actions else None
            s2 = agent.normalizer(out.observation)
            # time-limit truncation is not a true terminal state: keep bootstrapping through it
            done = out.reason in (Reason.VOLTAGE_VIOLATION, Reason.DIVERGED)
            # potential-based shaping with phi(s) = R(s)/(1-gamma) and phi = 0 at terminal states
            phi2 = 0.0 if done else phi_scale * out.reward
            shaped = out.reward + cfg.gamma * phi2 - phi
            r = (shaped - r_mean) / r_std
            if cfg.reward_clip:
                r = min(max(r, -cfg.reward_clip), cfg.reward_clip)
            agent.buffer.push(Transition(s, a, r, s2, done, next_mask))
            phi = phi2
            result.trace.append(out)
            result.log.append((episode, state.step_count, agent.epsilon, a, out.reward, out.cost, out.reason.value))
            if out.reason in (Reason.RUNNING, Reason.MAX_STEPS) and out.cost < ep_best:
                ep_best = out.cost
                ep_best_pg = out.dispatch
            agent.epsilon = decay_epsilon(agent.epsilon, cfg)
            env_steps += 1
            if env_steps % cfg.learn_every == 0:
                learn_step(agent)
            s = s2
            mask = next_mask

        if ep_best < result.best_cost:
            result.best_cost = ep_best
            result.best_dispatch = ep_best_pg
            stale = 0
        else:
            stale += 1
        if cfg.stall_patience and stale >= cfg.stall_patience:
            agent.epsilon = max(agent.epsilon, cfg.stall_epsilon)
            stale = 0
        result.episodes.append(
            EpisodeSummary(episode, state.step_count, ep_best if math.isfinite(ep_best) else math.nan,
                           result.best_cost, state.reason.value)
        )
        done_eps = episode + 1
        if cfg.validation_every and (done_eps % cfg.validation_every == 0 or done_eps == cfg.max_train_episodes):
            score = validation_score(agent.online, case, env_config, agent.normalizer, seed,
                                     cfg.validation_runs, cfg.validation_steps)
            result.validation.append((done_eps, *score))
            if better_validation(score, best_score, cfg.validation_tie):
                best_score = score
                result.selected = agent.online.copy()
                result.selected_episode = done_eps
    result.total_steps = env_steps
    return result


def write_train_log(out: TextIO, rows: Sequence[tuple]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRAIN_HEADER)
    for ep, step, eps, a, r, cost, reason in rows:
        w.writerow([ep, step, f"{eps:.6f}", a, f"{r:.8f}", f"{cost:.6f}", reason])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    init_cost: float
    best_cost: float
    best_dispatch: np.ndarray
    steps: int
    stop_reason: str  # "benchmark", "budget" or the terminal Reason value
    trajectory: list[StepOutcome] = field(default_factory=list)


def evaluate(
    net: MLP,
    case: NetworkCase,
    env_config: EnvConfig,
    policy: EvalPolicy,
    seed: int = 0,
    init: InitMode = E.AS_GIVEN,
    max_eval_steps: int = 400,
    epsilon: float = 0.0,
    normalizer: Normalizer | None = None,
    run: int = 0,
    stream: str = "eval",
) -> EvalReport:
    """Run the trained policy from one snapshot under a stopping principle.

    ``benchmark`` stops at the first converged in-band state whose cost is at
    or below the reference; ``budget`` runs ``max_eval_steps`` steps and
    reports the cheapest in-band state visited (the start state included).
    """
    obs_dim = E.observation_size(case)
    n_act = E.n_actions(len(case.controllable))
    if net.layer_sizes[0] != obs_dim or net.layer_sizes[-1] != n_act:
        raise ArchitectureMismatch(
            f"network {net.layer_sizes} does not fit observation {obs_dim} / actions {n_act}"
        )
    norm = normalizer or Normalizer.identity(obs_dim)
    cfg = replace(env_config, max_episode_steps=max(max_eval_steps, 1))
    state, obs = E.reset(case, cfg, init, substream(seed, stream, run))
    rng = substream(seed, "exploration", 1, run)

    init_cost = state.cost
    best_cost = init_cost if E.in_band(state.solution, cfg) else math.inf
    best_pg = state.solution.pg.copy()
    trajectory: list[StepOutcome] = []
    stop = "budget"
    while len(trajectory) < max_eval_steps:
        mask = E.action_mask(state) if cfg.mask_idle_actions else None
        a = select_action(net, norm(obs), epsilon, rng, mask)
        out = E.step(state, a, cfg)
        trajectory.append(out)
        obs = out.observation
        ok = out.reason in (Reason.RUNNING, Reason.MAX_STEPS)
        if ok and out.cost < best_cost:
            best_cost = out.cost
            best_pg = out.dispatch.copy()
        if policy.mode == "benchmark" and ok and out.cost <= policy.reference_cost:
            stop = "benchmark"
            break
        if out.reason in (Reason.VOLTAGE_VIOLATION, Reason.DIVERGED):
            stop = out.reason.value
            break
    return EvalReport(init_cost, best_cost, best_pg, len(trajectory), stop, trajectory)


EVAL_HEADER = ["run", "seed", "init_cost", "best_cost", "steps", "stop_reason"]


def write_eval_report(out: TextIO, rows: Sequence[tuple[int, int, EvalReport]]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(EVAL_HEADER)
    for run, seed, rep in rows:
        w.writerow([run, seed, f"{rep.init_cost:.6f}", f"{rep.best_cost:.6f}", rep.steps, rep.stop_reason])
