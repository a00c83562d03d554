"""Command-line entry point: ``oapd {pf,train,eval,oracle,repro}``.

Exit codes: 0 success, 1 unexpected error, 2 bad input (case file or config),
3 power flow did not converge, 4 initial snapshot unsolvable, 5 checkpoint
does not fit the case, 6 no feasible dispatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import agent as A
from . import env as E
from .network import CaseParseError, CaseValidationError, NetworkCase, bundled_path, load_case
from .neural import ArchitectureMismatch, load_checkpoint, save_checkpoint
from .oracle import NoFeasiblePoint, OracleConfig, coordinate_descent, write_oracle_row
from .powerflow import SolverConfig, branch_table, bus_table, solve, summary_text

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INPUT = 2
EXIT_NO_CONVERGENCE = 3
EXIT_UNSOLVABLE = 4
EXIT_ARCHITECTURE = 5
EXIT_INFEASIBLE = 6

CONFIG_VERSION = 1
STUDY_II_FACTORS = (0.8, 0.9, 1.1, 1.2)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; serialised as JSON with a ``version`` key."""

    version: int = CONFIG_VERSION
    # paths and global seed ("" means the bundled 14-bus case)
    case: str = ""
    costs: str = ""
    checkpoint: str = ""
    out: str = "out"
    run_name: str = ""
    seed: int = 0
    # power flow
    tolerance: float = 1e-9  # tighter than the solver default so pf reports meet 1e-9
    max_iterations: int = 30
    enforce_q_limits: bool = True
    flat_start: bool = False
    # environment
    delta_p: float = 0.5
    v_lo: float = 0.95
    v_hi: float = 1.05
    r_p: float = 1.0
    r_n: float = 5.0
    r_e: float = 10.0
    beta: float = 0.02
    max_episode_steps: int = 100
    enforce_slack_limits: bool = True
    mask_idle_actions: bool = True
    # agent
    gamma: float = 0.95
    alpha: float = 0.001
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    decay_rate: float = 0.999
    batch_size: int = 200
    memory_size: int = 2000
    target_sync_period: int = 1000
    learn_every: int = 1
    max_train_episodes: int = 300
    max_eval_steps: int = 400
    stall_patience: int = 0
    stall_epsilon: float = 0.3
    hidden: tuple[int, ...] = (128, 64)
    optimizer: str = "adam"
    single_q: bool = False
    normalize_inputs: bool = True
    normalize_rewards: bool = True
    potential_shaping: bool = True
    reward_clip: float = 10.0
    validation_every: int = 10
    validation_runs: int = 8
    validation_steps: int = 300
    validation_tie: float = 1e-4
    train_init: str = "uniform"
    eval_epsilon: float = 0.0
    # evaluation
    eval_runs: int = 45
    eval_policy: str = "benchmark"
    eval_init: str = "uniform"
    load_factor: float = 1.0
    reference_cost: float | None = None  # None: use the oracle cost
    benchmark_tolerance: float = 0.001  # relative slack on the benchmark stopping cost
    # oracle
    restarts: int = 10
    max_sweeps: int = 1000
    respect_voltage_band: bool = True

    def __post_init__(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.eval_policy not in ("benchmark", "budget"):
            raise ConfigError(f"eval_policy must be benchmark or budget, not {self.eval_policy!r}")
        if self.eval_runs < 0:
            raise ConfigError("eval_runs must be non-negative")
        if not self.load_factor > 0:
            raise ConfigError("load_factor must be positive")
        if self.benchmark_tolerance < 0:
            raise ConfigError("benchmark_tolerance must be non-negative")
        try:
            self.solver(), self.env(), self.agent(), self.oracle()
            E.InitMode.parse(self.eval_init)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def _pick(self, cls):
        names = {f.name for f in dataclasses.fields(cls)}
        return {k: v for k, v in dataclasses.asdict(self).items() if k in names}

    def solver(self) -> SolverConfig:
        return SolverConfig(**self._pick(SolverConfig))

    def env(self) -> E.EnvConfig:
        kw = self._pick(E.EnvConfig)
        kw.pop("solver_config", None)
        return E.EnvConfig(solver_config=self.solver(), **kw)

    def agent(self) -> A.AgentConfig:
        kw = self._pick(A.AgentConfig)
        kw["hidden"] = tuple(kw["hidden"])
        return A.AgentConfig(**kw)

    def oracle(self) -> OracleConfig:
        return OracleConfig(delta_p=self.delta_p, restarts=self.restarts, max_sweeps=self.max_sweeps,
                            seed=self.seed, respect_voltage_band=self.respect_voltage_band)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        if "version" not in data:
            raise ConfigError("config lacks a version field")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _load_case(cfg: RunConfig) -> NetworkCase:
    path = cfg.case or bundled_path("ieee14.case")
    case = load_case(path, cfg.costs or None)
    if cfg.load_factor != 1.0:
        case = E.inertia_redispatch(case, cfg.load_factor)
    return case


def _run_dir(cfg: RunConfig, default: str) -> Path:
    d = Path(cfg.out) / (cfg.run_name or default)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.effective").write_text(cfg.to_json(), encoding="utf-8")
    return d


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv(fn, *args) -> str:
    buf = io.StringIO()
    fn(buf, *args)
    return buf.getvalue()


def _checkpoint_bytes(res: A.TrainResult) -> bytes:
    buf = io.BytesIO()
    norm = res.agent.normalizer
    # optimiser moments belong to the final online net, so they are only saved alongside it
    opt = res.agent.optimizer if res.net_is_final else None
    save_checkpoint(buf, res.net, opt, (norm.offset, norm.scale))
    return buf.getvalue()


def _train(cfg: RunConfig, case: NetworkCase, run_dir: Path) -> A.TrainResult:
    res = A.train(case, cfg.env(), cfg.agent(), cfg.seed)
    (run_dir / "checkpoint.bin").write_bytes(_checkpoint_bytes(res))
    _write(run_dir / "train.csv", _csv(A.write_train_log, res.log))
    _write(run_dir / "cost_profile.csv", _csv(E.write_trace, res.trace, case.n_gen))
    return res


def _gap(cost: float, ref: float) -> float:
    return (cost / ref - 1.0) if math.isfinite(cost) else math.inf


def _eval_summary(reports: Sequence[A.EvalReport], ref: float) -> list[str]:
    gaps = np.array([_gap(r.best_cost, ref) for r in reports])
    steps = np.array([r.steps for r in reports])
    n = len(reports)
    lines = [f"runs               {n}", f"reference_cost     {ref:.6f}"]
    for tol in (0.001, 0.005, 0.02):
        frac = float(np.mean(gaps <= tol)) if n else math.nan
        lines.append(f"{'within_%g%%' % (tol * 100):<19}{frac:.4f}")
    lines.append(f"mean_steps         {float(steps.mean()) if n else math.nan:.2f}")
    return lines


def _run_evals(cfg: RunConfig, net, normalizer, case: NetworkCase, ref: float,
               init: E.InitMode, runs: int) -> list[A.EvalReport]:
    if cfg.eval_policy == "benchmark":
        policy = A.EvalPolicy("benchmark", ref * (1.0 + cfg.benchmark_tolerance))
    else:
        policy = A.EvalPolicy("budget")
    return [
        A.evaluate(net, case, cfg.env(), policy, seed=cfg.seed, init=init,
                   max_eval_steps=cfg.max_eval_steps, epsilon=cfg.eval_epsilon,
                   normalizer=normalizer, run=k)
        for k in range(runs)
    ]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_pf(cfg: RunConfig) -> int:
    case = _load_case(cfg)
    sol = solve(case, cfg.solver())
    d = _run_dir(cfg, "pf")
    _write(d / "bus.csv", bus_table(case, sol))
    _write(d / "branch.csv", branch_table(case, sol))
    _write(d / "summary.txt", summary_text(case, sol))
    print(f"converged={str(sol.converged).lower()} iterations={sol.iterations} "
          f"max_mismatch={sol.max_mismatch:.3e}")
    return EXIT_OK if sol.converged else EXIT_NO_CONVERGENCE


def cmd_train(cfg: RunConfig) -> int:
    case = _load_case(cfg)
    d = _run_dir(cfg, "train")
    res = _train(cfg, case, d)
    lines = [
        f"episodes           {len(res.episodes)}",
        f"env_steps          {res.total_steps}",
        f"final_epsilon      {res.agent.epsilon:.6f}",
        f"best_cost          {res.best_cost:.6f}",
    ]
    if res.best_dispatch is not None:
        lines.append("best_dispatch      " + " ".join(f"{p:.4f}" for p in res.best_dispatch))
    if res.selected_episode is not None:
        lines.append(f"selected_episode   {res.selected_episode}")
        lines.append("validation         " + " ".join(f"{e}:{v:.6f}/{n:.1f}" for e, v, n in res.validation))
    _write(d / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _oracle_cost(cfg: RunConfig, case: NetworkCase):
    return coordinate_descent(case, cfg.env(), cfg.oracle())


def cmd_oracle(cfg: RunConfig) -> int:
    case = _load_case(cfg)
    d = _run_dir(cfg, "oracle")
    res = _oracle_cost(cfg, case)
    _write(d / "oracle.csv", _csv(write_oracle_row, res))
    print(f"cost={res.cost:.6f} dispatch=" + ",".join(f"{p:.4f}" for p in res.dispatch))
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval needs a checkpoint (--checkpoint or the config's checkpoint key)")
    ckpt = load_checkpoint(Path(cfg.checkpoint).read_bytes())
    case = _load_case(cfg)
    n_obs, n_act = E.observation_size(case), E.n_actions(len(case.controllable))
    if ckpt.net.n_inputs != n_obs or ckpt.net.n_outputs != n_act:
        raise ArchitectureMismatch(
            f"checkpoint {ckpt.net.layer_sizes} does not fit observation {n_obs} / actions {n_act}")
    norm = A.Normalizer(*ckpt.normalizer) if ckpt.normalizer else None
    d = _run_dir(cfg, "eval")
    ref = cfg.reference_cost if cfg.reference_cost is not None else _oracle_cost(cfg, case).cost
    reports = _run_evals(cfg, ckpt.net, norm, case, ref, E.InitMode.parse(cfg.eval_init), cfg.eval_runs)
    _write(d / "eval.csv", _csv(A.write_eval_report, [(k, cfg.seed, r) for k, r in enumerate(reports)]))
    lines = [f"load_factor        {cfg.load_factor:g}", f"eval_policy        {cfg.eval_policy}"]
    lines += _eval_summary(reports, ref)
    _write(d / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _study_i(cfg: RunConfig) -> int:
    case = _load_case(cfg)
    d = _run_dir(cfg, "study_I")
    res = _train(cfg, case, d)
    orc = _oracle_cost(cfg, case)
    _write(d / "oracle.csv", _csv(write_oracle_row, orc))
    reports = _run_evals(cfg, res.net, res.agent.normalizer, case, orc.cost,
                         E.InitMode.parse(cfg.eval_init), cfg.eval_runs)
    _write(d / "eval.csv", _csv(A.write_eval_report, [(k, cfg.seed, r) for k, r in enumerate(reports)]))

    gaps = np.array([_gap(r.best_cost, orc.cost) for r in reports])
    bins = [("optimal (<=0.1%)", gaps <= 0.001), ("near (0.1-0.5%]", (gaps > 0.001) & (gaps <= 0.005)),
            ("fair (0.5-2%]", (gaps > 0.005) & (gaps <= 0.02)), ("poor (>2%)", gaps > 0.02)]
    lines = [
        "study I: base load, uniform random initial dispatch",
        f"train_episodes     {len(res.episodes)}",
        f"train_env_steps    {res.total_steps}",
        f"train_best_cost    {res.best_cost:.6f}",
        f"oracle_cost        {orc.cost:.6f}",
        f"train_gap_pct      {100 * _gap(res.best_cost, orc.cost):.4f}",
        f"eval_policy        {cfg.eval_policy}",
    ]
    lines += _eval_summary(reports, orc.cost)
    lines.append("pattern,count,mean_cost,mean_steps")
    for name, mask in bins:
        sel = [r for r, m in zip(reports, mask) if m]
        mc = np.mean([r.best_cost for r in sel]) if sel else math.nan
        ms = np.mean([r.steps for r in sel]) if sel else math.nan
        lines.append(f"{name},{len(sel)},{mc:.6f},{ms:.2f}")
    _write(d / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _study_ii(cfg: RunConfig) -> int:
    base = dataclasses.replace(cfg, load_factor=1.0)
    case = _load_case(base)
    d = _run_dir(cfg, "study_II")
    if cfg.checkpoint:
        ckpt = load_checkpoint(Path(cfg.checkpoint).read_bytes())
        net = ckpt.net
        norm = A.Normalizer(*ckpt.normalizer) if ckpt.normalizer else None
    else:
        res = _train(base, case, d)
        net, norm = res.net, res.agent.normalizer
    budget = dataclasses.replace(cfg, eval_policy="budget")
    rows, eval_rows = [], []
    for k, factor in enumerate(STUDY_II_FACTORS):
        fcase = E.inertia_redispatch(case, factor)
        orc = _oracle_cost(cfg, fcase)
        (rep,) = _run_evals(budget, net, norm, fcase, orc.cost, E.AS_GIVEN, 1)
        eval_rows.append((k, cfg.seed, rep))
        rows.append((factor, fcase.total_pd, orc.cost, rep.init_cost, rep.best_cost, 100 * _gap(rep.best_cost, orc.cost)))
    _write(d / "eval.csv", _csv(A.write_eval_report, eval_rows))
    lines = ["load_factor,load_mw,oracle_cost,init_cost,drl_cost,gap_pct"]
    lines += [f"{f:g},{mw:.2f},{oc:.6f},{ic:.6f},{dc:.6f},{g:.4f}" for f, mw, oc, ic, dc, g in rows]
    _write(d / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_repro(cfg: RunConfig, study: str) -> int:
    return _study_i(cfg) if study == "I" else _study_ii(cfg)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--case", help="case file (.case native or .raw PSS/E v26)")
    common.add_argument("--costs", help="sidecar cost file: <gen index> <a> <b> per line")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output root directory")
    common.add_argument("--run-name", help="subdirectory of --out for this run")
    common.add_argument("--load-factor", type=float, help="scale load and redispatch by inertia")
    common.add_argument("--paper-env", action="store_true", help="loose 2e-3 p.u. power-flow tolerance")

    learn = argparse.ArgumentParser(add_help=False)
    learn.add_argument("--episodes", type=int, help="training episodes")
    learn.add_argument("--single-q", action="store_true", help="single-network max-form target")

    evals = argparse.ArgumentParser(add_help=False)
    evals.add_argument("--runs", type=int, help="number of evaluation runs")
    evals.add_argument("--eval-policy", choices=("benchmark", "budget"))
    evals.add_argument("--checkpoint", help="checkpoint file")
    evals.add_argument("--reference-cost", type=float, help="benchmark cost, k$/hr (default: oracle)")
    evals.add_argument("--init", dest="eval_init", help="as_given | uniform | perturbed:<sigma>")

    p = argparse.ArgumentParser(prog="oapd", description="Optimal active power dispatch with DDQN.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pf", parents=[common], help="solve the AC power flow")
    sub.add_parser("train", parents=[common, learn], help="train the DDQN agent")
    sub.add_parser("eval", parents=[common, evals], help="evaluate a trained checkpoint")
    sub.add_parser("oracle", parents=[common], help="lattice reference dispatch")
    rp = sub.add_parser("repro", parents=[common, learn, evals], help="run a case study end to end")
    rp.add_argument("study", choices=("I", "II"))
    return p


_FLAG_KEYS = {
    "case": "case", "costs": "costs", "seed": "seed", "out": "out", "run_name": "run_name",
    "load_factor": "load_factor", "episodes": "max_train_episodes", "runs": "eval_runs",
    "eval_policy": "eval_policy", "checkpoint": "checkpoint", "reference_cost": "reference_cost",
    "eval_init": "eval_init",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) overridden by explicit command-line flags."""
    cfg = RunConfig.from_json(Path(args.config).read_text(encoding="utf-8")) if args.config else RunConfig()
    overrides = {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "single_q", False):
        overrides["single_q"] = True
    if args.paper_env:
        overrides["tolerance"] = SolverConfig.paper_env().tolerance
    return dataclasses.replace(cfg, **overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "pf":
            return cmd_pf(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg)
        return cmd_repro(cfg, args.study)
    except (CaseParseError, CaseValidationError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except E.SnapshotUnsolvable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSOLVABLE
    except ArchitectureMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARCHITECTURE
    except NoFeasiblePoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
