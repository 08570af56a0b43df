"""Command-line entry point: generate, train, evaluate, sensitivity, benchmark.

Exit codes: 0 success, 2 validation error, 3 solver error, 4 I/O error.
Outputs are byte-identical for repeated runs with the same seed; wall-clock
columns are only filled when ``--timing`` is given.
"""

from __future__ import annotations

import argparse
import io
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DrayageError, InfeasibilityError, Instance, StructuralError, ValidationError
from .evaluation import RegretEvaluator, bias_and_ci, evaluate_policy, sensitivity_run
from .instancegen import PracticalSpec, gen_practical_instance, gen_small_instance
from .lpsolve import SolverError
from .scenario import (
    CopulaSpec,
    FlowModel,
    IntensityModel,
    RandomStream,
    ScenarioLattice,
    build_lattice,
    simulate_scenarios,
)
from .sddp import (
    AdaptiveRegret,
    BoundStall,
    IterationLimit,
    SimulationGap,
    TrainOptions,
    train,
)
from .serialize import (
    FORMAT_VERSION,
    UNITS,
    dumps,
    instance_hash,
    load_instance,
    load_policy,
    read_json,
    save_instance,
    save_policy,
    stats_table,
)

SEED_ENV = "DRAYAGE_SDDP_SEED"
EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
RULES = ("iterations", "bound-stall", "simulation-gap", "adaptive-regret")


@dataclass(frozen=True)
class RunConfig:
    """Validated parameters of one command invocation."""

    command: str
    seed: int
    workers: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")

    @classmethod
    def from_dict(cls, command: str, data: dict, allowed) -> "RunConfig":
        unknown = set(data) - set(allowed) - {"seed", "workers"}
        if unknown:
            raise ValidationError(f"unknown config field(s) for {command}: {', '.join(sorted(unknown))}")
        params = {k: v for k, v in data.items() if k not in ("seed", "workers")}
        return cls(command, int(data.get("seed", 0)), int(data.get("workers", 1)), params)

    def __getitem__(self, key):
        return self.params[key]


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV}={raw!r} is not an integer") from None


# --- shared pieces ------------------------------------------------------------

def _flow_model(instance: Instance, cfg: RunConfig) -> FlowModel:
    dim = instance.n_entry + instance.n_exit
    rate = instance.flow_rate if cfg.params.get("rate") is None else float(cfg["rate"])
    a = float(cfg.params.get("intensity_feedback", 0.0) or 0.0)
    b = float(cfg.params.get("count_feedback", 0.0) or 0.0)
    # base chosen so the stationary intensity equals ``rate``
    intensity = IntensityModel(np.full(dim, rate * (1.0 - a - b)), np.full(dim, a), np.full(dim, b))
    return FlowModel(intensity, CopulaSpec.equicorrelated(dim, float(cfg["rho"])))


def _lattice(instance: Instance, cfg: RunConfig, stream: RandomStream) -> ScenarioLattice:
    if cfg["lattice"] == "nominal":
        if instance.nominal is None:
            raise ValidationError("--lattice nominal needs an instance with a nominal scenario")
        return ScenarioLattice.deterministic(instance.nominal)
    return build_lattice(instance, _flow_model(instance, cfg), None, int(cfg["lattice_size"]), stream.child("lattice"))


def _rule(cfg: RunConfig):
    name = cfg["rule"]
    if name == "iterations":
        return IterationLimit(int(cfg["iterations"]))
    if name == "bound-stall":
        return BoundStall(int(cfg["window"]), float(cfg["tolerance"]))
    if name == "simulation-gap":
        return SimulationGap(float(cfg["confidence"]), float(cfg["gap"]))
    if name == "adaptive-regret":
        return AdaptiveRegret(int(cfg["period"]), int(cfg["regret_scenarios"]), float(cfg["delta"]))
    raise ValidationError(f"unknown rule {name!r}; choose from {', '.join(RULES)}")


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


# --- commands -------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out=sys.stdout) -> int:
    stream = RandomStream(cfg.seed, ("instance",))
    if cfg.params.get("spec"):
        spec = PracticalSpec.from_dict(read_json(cfg["spec"]))
        instance = gen_practical_instance(spec, stream)
    elif cfg["kind"] == "small":
        instance = gen_small_instance(stream, horizon=int(cfg["horizon"]))
    elif cfg["kind"] == "practical":
        instance = gen_practical_instance(PracticalSpec(), stream)
    elif cfg["kind"] == "downsized":
        instance = gen_practical_instance(PracticalSpec.downsized(), stream)
    else:
        raise ValidationError(f"unknown instance kind {cfg['kind']!r}")
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_instance(instance, cfg["out"])
    issues = instance.meta.get("recourse_issues") or []
    out.write(f"instance {instance.name}: {instance.n_entry}x{instance.n_exit} hubs, {instance.n_carriers} carriers, "
              f"{instance.horizon} stages, hash {instance_hash(instance)}\n")
    for issue in issues:
        out.write(f"warning: {issue}\n")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out=sys.stdout) -> int:
    instance = load_instance(cfg["instance"])
    stream = RandomStream(cfg.seed)
    lattice = _lattice(instance, cfg, stream)
    rule = _rule(cfg)
    evaluator = None
    if isinstance(rule, AdaptiveRegret):
        scenarios = simulate_scenarios(instance, _flow_model(instance, cfg), None, rule.scenarios, stream.child("regret"))
        evaluator = RegretEvaluator(instance, scenarios, cfg.workers)
    options = TrainOptions(
        batch_size=int(cfg["batch_size"]), max_iterations=int(cfg["max_iterations"]), workers=cfg.workers,
        window_fraction=float(cfg["window_fraction"]), confidence=float(cfg["confidence"]), evaluator=evaluator,
    )
    policy, stats = train(instance, lattice, rule, stream.child("train"), options)
    policy.metadata["lattice"] = cfg["lattice"]
    policy.metadata["lattice_size"] = lattice.size(1)
    policy.metadata["regret_trace"] = [[k, v] for k, v in stats.regret_trace]
    save_policy(policy, instance, cfg["out"])
    stats_path = cfg.params.get("stats") or str(Path(cfg["out"]).with_suffix(".stats.csv"))
    _write(stats_path, stats_table(stats, float(cfg["confidence"]), bool(cfg.params.get("timing"))))
    line = f"iterations {stats.iterations}, lower bound {policy.first_stage_bound!r}, stop: {stats.stop_reason}"
    if stats.forward_sample().size >= 2:
        bias, ci = bias_and_ci(stats, float(cfg["confidence"]))
        line += f", bias {bias:.6g}%, ci ratio {ci:.6g}%"
    out.write(line + "\n")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out=sys.stdout) -> int:
    instance = load_instance(cfg["instance"])
    policy = load_policy(cfg["policy"], instance)
    stream = RandomStream(cfg.seed, ("evaluate",))
    count = int(cfg["scenarios"])
    if count < 1:
        raise ValidationError("--scenarios must be at least 1")
    scenarios = simulate_scenarios(instance, _flow_model(instance, cfg), None, count, stream)
    provenance = [stream.child("scenario", m).describe() for m in range(count)]
    report = evaluate_policy(instance, policy, scenarios, provenance, cfg.workers)
    if float(cfg.params.get("intensity_feedback") or 0.0) or float(cfg.params.get("count_feedback") or 0.0):
        report.notes.append("out-of-bag flows follow the autoregressive intensity recursion; training used stationary intensities")
    summary = {
        "format_version": FORMAT_VERSION,
        "kind": "evaluation",
        "units": UNITS,
        "instance_hash": instance_hash(instance),
        "seed": cfg.seed,
        "policy_seed": policy.metadata.get("seed"),
        "first_stage_bound": policy.first_stage_bound,
        **report.summary_dict(),
    }
    if cfg.params.get("timing"):
        summary["wall_seconds"] = report.wall_times
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(dumps(summary))
    (out_dir / "scenarios.csv").write_text(report.scenario_table())
    out.write(f"scenarios {count}, mean regret {report.regret.mean!r}, "
              f"min regret {float(np.nanmin(report.regret.values))!r}\n")
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig, out=sys.stdout) -> int:
    instance = load_instance(cfg["instance"])
    dimension = {"spot": "spot_rate"}.get(cfg["dimension"], cfg["dimension"])
    default = instance.flow_range if dimension == "inflow" else instance.spot_rate_range
    lo = default[0] if cfg.params.get("low") is None else float(cfg["low"])
    hi = default[1] if cfg.params.get("high") is None else float(cfg["high"])
    if lo > hi:
        raise ValidationError("--low must not exceed --high")
    sample = sensitivity_run(instance, dimension, int(cfg["replications"]), RandomStream(cfg.seed), (lo, hi), cfg.workers)
    _write(cfg["out"], sample.table())
    summary = {
        "format_version": FORMAT_VERSION,
        "kind": "sensitivity",
        "units": UNITS,
        "instance_hash": instance_hash(instance),
        "seed": cfg.seed,
        "dimension": dimension,
        "bounds": [lo, hi],
        "replications": int(sample.values.size),
        "mean": sample.mean,
        "std": sample.std,
        "quantiles": {str(q): v for q, v in sample.quantiles.items()},
    }
    if cfg.params.get("summary"):
        _write(cfg["summary"], dumps(summary))
    out.write(f"{dimension}: mean {sample.mean!r}, std {sample.std!r}\n")
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig, out=sys.stdout) -> int:
    instance = load_instance(cfg["instance"])
    try:
        budgets = sorted({int(b) for b in str(cfg["budgets"]).split(",") if b.strip()})
    except ValueError:
        raise ValidationError(f"--budgets must be a comma-separated list of integers, got {cfg['budgets']!r}") from None
    if not budgets or budgets[0] < 2:
        raise ValidationError("--budgets needs iteration counts of at least 2")
    stream = RandomStream(cfg.seed)
    lattice = _lattice(instance, cfg, stream)
    samples = int(cfg["checkpoint_samples"])
    if samples < 2:
        raise ValidationError("--checkpoint-samples must be at least 2")
    options = TrainOptions(workers=cfg.workers, window_fraction=float(cfg["window_fraction"]),
                           confidence=float(cfg["confidence"]), checkpoint_iterations=tuple(budgets),
                           checkpoint_samples=samples)
    _, stats = train(instance, lattice, IterationLimit(budgets[-1]), stream.child("train"), options)
    timing = bool(cfg.params.get("timing"))
    buf = io.StringIO()
    buf.write("budget,lower_bound,upper_mean,ci_low,ci_high,bias_percent,ci_ratio_percent,solver_calls,wall_s\n")
    for b in budgets:
        cp = stats.checkpoint(b, float(cfg["confidence"]))
        row = [str(b), _fmt(cp.lower_bound), _fmt(cp.upper_mean), _fmt(cp.ci_low), _fmt(cp.ci_high),
               _fmt(cp.bias_percent), _fmt(cp.ci_ratio_percent), str(cp.solver_calls),
               _fmt(cp.wall_time) if timing else ""]
        buf.write(",".join(row) + "\n")
        out.write(f"budget {b}: bias {cp.bias_percent:.4g}%, ci ratio {cp.ci_ratio_percent:.4g}%\n")
    _write(cfg["out"], buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sensitivity": cmd_sensitivity,
    "benchmark": cmd_benchmark,
}


# --- argument parsing -----------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--workers", type=int, default=1, help="threads for independent LP solves")
    p.add_argument("--config", help="JSON file with default values for this command's options")


def _add_flow(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=float, default=0.3, help="copula correlation between flow dimensions")
    p.add_argument("--rate", type=float, default=None, help="Poisson intensity (default: midpoint of the flow range)")


def _add_lattice(p: argparse.ArgumentParser) -> None:
    _add_flow(p)
    p.add_argument("--lattice", choices=("sampled", "nominal"), default="sampled",
                   help="sampled stagewise-independent lattice or the instance's nominal scenario")
    p.add_argument("--lattice-size", type=int, default=20, help="realizations per stage")
    p.add_argument("--window-fraction", type=float, default=0.5,
                   help="trailing share of forward passes behind the simulated upper bound")
    p.add_argument("--confidence", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drayage-sddp", description="Multistage drayage allocation with SDDP.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a generated instance file")
    _add_common(p)
    p.add_argument("--kind", choices=("small", "practical", "downsized"), default="small")
    p.add_argument("--spec", help="JSON practical-family spec (overrides --kind)")
    p.add_argument("--horizon", type=int, default=12, help="stages of the small instance")
    p.add_argument("--out", required=False, default="instance.json")

    p = sub.add_parser("train", help="train a policy and write it with a per-iteration table")
    _add_common(p)
    _add_lattice(p)
    p.add_argument("--instance", required=False)
    p.add_argument("--out", default="policy.json")
    p.add_argument("--stats", help="stats table path (default: <out>.stats.csv)")
    p.add_argument("--rule", choices=RULES, default="iterations")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--gap", type=float, default=0.01)
    p.add_argument("--period", type=int, default=25)
    p.add_argument("--regret-scenarios", type=int, default=100)
    p.add_argument("--delta", type=float, default=0.002)
    p.add_argument("--max-iterations", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column")

    p = sub.add_parser("evaluate", help="regret of a policy on out-of-bag scenarios")
    _add_common(p)
    _add_flow(p)
    p.add_argument("--instance", required=False)
    p.add_argument("--policy", required=False)
    p.add_argument("--scenarios", type=int, default=1000)
    p.add_argument("--intensity-feedback", type=float, default=0.0)
    p.add_argument("--count-feedback", type=float, default=0.0)
    p.add_argument("--out-dir", default="evaluation")
    p.add_argument("--timing", action="store_true")

    p = sub.add_parser("sensitivity", help="deterministic optimum under resampled inflows or spot rates")
    _add_common(p)
    p.add_argument("--instance", required=False)
    p.add_argument("--dimension", choices=("inflow", "spot", "spot_rate"), default="inflow")
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--low", type=float, default=None)
    p.add_argument("--high", type=float, default=None)
    p.add_argument("--out", default="sensitivity.csv")
    p.add_argument("--summary", help="optional JSON summary path")

    p = sub.add_parser("benchmark", help="bias, CI ratio and time across iteration budgets")
    _add_common(p)
    _add_lattice(p)
    p.add_argument("--instance", required=False)
    p.add_argument("--budgets", default="50,100,150")
    p.add_argument("--checkpoint-samples", type=int, default=100,
                   help="simulated paths per budget, shared across budgets")
    p.add_argument("--out", default="benchmark.csv")
    p.add_argument("--timing", action="store_true", help="fill the wall_s column")
    return parser


_REQUIRED = {
    "train": ("instance",),
    "evaluate": ("instance", "policy"),
    "sensitivity": ("instance",),
    "benchmark": ("instance",),
    "generate": (),
}


def parse_config(argv) -> RunConfig:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    allowed = {a.dest for a in sub._actions if a.dest not in ("help", "config")}
    values = vars(args).copy()
    values.pop("command")
    config_path = values.pop("config", None)
    if config_path:
        data = read_json(config_path)
        if not isinstance(data, dict):
            raise ValidationError(f"{config_path}: config must be a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = set(data) - allowed
        if unknown:
            raise ValidationError(f"{config_path}: unknown config field(s): {', '.join(sorted(unknown))}")
        sub.set_defaults(**data)
        values = vars(parser.parse_args(argv)).copy()
        values.pop("command")
        values.pop("config", None)
    if values.get("seed") is None:
        values["seed"] = _default_seed()
    for name in _REQUIRED[args.command]:
        if not values.get(name):
            raise ValidationError(f"--{name.replace('_', '-')} is required for {args.command}")
    return RunConfig.from_dict(args.command, values, allowed)


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        return COMMANDS[cfg.command](cfg, sys.stdout)
    except (ValidationError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, InfeasibilityError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DrayageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
