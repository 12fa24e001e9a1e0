"""Experiment harness: comparison sweeps, performance profiles, traces.

Everything here reduces to repeated calls into the solver with different
policies, then bookkeeping. Wall-clock rows are reported for information
only; anything gated in tests runs with deterministic timing so iteration
counts stand in for time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, is_dataclass

import numpy as np

from .policy import AgentPolicy, DampingPolicy, make_policy
from .scene import BAProblem, generate_synthetic
from .solver import SolveResult, solve

SUITE_PIXEL_SIGMA = 250.0
SUITE_NOISE_STD = 0.5
TRAIN_SEEDS = tuple(range(10))
HOLDOUT_SEEDS = tuple(range(100, 110))
DEFAULT_TOLERANCES = (0.1, 0.001)
ABLATION_WINDOWS = (1, 5, 10, 20)
ABLATION_REWARDS = ("duration", "constant", "reduction")


def suite_scene(seed: int, num_cameras: int = 10, num_points: int = 10) -> BAProblem:
    """Canonical benchmark scene family shared by training and held-out sets.

    The heavy pixel normalization (sigma 250 on a focal-500 rig) scales the
    effective damping far down, which separates damping policies sharply:
    aggressive near-Newton steps converge in a handful of iterations while
    the factor-of-two heuristic crawls.
    """
    return generate_synthetic(
        num_cameras,
        num_points,
        pixel_sigma=SUITE_PIXEL_SIGMA,
        noise_std=SUITE_NOISE_STD,
        seed=seed,
    )


@dataclass(frozen=True)
class RunRecord:
    problem_id: str
    policy_kind: str
    seed: int
    outcome: str
    iterations: int
    total_time_s: float
    initial_error: float
    final_error: float
    trace: tuple = ()  # (lambda, error, duration_s) per iteration

    @classmethod
    def from_result(cls, problem_id: str, policy_kind: str, seed: int, result: SolveResult):
        return cls(
            problem_id=problem_id,
            policy_kind=policy_kind,
            seed=seed,
            outcome=result.outcome,
            iterations=result.iterations,
            total_time_s=result.total_time_s,
            initial_error=result.initial_error,
            final_error=result.final_error,
            trace=tuple((r.lam, r.error, r.duration_s) for r in result.records),
        )


@dataclass(frozen=True)
class ProfilePoint:
    relative_time: float  # alpha >= 1
    solved_fraction: float  # in [0, 1], nondecreasing along a curve


@dataclass
class ComparisonTable:
    records: list
    aggregates: list


def _as_policy(spec) -> DampingPolicy:
    if isinstance(spec, DampingPolicy):
        return spec
    return make_policy(dict(spec))


def run_comparison(problems, policies, env_config=None, seeds=(0,)) -> ComparisonTable:
    """Solve every (problem, policy, seed) cell; aggregate per policy.

    ``problems`` maps id -> problem, ``policies`` maps kind -> policy (or a
    ``make_policy`` spec), ``env_config`` is an ``EnvConfig`` or a mapping of
    solve options. Individual failures become outcome rows; the sweep itself
    never aborts.
    """
    problem_items = list(problems.items() if hasattr(problems, "items") else problems)
    policy_items = [(kind, _as_policy(spec)) for kind, spec in (
        policies.items() if hasattr(policies, "items") else policies
    )]
    seeds = list(seeds)
    if not problem_items or not policy_items or not seeds:
        raise ValueError("problems, policies, and seeds must all be non-empty")
    if is_dataclass(env_config):
        env_config = asdict(env_config)
    env_config = dict(env_config or {})
    solve_kwargs = {
        "max_iterations": env_config.get("max_iterations", 100),
        "threshold": env_config.get("threshold", 1e-6),
        "deterministic_time": env_config.get("deterministic_time", False),
        "accept_only_improving": env_config.get("accept_only_improving", False),
    }
    records = []
    for problem_id, problem in problem_items:
        for kind, policy in policy_items:
            for seed in seeds:
                try:
                    result = solve(problem, policy, **solve_kwargs)
                    records.append(RunRecord.from_result(str(problem_id), kind, seed, result))
                except Exception as exc:  # noqa: BLE001 - sweep must survive
                    records.append(
                        RunRecord(
                            problem_id=str(problem_id),
                            policy_kind=kind,
                            seed=seed,
                            outcome=f"error: {exc}",
                            iterations=0,
                            total_time_s=float("nan"),
                            initial_error=float("nan"),
                            final_error=float("nan"),
                        )
                    )
    aggregates = [
        aggregate_rows([r for r in records if r.policy_kind == kind], kind)
        for kind, _ in policy_items
    ]
    return ComparisonTable(records=records, aggregates=aggregates)


def aggregate_rows(records, policy_kind: str) -> dict:
    iterations = np.array([r.iterations for r in records], dtype=float)
    times = np.array([r.total_time_s for r in records], dtype=float)
    finals = np.array([r.final_error for r in records], dtype=float)
    converged = np.array([r.outcome == "converged" for r in records], dtype=float)
    return {
        "policy": policy_kind,
        "runs": len(records),
        "success_rate": float(np.mean(converged)) if records else float("nan"),
        "mean_iterations": float(np.mean(iterations)) if records else float("nan"),
        "median_iterations": float(np.median(iterations)) if records else float("nan"),
        "mean_time_s": float(np.mean(times)) if records else float("nan"),
        "median_final_error": float(np.median(finals)) if records else float("nan"),
    }


def _fmt(value) -> str:
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(_fmt(v) for v in value)
    return str(value)


def comparison_to_csv(table: ComparisonTable) -> str:
    lines = ["problem,policy,seed,outcome,iterations,total_time_s,initial_error,final_error"]
    for r in table.records:
        lines.append(
            ",".join(
                _fmt(v)
                for v in (
                    r.problem_id,
                    r.policy_kind,
                    r.seed,
                    r.outcome,
                    r.iterations,
                    r.total_time_s,
                    r.initial_error,
                    r.final_error,
                )
            )
        )
    return "\n".join(lines) + "\n"


AGGREGATE_COLUMNS = (
    "policy",
    "runs",
    "success_rate",
    "mean_iterations",
    "median_iterations",
    "mean_time_s",
    "median_final_error",
)


def aggregates_to_csv(table: ComparisonTable) -> str:
    lines = [",".join(AGGREGATE_COLUMNS)]
    for row in table.aggregates:
        lines.append(",".join(_fmt(row[c]) for c in AGGREGATE_COLUMNS))
    return "\n".join(lines) + "\n"


def _time_to_target(record: RunRecord, target: float) -> float:
    if record is None:
        return float("inf")
    if np.isfinite(record.initial_error) and record.initial_error <= target:
        return 0.0
    elapsed = 0.0
    for _lam, error, duration in record.trace:
        elapsed += duration
        if np.isfinite(error) and error <= target:
            return elapsed
    return float("inf")


def performance_profile(records, tolerance: float) -> dict:
    """Cumulative solved-fraction curves over relative solve time.

    Per problem instance the target error is
    ``best_final + tolerance * (initial - best_final)`` with ``best_final``
    the minimum final error over policies; a policy's time is the first
    cumulative duration at which its traced error dips below the target,
    and alpha divides that by the fastest policy's time.
    """
    if not 0.0 < tolerance <= 1.0:
        raise ValueError("tolerance must be in (0, 1]")
    kinds = sorted({r.policy_kind for r in records})
    if len(kinds) < 2:
        raise ValueError("performance profiles need at least two policies")
    instances: dict = {}
    for r in records:
        instances.setdefault((r.problem_id, r.seed), {})[r.policy_kind] = r
    ratios = {kind: [] for kind in kinds}
    solved_instances = 0
    for _key, by_kind in sorted(instances.items()):
        finals = [r.final_error for r in by_kind.values() if np.isfinite(r.final_error)]
        if not finals:
            continue
        best_final = min(finals)
        initial = next(
            r.initial_error for r in by_kind.values() if np.isfinite(r.initial_error)
        )
        target = best_final + tolerance * (initial - best_final)
        times = {kind: _time_to_target(by_kind.get(kind), target) for kind in kinds}
        fastest = min(times.values())
        if not np.isfinite(fastest):
            continue
        solved_instances += 1
        for kind, t in times.items():
            if not np.isfinite(t):
                continue
            if fastest == 0.0:
                ratios[kind].append(1.0 if t == 0.0 else float("inf"))
            else:
                ratios[kind].append(t / fastest)
    if solved_instances == 0:
        raise ValueError("no problem instance was solved by any policy")
    curves = {}
    for kind in kinds:
        finite = sorted(r for r in ratios[kind] if np.isfinite(r))
        points: list[ProfilePoint] = []
        for count, alpha in enumerate(finite, start=1):
            fraction = count / solved_instances
            point = ProfilePoint(relative_time=alpha, solved_fraction=fraction)
            if points and points[-1].relative_time == alpha:
                points[-1] = point
            else:
                points.append(point)
        curves[kind] = points
    return curves


def profile_to_csv(curves: dict) -> str:
    lines = ["policy,relative_time,solved_fraction"]
    for kind in sorted(curves):
        for point in curves[kind]:
            lines.append(f"{kind},{_fmt(point.relative_time)},{_fmt(point.solved_fraction)}")
    return "\n".join(lines) + "\n"


def convergence_trace(record: RunRecord, tolerances=DEFAULT_TOLERANCES) -> dict:
    """Cumulative-time/error series plus tolerance threshold lines."""
    if len(record.trace) != record.iterations:
        raise ValueError("record is missing its per-iteration trace")
    times = [0.0]
    errors = [record.initial_error]
    for _lam, error, duration in record.trace:
        times.append(times[-1] + duration)
        errors.append(error)
    thresholds = {
        tau: record.final_error + tau * (record.initial_error - record.final_error)
        for tau in tolerances
    }
    return {"times": times, "errors": errors, "thresholds": thresholds}


def trace_to_csv(trace: dict) -> str:
    lines = ["cumulative_time_s,error"]
    for t, e in zip(trace["times"], trace["errors"]):
        lines.append(f"{_fmt(float(t))},{_fmt(float(e))}")
    return "\n".join(lines) + "\n"


def extract_schedule(nets, problems, steps: int = 4) -> list:
    """Average the agent's first damping choices across scenes.

    Positions only reached on some scenes average over those scenes; a
    position no scene reaches ends the schedule early.
    """
    policy = AgentPolicy(nets)
    sums = np.zeros(steps)
    counts = np.zeros(steps, dtype=int)
    for problem in problems:
        result = solve(problem, policy, max_iterations=steps, deterministic_time=True)
        for i, rec in enumerate(result.records[:steps]):
            sums[i] += rec.lam
            counts[i] += 1
    return [float(s / c) for s, c in zip(sums, counts) if c > 0]


DEFAULT_ABLATION_CONFIG = {
    "num_cameras": 10,
    "num_points": 10,
    "train_seeds": TRAIN_SEEDS,
    "eval_seeds": HOLDOUT_SEEDS,
    "episodes": 300,
    "hidden": 256,
    "batch_size": 256,
    "warmup_steps": 500,
    "replay_capacity": 100_000,
    "max_iterations": 100,
    "threshold": 1e-6,
    "deterministic_time": True,
    "seed": 0,
    "lr": 3e-4,
}


def _ablation_problems(config: dict):
    nc, npts = config["num_cameras"], config["num_points"]
    train = [suite_scene(s, nc, npts) for s in config["train_seeds"]]
    held_out = {f"scene-{s}": suite_scene(s, nc, npts) for s in config["eval_seeds"]}
    return train, held_out


def _train_for_ablation(train_problems, config: dict, **overrides):
    from .sac import TrainConfig, train_agent

    fields = (
        "episodes",
        "seed",
        "hidden",
        "batch_size",
        "warmup_steps",
        "replay_capacity",
        "max_iterations",
        "threshold",
        "deterministic_time",
        "lr",
    )
    kwargs = {name: config[name] for name in fields}
    kwargs.update(overrides)
    nets, _logs = train_agent(train_problems, TrainConfig(**kwargs))
    return nets


def _eval_rows(nets, held_out, config: dict, extra: dict) -> dict:
    table = run_comparison(
        held_out,
        {"agent": AgentPolicy(nets)},
        env_config={
            "max_iterations": config["max_iterations"],
            "threshold": config["threshold"],
            "deterministic_time": config["deterministic_time"],
        },
    )
    row = dict(extra)
    row.update(table.aggregates[0])
    row.pop("policy", None)
    return row


def ablation_suite(kind: str, base_config=None) -> dict:
    """Train and evaluate one family of variants on the shared scene suite."""
    config = dict(DEFAULT_ABLATION_CONFIG)
    config.update(base_config or {})
    train_problems, held_out = _ablation_problems(config)
    rows = []

    if kind == "state_size":
        for window in ABLATION_WINDOWS:
            try:
                nets = _train_for_ablation(train_problems, config, window=window)
                rows.append(_eval_rows(nets, held_out, config, {"window": window}))
            except Exception as exc:  # noqa: BLE001 - record, keep sweeping
                rows.append({"window": window, "error": str(exc)})
    elif kind == "reward_variant":
        for variant in ABLATION_REWARDS:
            try:
                nets = _train_for_ablation(train_problems, config, reward_variant=variant)
                rows.append(_eval_rows(nets, held_out, config, {"reward_variant": variant}))
            except Exception as exc:  # noqa: BLE001
                rows.append({"reward_variant": variant, "error": str(exc)})
    elif kind == "reversed":
        for variant in ("duration", "reversed"):
            try:
                nets = _train_for_ablation(train_problems, config, reward_variant=variant)
                rows.append(_eval_rows(nets, held_out, config, {"reward_variant": variant}))
            except Exception as exc:  # noqa: BLE001
                rows.append({"reward_variant": variant, "error": str(exc)})
    elif kind == "scheduler":
        try:
            nets = _train_for_ablation(train_problems, config)
            schedule = extract_schedule(nets, list(held_out.values()))
            policies = {
                "agent": AgentPolicy(nets),
                "scheduler": {"kind": "constant_scheduler", "schedule": schedule},
                "classic": {"kind": "classic"},
            }
            table = run_comparison(
                held_out,
                policies,
                env_config={
                    "max_iterations": config["max_iterations"],
                    "threshold": config["threshold"],
                    "deterministic_time": config["deterministic_time"],
                },
            )
            for agg in table.aggregates:
                row = dict(agg)
                if row["policy"] == "scheduler":
                    row["schedule"] = schedule
                rows.append(row)
        except Exception as exc:  # noqa: BLE001
            rows.append({"error": str(exc)})
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    return {"kind": kind, "rows": rows}


def ablation_to_csv(result: dict) -> str:
    rows = result["rows"]
    columns: list = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c, "")) for c in columns))
    return "\n".join(lines) + "\n"
