"""Command-line entry points for scene generation, solving, and experiments.

Every subcommand accepts ``--config`` (a JSON file whose keys mirror the
long option names with underscores), ``--seed``, ``--deterministic-time``,
and ``--out-dir``. Explicit command-line flags override config-file values,
which override built-in defaults. Output manifests record the resolved
configuration and library versions but never timestamps or absolute paths,
so reruns with the same inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import gzip
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bench import (
    DEFAULT_TOLERANCES,
    HOLDOUT_SEEDS,
    SUITE_NOISE_STD,
    SUITE_PIXEL_SIGMA,
    TRAIN_SEEDS,
    ablation_suite,
    ablation_to_csv,
    aggregates_to_csv,
    comparison_to_csv,
    extract_schedule,
    performance_profile,
    profile_to_csv,
    run_comparison,
)
from .policy import DEFAULT_SCHEDULE, make_policy
from .scene import generate_synthetic, parse_bal, serialize_bal
from .solver import records_to_csv, result_to_json_dict, solve


def read_text(path) -> str:
    """Read a text file, transparently decompressing gzip payloads."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw.decode("utf-8")


def parse_seed_list(text: str) -> list:
    """Parse ``"3"``, ``"0,2,5"``, or ``"0-9"`` (inclusive range)."""
    seeds: list = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError(f"no seeds in {text!r}")
    return seeds


def _json_safe(value):
    if isinstance(value, Path):
        return value.name
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, outputs):
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "config", "out_dir"):
            continue
        if key in ("problem", "checkpoint") and value is not None:
            value = Path(value).name
        config[key] = _json_safe(value)
    manifest = {
        "command": command,
        "config": config,
        "outputs": sorted(Path(o).name for o in outputs),
        "versions": {
            "balm": __version__,
            "numpy": np.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
            "scipy": scipy.__version__,
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _suite_problems(args, seeds) -> dict:
    problems = {}
    for seed in seeds:
        problems[f"scene-{seed}"] = generate_synthetic(
            args.num_cameras,
            args.num_points,
            pixel_sigma=args.pixel_sigma,
            init_noise=args.init_noise,
            noise_std=args.noise_std,
            seed=seed,
        )
    return problems


def _add_scene_options(parser, pixel_sigma=SUITE_PIXEL_SIGMA, noise_std=SUITE_NOISE_STD):
    parser.add_argument("--num-cameras", type=int, default=10)
    parser.add_argument("--num-points", type=int, default=10)
    parser.add_argument("--pixel-sigma", type=float, default=pixel_sigma)
    parser.add_argument("--noise-std", type=float, default=noise_std)
    parser.add_argument("--init-noise", type=float, default=0.1)


def _add_solve_options(parser):
    parser.add_argument("--max-iterations", type=int, default=100)
    parser.add_argument("--threshold", type=float, default=1e-6)


def _policy_spec(token: str, args) -> dict:
    token = token.strip()
    if token == "classic":
        return {"kind": "classic"}
    if token == "classic-paper":
        return {"kind": "classic", "mode": "paper"}
    if token == "gn":
        return {"kind": "fixed", "value": 1e-15}
    if token == "fixed":
        return {"kind": "fixed", "value": args.fixed_value}
    if token == "scheduler":
        if args.schedule == "auto":
            return {"kind": "scheduler-auto"}  # resolved by the caller
        if args.schedule:
            schedule = [float(v) for v in args.schedule.split(",")]
        else:
            schedule = list(DEFAULT_SCHEDULE)
        return {"kind": "constant_scheduler", "schedule": schedule}
    if token == "agent":
        if not args.checkpoint:
            raise SystemExit("--checkpoint is required for the agent policy")
        return {"kind": "agent", "checkpoint_path": args.checkpoint}
    if token == "zero-net":
        if not args.checkpoint:
            raise SystemExit("--checkpoint is required for the zero-net policy")
        return {"kind": "zero_net", "checkpoint_path": args.checkpoint}
    raise SystemExit(f"unknown policy {token!r}")


def cmd_generate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.count))
    outputs = []
    for seed in seeds:
        problem = generate_synthetic(
            args.num_cameras,
            args.num_points,
            pixel_sigma=args.pixel_sigma,
            init_noise=args.init_noise,
            noise_std=args.noise_std,
            seed=seed,
        )
        path = out_dir / f"scene-{seed}.txt"
        path.write_text(serialize_bal(problem))
        outputs.append(path)
    write_manifest(out_dir, "generate", args, outputs)
    print(f"wrote {len(outputs)} scenes to {out_dir}")
    return 0


def cmd_solve(args) -> int:
    if not args.problem:
        raise SystemExit("solve needs --problem (flag or config)")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = parse_bal(read_text(args.problem), pixel_sigma=args.pixel_sigma)
    policy = make_policy(_policy_spec(args.policy, args))
    result = solve(
        problem,
        policy,
        max_iterations=args.max_iterations,
        threshold=args.threshold,
        deterministic_time=args.deterministic_time,
    )
    result_path = out_dir / "result.json"
    result_path.write_text(
        json.dumps(result_to_json_dict(result), indent=2, sort_keys=True) + "\n"
    )
    trace_path = out_dir / "trace.csv"
    trace_path.write_text(records_to_csv(result.records))
    write_manifest(out_dir, "solve", args, [result_path, trace_path])
    print(
        f"{args.policy}: {result.outcome} in {result.iterations} iterations, "
        f"final error {result.final_error:.6e}"
    )
    return 0


def cmd_train(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = parse_seed_list(args.train_seeds)
    problems = list(_suite_problems(args, seeds).values())
    log_path = out_dir / "train_log.jsonl"
    entries = []
    if args.algo == "sac":
        from .sac import TrainConfig, save_agent_checkpoint, train_agent

        cfg = TrainConfig(
            episodes=args.episodes,
            seed=args.seed,
            window=args.window,
            hidden=args.hidden if args.hidden is not None else 256,
            gamma=args.gamma,
            alpha=args.alpha,
            lr=args.lr,
            batch_size=args.batch_size,
            replay_capacity=args.replay_capacity,
            warmup_steps=args.warmup_steps,
            reward_variant=args.reward_variant,
            max_iterations=args.max_iterations,
            threshold=args.threshold,
            deterministic_time=args.deterministic_time,
        )
        nets, logs = train_agent(problems, cfg)
        checkpoint = out_dir / "agent.ckpt"
        save_agent_checkpoint(checkpoint, nets, cfg)
        entries = logs
    elif args.algo == "zero-net":
        from .baselines import save_zero_net_checkpoint, zero_net_train

        net = zero_net_train(
            problems,
            epochs=args.epochs,
            seed=args.seed,
            window=args.window,
            hidden=args.hidden if args.hidden is not None else 1280,
            lr=args.lr,
            passes_per_epoch=args.passes_per_epoch,
            max_iterations=args.max_iterations,
            threshold=args.threshold,
            deterministic_time=args.deterministic_time,
            progress=entries.append,
        )
        checkpoint = out_dir / "zero_net.ckpt"
        save_zero_net_checkpoint(checkpoint, net)
    else:
        raise SystemExit(f"unknown algo {args.algo!r}")
    with log_path.open("w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_manifest(out_dir, "train", args, [checkpoint, log_path])
    print(f"trained {args.algo} on {len(problems)} scenes -> {checkpoint.name}")
    return 0


def _resolve_policies(args, problems) -> dict:
    policies = {}
    for token in args.policies.split(","):
        token = token.strip()
        if not token:
            continue
        spec = _policy_spec(token, args)
        if spec.get("kind") == "scheduler-auto":
            from .sac import load_agent_checkpoint

            if not args.checkpoint:
                raise SystemExit("--schedule auto requires --checkpoint")
            nets, _ = load_agent_checkpoint(args.checkpoint)
            schedule = extract_schedule(nets, list(problems.values()))
            spec = {"kind": "constant_scheduler", "schedule": schedule}
        policies[token] = make_policy(spec)
    if not policies:
        raise SystemExit("--policies must name at least one policy")
    return policies


def _comparison_table(args):
    seeds = parse_seed_list(args.eval_seeds)
    problems = _suite_problems(args, seeds)
    policies = _resolve_policies(args, problems)
    env_config = {
        "max_iterations": args.max_iterations,
        "threshold": args.threshold,
        "deterministic_time": args.deterministic_time,
    }
    return run_comparison(problems, policies, env_config=env_config)


def cmd_eval(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _comparison_table(args)
    records_path = out_dir / "records.csv"
    records_path.write_text(comparison_to_csv(table))
    aggregates_path = out_dir / "aggregates.csv"
    aggregates_path.write_text(aggregates_to_csv(table))
    write_manifest(out_dir, "eval", args, [records_path, aggregates_path])
    for row in table.aggregates:
        print(
            f"{row['policy']}: success {row['success_rate']:.2f}, "
            f"median iterations {row['median_iterations']:.1f}"
        )
    return 0


def cmd_profile(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _comparison_table(args)
    tolerances = [float(t) for t in str(args.tolerances).split(",")]
    outputs = []
    for tolerance in tolerances:
        curves = performance_profile(table.records, tolerance)
        path = out_dir / f"profile-{tolerance:g}.csv"
        path.write_text(profile_to_csv(curves))
        outputs.append(path)
    write_manifest(out_dir, "profile", args, outputs)
    print(f"wrote {len(outputs)} profile tables to {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    if not args.kind:
        raise SystemExit("ablate needs --kind (flag or config)")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overrides = dict(args.ablation_config or {})
    overrides.setdefault("deterministic_time", args.deterministic_time)
    overrides.setdefault("seed", args.seed)
    result = ablation_suite(args.kind, overrides)
    csv_path = out_dir / f"ablation-{args.kind}.csv"
    csv_path.write_text(ablation_to_csv(result))
    json_path = out_dir / f"ablation-{args.kind}.json"
    json_path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir, "ablate", args, [csv_path, json_path])
    print(f"wrote ablation tables for {args.kind} to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic-time", action="store_true")
    common.add_argument("--out-dir", type=str, default=".")

    parser = argparse.ArgumentParser(
        prog="balm",
        description="Bundle adjustment with learned and scheduled damping.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", parents=[common], help="write synthetic scenes")
    _add_scene_options(p_gen)
    p_gen.add_argument("--count", type=int, default=10)
    p_gen.set_defaults(func=cmd_generate)

    p_solve = sub.add_parser("solve", parents=[common], help="solve one problem")
    p_solve.add_argument("--problem", default=None, help="BAL text file (.gz ok)")
    p_solve.add_argument("--pixel-sigma", type=float, default=1.0)
    p_solve.add_argument("--policy", default="classic")
    p_solve.add_argument("--checkpoint", default=None)
    p_solve.add_argument("--fixed-value", type=float, default=0.25)
    p_solve.add_argument("--schedule", default=None)
    _add_solve_options(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_train = sub.add_parser("train", parents=[common], help="train a damping policy")
    p_train.add_argument("--algo", choices=("sac", "zero-net"), default="sac")
    p_train.add_argument("--train-seeds", default="0-9")
    _add_scene_options(p_train)
    _add_solve_options(p_train)
    p_train.add_argument("--episodes", type=int, default=300)
    p_train.add_argument("--window", type=int, default=5)
    p_train.add_argument("--hidden", type=int, default=None)
    p_train.add_argument("--gamma", type=float, default=0.99)
    p_train.add_argument("--alpha", type=float, default=0.2)
    p_train.add_argument("--lr", type=float, default=3e-4)
    p_train.add_argument("--batch-size", type=int, default=256)
    p_train.add_argument("--replay-capacity", type=int, default=100_000)
    p_train.add_argument("--warmup-steps", type=int, default=500)
    p_train.add_argument("--reward-variant", default="duration")
    p_train.add_argument("--epochs", type=int, default=2)
    p_train.add_argument("--passes-per-epoch", type=int, default=150)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", parents=[common], help="compare policies")
    p_eval.add_argument("--policies", default="classic,agent")
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--fixed-value", type=float, default=0.25)
    p_eval.add_argument("--schedule", default=None)
    p_eval.add_argument("--eval-seeds", default="100-109")
    _add_scene_options(p_eval)
    _add_solve_options(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_profile = sub.add_parser("profile", parents=[common], help="performance profiles")
    p_profile.add_argument("--policies", default="classic,gn")
    p_profile.add_argument("--checkpoint", default=None)
    p_profile.add_argument("--fixed-value", type=float, default=0.25)
    p_profile.add_argument("--schedule", default=None)
    p_profile.add_argument("--eval-seeds", default="100-109")
    p_profile.add_argument(
        "--tolerances", default=",".join(str(t) for t in DEFAULT_TOLERANCES)
    )
    _add_scene_options(p_profile)
    _add_solve_options(p_profile)
    p_profile.set_defaults(func=cmd_profile)

    p_ablate = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    p_ablate.add_argument(
        "--kind",
        default=None,
        choices=("state_size", "reward_variant", "reversed", "scheduler"),
    )
    p_ablate.add_argument(
        "--ablation-config",
        type=json.loads,
        default=None,
        help="JSON object overriding the ablation defaults",
    )
    p_ablate.set_defaults(func=cmd_ablate)

    # subparsers copy their own defaults over the parent namespace, so config
    # overrides must be installed on every one of them
    parser.subcommand_parsers = {
        "generate": p_gen,
        "solve": p_solve,
        "train": p_train,
        "eval": p_eval,
        "profile": p_profile,
        "ablate": p_ablate,
    }
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, _ = parser.parse_known_args(argv)
    if getattr(args, "config", None):
        overrides = json.loads(read_text(args.config))
        if not isinstance(overrides, dict):
            raise SystemExit("--config must contain a JSON object")
        for sub in parser.subcommand_parsers.values():
            sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    else:
        args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
