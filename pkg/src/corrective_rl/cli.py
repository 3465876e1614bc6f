"""Command-line entry point: ``corrective-rl {train,eval,kl-bench,enumerate,make-env}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import oracle
from .divergence import kl_step_estimate
from .environments import build_square_wave, build_wall_leap
from .errors import AssumptionViolation, ConfigError, ContractError, EnumerationCapError
from .experiments import (
    BENCH_SAMPLE_COUNTS,
    EXPERIMENTS,
    INITS,
    config_from_values,
    kl_bench_2x2,
    load_config,
    output_root,
    run_experiment,
    write_bench,
)
from .grid import data_path, format_path, load_grid, save_grid
from .mdp import greedy_rollout, sample_batch
from .policy import load_teacher, save_policy, save_table

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_IO = 0, 2, 3, 4

ENVIRONMENTS = ("square_wave", "two_by_two", "wall_leap")

# flag name -> config key; value types are enforced by the config validator
TRAIN_FLAGS = {
    "experiment": str,
    "delta": float,
    "delta_ent": float,
    "rho": float,
    "clip_semantics": str,
    "clip_grouping": str,
    "direction": str,
    "normalize": str,
    "batch_size": int,
    "iterations": int,
    "lr": float,
    "dual_lr": float,
    "temperature": float,
    "reward_scale": float,
    "lambda_init": float,
    "zeta_init": float,
    "gamma": float,
    "init": str,
    "teacher": str,
    "output_dir": str,
    "pretrain_iterations": int,
    "unconstrained_iterations": int,
    "jobs": int,
}


def _resolve_env(name: str):
    if name in ENVIRONMENTS:
        return load_grid(data_path(f"{name}.grid"))
    return load_grid(name)


def _out(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    root = output_root()
    return root / p if root is not None and not p.is_absolute() else p


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS}
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.train_teacher:
        overrides["train_teacher"] = True
    if args.config is not None:
        config = load_config(args.config, overrides)
    else:
        if args.experiment is None:
            raise ConfigError("<flags>: --experiment is required without --config")
        config = config_from_values({k: v for k, v in overrides.items() if v is not None})
    result = run_experiment(config)
    print(f"wrote {config.output_dir}")
    for r in result.rows:
        print(
            f"seed {r.seed}: greedy {r.final_greedy_reward:g}  kl {r.final_kl:.4f}  "
            f"entropy {r.final_entropy:.4f}  lambda {r.lambda_final:.4f}  zeta {r.zeta_final:.4f}"
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    grid = _resolve_env(args.env)
    spec = grid.to_mdp()
    policy = load_teacher(args.policy)
    traj = greedy_rollout(spec, policy)
    actions = format_path(traj.actions) if len(traj.actions) else ""
    print(f"greedy_reward {traj.total_reward:g}")
    print(f"greedy_length {traj.length}")
    print(f"greedy_path {actions}")
    if args.episodes > 0:
        rng = np.random.default_rng(args.seed)
        sampler = policy.with_temperature(args.temperature) if hasattr(policy, "with_temperature") else policy
        trajs = sample_batch(spec, sampler, args.episodes, rng)
        print(f"sampled_reward {float(np.mean([t.total_reward for t in trajs]))!r}")
        if args.teacher is not None:
            teacher = load_teacher(args.teacher)
            print(f"kl_step {kl_step_estimate(trajs, sampler, teacher, None, 'h-1', args.direction)!r}")
    return EXIT_OK


def cmd_kl_bench(args) -> int:
    rows = kl_bench_2x2(args.sample_counts, args.repeats, seed=args.seed)
    out = _out(args.output)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_bench(rows, out)
        print(f"wrote {out}")
    for r in rows:
        print(f"{r['arch']:>12} {r['sample_count']:>6} {r['estimator']:>14} {r['value']:.6f} exact {r['exact_value']:.6f}")
    return EXIT_OK


def cmd_enumerate(args) -> int:
    grid = _resolve_env(args.env)
    spec = grid.to_mdp()
    policy = load_teacher(args.policy)
    table = oracle.enumeration_table(spec, policy, args.gamma, args.horizon, args.cap)
    out = _out(args.output)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        table.write_csv(out)
        print(f"wrote {out}")
    print(f"branches {table.enumeration.size}")
    print(f"total_probability {float(table.prob.sum())!r}")
    print(f"exact_value {float(np.dot(table.prob, table.returns))!r}")
    return EXIT_OK


def cmd_make_env(args) -> int:
    out = _out(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.name == "square_wave":
        grid, teacher = build_square_wave(args.variant)
        save_grid(grid, out / "square_wave.grid")
        save_table(teacher, out / f"square_wave_{args.variant}_teacher.txt")
    elif args.name == "wall_leap":
        ckpt = out / "wall_leap_teacher.ckpt"
        source = ckpt if args.train_teacher else None
        teacher_grid, student_grid, teacher = build_wall_leap(source, args.train_teacher, args.seed)
        save_grid(student_grid, out / "wall_leap.grid")
        save_grid(teacher_grid, out / "wall_leap_blocked.grid")
        if not ckpt.exists():
            save_policy(teacher, ckpt)
    else:
        save_grid(load_grid(data_path("two_by_two.grid")), out / "two_by_two.grid")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrective-rl", description="Teacher-constrained policy optimization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a YAML config and/or flags")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--train-teacher", action="store_true", help="train a missing wall-leap teacher on demand")
    for name, kind in TRAIN_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        if name == "experiment":
            p.add_argument(flag, choices=EXPERIMENTS)
        elif name == "init":
            p.add_argument(flag, choices=INITS)
        else:
            p.add_argument(flag, type=kind)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy and sampled rewards of a saved policy")
    p.add_argument("--env", required=True, help=f"grid file or one of {', '.join(ENVIRONMENTS)}")
    p.add_argument("--policy", required=True, help="policy checkpoint or action table")
    p.add_argument("--episodes", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--teacher", help="teacher checkpoint or table for a step-KL estimate")
    p.add_argument("--direction", default="forward", choices=("forward", "reverse", "hellinger"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kl-bench", help="2x2 KL estimator benchmark")
    p.add_argument("--sample-counts", type=int, nargs="+", default=list(BENCH_SAMPLE_COUNTS))
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_kl_bench)

    p = sub.add_parser("enumerate", help="exhaustive trajectory table of a policy")
    p.add_argument("--env", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--cap", type=int, default=10**7)
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("make-env", help="write an environment's grid and teacher files")
    p.add_argument("name", choices=ENVIRONMENTS)
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--variant", default="determined", choices=("determined", "less_confident"))
    p.add_argument("--train-teacher", action="store_true", help="train the wall-leap teacher instead of copying it")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_env)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, EnumerationCapError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionViolation as e:
        print(f"assumption violated: {e}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
