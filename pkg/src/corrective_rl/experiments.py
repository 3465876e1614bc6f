"""Experiment harness: environments, teachers, seeded runs, CSV traces and summaries."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from .divergence import ClipConfig, kl_step_estimate, kl_trajectory_exact, kl_trajectory_mc_forward
from .environments import (
    TRAINING_TEMPERATURE,
    build_square_wave,
    build_wall_leap,
    clone_teacher,
)
from .errors import ConfigError
from .grid import data_path, load_grid
from .mdp import greedy_rollout, sample_batch
from .policy import Policy, TablePolicy, load_teacher, save_policy
from .practical import PracticalConfig, run_practical
from .traces import read_trace, write_trace

__all__ = [
    "EXPERIMENTS",
    "ExperimentConfig",
    "ExperimentResult",
    "SummaryRow",
    "build_square_wave",
    "build_wall_leap",
    "kl_bench_2x2",
    "load_config",
    "pretrained_student",
    "run_experiment",
    "summarize",
]

EXPERIMENTS = ("square_wave_determined", "square_wave_less_confident", "wall_leap", "kl_bench_2x2")
INITS = ("pretrained", "clone", "teacher", "unconstrained")
OUTPUT_ROOT_ENV = "CORRECTIVE_RL_OUTPUT_ROOT"

REWARD_SCALE = 0.02
STUDENT_ARCH = "mlp(64,64)"
CLONE_ITERATIONS = 3000
PRETRAIN_ITERATIONS = 5000
UNCONSTRAINED_ITERATIONS = 2000
TAIL_FRACTION = 0.1
ENTROPY_THRESHOLD = 0.05

BENCH_TEACHER = (0.1, 0.2, 0.0, 0.7)  # up, down, left, right
BENCH_ARCHS = ("linear", "mlp(64,64)")
BENCH_PERTURBATION = {"linear": 0.05, "mlp": 0.02}
BENCH_SAMPLE_COUNTS = (1, 10, 100, 1000, 10000)
BENCH_COLUMNS = (
    "arch",
    "sample_count",
    "estimator",
    "direction",
    "value",
    "value_std",
    "exact_value",
    "abs_error",
    "abs_error_std",
)
SUMMARY_COLUMNS = (
    "seed",
    "final_greedy_reward",
    "final_kl",
    "final_entropy",
    "lambda_final",
    "zeta_final",
    "iterations_to_entropy_below",
    "converged_reward",
)


def default_train(**overrides) -> PracticalConfig:
    """Trainer settings shared by every experiment; rewards enter the loss scaled by ``REWARD_SCALE``."""
    base = dict(reward_scale=REWARD_SCALE, value_scale=100.0 * REWARD_SCALE, temperature=TRAINING_TEMPERATURE)
    base.update(overrides)
    return PracticalConfig(**base)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    train: PracticalConfig = field(default_factory=default_train)
    seeds: tuple[int, ...] = (0,)
    output_dir: Path = Path("runs")
    init: str | None = None
    teacher: Path | None = None
    train_teacher: bool = False
    pretrain_iterations: int = PRETRAIN_ITERATIONS
    unconstrained_iterations: int = UNCONSTRAINED_ITERATIONS
    sample_counts: tuple[int, ...] = BENCH_SAMPLE_COUNTS
    repeats: int = 50
    jobs: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.init is not None and self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}; expected one of {', '.join(INITS)}")
        if self.teacher is not None and not Path(self.teacher).exists():
            raise ConfigError(f"teacher file {self.teacher} does not exist")
        if self.repeats < 1 or any(n < 1 for n in self.sample_counts):
            raise ConfigError("repeats and sample counts must be positive")

    @property
    def resolved_init(self) -> str:
        if self.init is not None:
            return self.init
        return "unconstrained" if self.experiment == "wall_leap" else "pretrained"


# ------------------------------------------------------------------ summaries


@dataclass(frozen=True)
class SummaryRow:
    seed: int
    final_greedy_reward: float
    final_kl: float
    final_entropy: float
    lambda_final: float
    zeta_final: float
    iterations_to_entropy_below: int | None
    converged_reward: float


def _tail(trace: list[dict], fraction: float = TAIL_FRACTION) -> list[dict]:
    return trace[-max(1, int(len(trace) * fraction)) :]


def summary_row(seed: int, trace: list[dict]) -> SummaryRow:
    """Greedy reward and multipliers at the last iteration; KL, entropy and train reward averaged over the tail."""
    tail = _tail(trace)
    below = next((int(r["iter"]) for r in trace if r["entropy"] < ENTROPY_THRESHOLD), None)
    last = trace[-1]
    return SummaryRow(
        seed=seed,
        final_greedy_reward=float(last["greedy_reward"]),
        final_kl=float(np.mean([r["kl_step"] for r in tail])),
        final_entropy=float(np.mean([r["entropy"] for r in tail])),
        lambda_final=float(last["lambda"]),
        zeta_final=float(last["zeta"]),
        iterations_to_entropy_below=below,
        converged_reward=float(np.mean([r["mean_train_reward"] for r in tail])),
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_summary(rows: list[SummaryRow], path) -> None:
    """Per-seed rows followed by ``mean`` and ``std`` aggregate rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in SUMMARY_COLUMNS])
        for name, fn in (("mean", np.mean), ("std", np.std)):
            out = [name]
            for c in SUMMARY_COLUMNS[1:]:
                vals = [getattr(r, c) for r in rows if getattr(r, c) is not None]
                out.append(repr(float(fn(vals))) if vals else "")
            w.writerow(out)


def trace_name(seed: int, phase: str = "") -> str:
    return f"seed{seed}{'_' + phase if phase else ''}_trace.csv"


def summarize(output_dir, seeds, phase: str = "") -> list[SummaryRow]:
    """Rebuild the summary CSV from the per-seed traces on disk."""
    output_dir = Path(output_dir)
    rows = [summary_row(s, read_trace(output_dir / trace_name(s, phase))) for s in seeds]
    write_summary(rows, output_dir / f"{phase + '_' if phase else ''}summary.csv")
    return rows


# ------------------------------------------------------------------ students and teachers


@lru_cache(maxsize=None)
def _pretrained(variant: str, seed: int, clone_only: bool, iterations: int, reward_scale: float):
    grid, teacher = build_square_wave(variant)
    spec = grid.to_mdp()
    if clone_only:
        clone = clone_teacher(
            teacher, STUDENT_ARCH, TRAINING_TEMPERATURE, CLONE_ITERATIONS, seed=seed, exclude=[spec.terminal]
        )
        return clone, None
    init = Policy.create(STUDENT_ARCH, spec.state_count, 4, np.random.default_rng(seed), TRAINING_TEMPERATURE)
    config = default_train(
        iterations=iterations,
        seed=seed,
        lambda_init=0.0,
        zeta_init=0.0,
        freeze_lambda=True,
        freeze_zeta=True,
        reward_scale=reward_scale,
        value_scale=100.0 * reward_scale,
    )
    result = run_practical(spec, None, init, config)
    return result.policy, result.critic


def pretrained_student(
    variant: str = "determined",
    seed: int = 0,
    clone_only: bool = False,
    iterations: int = PRETRAIN_ITERATIONS,
    reward_scale: float = REWARD_SCALE,
):
    """``(policy, critic)`` trained by plain actor-critic from a random init on the square wave.

    ``clone_only`` instead returns a clone of the teacher with no critic.
    Results are cached per process; the critic is copied so callers cannot
    alter the cache.
    """
    policy, critic = _pretrained(variant, seed, clone_only, iterations, reward_scale)
    return policy, (critic.copy() if critic is not None else None)


def _custom_teacher(config: ExperimentConfig, default):
    return default if config.teacher is None else load_teacher(config.teacher)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[SummaryRow] = field(default_factory=list)
    baseline_rows: list[SummaryRow] = field(default_factory=list)
    bench: list[dict] = field(default_factory=list)
    teacher_reward: float | None = None


def _run_square_wave_seed(config: ExperimentConfig, seed: int) -> None:
    variant = "determined" if config.experiment == "square_wave_determined" else "less_confident"
    grid, teacher = build_square_wave(variant)
    teacher = _custom_teacher(config, teacher)
    spec = grid.to_mdp()
    train = replace(config.train, seed=seed)
    init = config.resolved_init
    if init == "pretrained":
        student, critic = pretrained_student(
            variant, seed, iterations=config.pretrain_iterations, reward_scale=train.reward_scale
        )
    elif init in ("clone", "teacher"):
        student, critic = pretrained_student(variant, seed, clone_only=True)
    else:
        raise ConfigError(f"init {init!r} does not apply to {config.experiment}")
    out = Path(config.output_dir)
    result = run_practical(spec, teacher, student, train, critic=critic, trace_path=out / trace_name(seed))
    save_policy(result.policy, out / f"seed{seed}_policy.ckpt")


def _run_wall_leap_seed(config: ExperimentConfig, seed: int) -> None:
    _, student_grid, teacher = build_wall_leap(config.teacher, config.train_teacher)
    spec = student_grid.to_mdp()
    out = Path(config.output_dir)
    train = replace(config.train, seed=seed)
    student, critic = teacher, None
    if config.resolved_init == "unconstrained":
        free = replace(
            train,
            iterations=config.unconstrained_iterations,
            lambda_init=0.0,
            zeta_init=0.0,
            freeze_lambda=True,
            freeze_zeta=True,
        )
        pre = run_practical(spec, teacher, teacher, free, trace_path=out / trace_name(seed, "unconstrained"))
        save_policy(pre.policy, out / f"seed{seed}_unconstrained_policy.ckpt")
        student, critic = pre.policy, pre.critic
    elif config.resolved_init != "teacher":
        raise ConfigError(f"init {config.resolved_init!r} does not apply to wall_leap")
    result = run_practical(spec, teacher, student, train, critic=critic, trace_path=out / trace_name(seed))
    save_policy(result.policy, out / f"seed{seed}_policy.ckpt")


def _run_seed(config: ExperimentConfig, seed: int) -> None:
    if config.experiment == "wall_leap":
        _run_wall_leap_seed(config, seed)
    else:
        _run_square_wave_seed(config, seed)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every seed, persist traces and checkpoints, then aggregate the summary."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(config)
    if config.experiment == "kl_bench_2x2":
        result.bench = kl_bench_2x2(config.sample_counts, config.repeats, seed=config.seeds[0])
        write_bench(result.bench, out / "kl_bench.csv")
        return result
    if config.jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(min(config.jobs, len(config.seeds))) as pool:
            list(pool.map(_run_seed, [config] * len(config.seeds), config.seeds))
    else:
        for seed in config.seeds:
            _run_seed(config, seed)
    result.rows = summarize(out, config.seeds)
    if config.experiment == "wall_leap":
        teacher_grid, _, teacher = build_wall_leap(config.teacher)
        result.teacher_reward = greedy_rollout(teacher_grid.to_mdp(), teacher).total_reward
        if config.resolved_init == "unconstrained":
            result.baseline_rows = summarize(out, config.seeds, "unconstrained")
    return result


# ------------------------------------------------------------------ KL benchmark


def bench_students(seed: int = 0, archs=BENCH_ARCHS):
    """The 2x2 grid and, per architecture, a ``(teacher, student)`` pair.

    The teacher is a network fitted to the ``BENCH_TEACHER`` action table;
    the student is the same network with Gaussian noise added to every weight.
    """
    grid = load_grid(data_path("two_by_two.grid"))
    spec = grid.to_mdp()
    table = TablePolicy(np.tile(np.array(BENCH_TEACHER), (spec.state_count, 1)))
    pairs = {}
    for arch in archs:
        teacher = clone_teacher(table, arch, 1.0, 2000, seed=seed, exclude=[spec.terminal])
        scale = BENCH_PERTURBATION[arch.split("(")[0]]
        noise = np.random.default_rng([seed, 1]).standard_normal(teacher.theta.size)
        pairs[arch] = (teacher, teacher.with_theta(teacher.theta + scale * noise))
    return spec, pairs


def kl_bench_2x2(sample_counts=BENCH_SAMPLE_COUNTS, repeats: int = 50, seed: int = 0, archs=BENCH_ARCHS) -> list[dict]:
    """Forward-KL estimates from student-sampled batches against the enumerated exact value.

    Both estimators see the same batches: the importance-weighted trajectory
    estimator and the unnormalized step-wise estimator.
    """
    spec, pairs = bench_students(seed, archs)
    rows = []
    for i, arch in enumerate(archs):
        teacher, student = pairs[arch]
        exact = kl_trajectory_exact(spec, teacher, student)
        rng = np.random.default_rng([seed, i, 2])
        for n in sample_counts:
            est = {"trajectory_mc": [], "step_mc": []}
            for _ in range(repeats):
                batch = sample_batch(spec, student, n, rng)
                est["trajectory_mc"].append(kl_trajectory_mc_forward(batch, student, teacher, np.inf))
                est["step_mc"].append(kl_step_estimate(batch, student, teacher, None, "none"))
            for name, vals in est.items():
                v = np.array(vals)
                err = np.abs(v - exact)
                rows.append(
                    {
                        "arch": arch,
                        "sample_count": n,
                        "estimator": name,
                        "direction": "forward",
                        "value": float(v.mean()),
                        "value_std": float(v.std()),
                        "exact_value": exact,
                        "abs_error": float(err.mean()),
                        "abs_error_std": float(err.std()),
                    }
                )
    return rows


def write_bench(rows: list[dict], path) -> None:
    write_trace(rows, path, BENCH_COLUMNS)


# ------------------------------------------------------------------ config files

TRAIN_KEYS = {f.name for f in fields(PracticalConfig)} - {"clip", "seed", "zeta_bounds"}
CLIP_KEYS = {"rho": "rho", "clip_semantics": "semantics", "clip_grouping": "grouping"}
TOP_KEYS = {
    "experiment",
    "seeds",
    "output_dir",
    "init",
    "teacher",
    "train_teacher",
    "pretrain_iterations",
    "unconstrained_iterations",
    "sample_counts",
    "repeats",
    "jobs",
}


def output_root() -> Path | None:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) if root else None


def _coerce(value, target, where: str):
    if isinstance(target, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(target, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def build_config(values: dict, lines: dict | None = None, source: str = "<config>", base_dir=None) -> ExperimentConfig:
    """Validate a flat key/value mapping into an ``ExperimentConfig``.

    ``lines`` maps keys to 1-based line numbers so errors point at the source.
    """
    lines = lines or {}

    def where(key):
        return f"{source}:{lines[key]}" if key in lines else f"{source}: {key}"

    def fail(key, msg):
        raise ConfigError(f"{where(key)}: {msg}")

    if "experiment" not in values:
        raise ConfigError(f"{source}:1: missing required key 'experiment'")
    defaults = default_train()
    train, clip, top = {}, {}, {}
    for key, value in values.items():
        if key in TRAIN_KEYS:
            train[key] = _coerce(value, getattr(defaults, key), where(key))
        elif key in CLIP_KEYS:
            clip[CLIP_KEYS[key]] = _coerce(value, 1.0 if key == "rho" else "", where(key))
        elif key in TOP_KEYS:
            top[key] = value
        else:
            fail(key, f"unknown key {key!r}")
    if "delta" in train and train["delta"] < 0:
        fail("delta", f"delta must be non-negative, got {train['delta']}")
    if "rho" in clip and not 0.0 < clip["rho"] <= 100.0:
        fail("rho", f"rho must lie in (0, 100], got {clip['rho']}")
    seeds = top.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        fail("seeds", "seeds must be a nonempty list of integers")
    counts = top.get("sample_counts", list(BENCH_SAMPLE_COUNTS))
    if not isinstance(counts, list) or not all(isinstance(n, int) and n >= 1 for n in counts):
        fail("sample_counts", "sample_counts must be a list of positive integers")
    for key in ("pretrain_iterations", "unconstrained_iterations", "repeats", "jobs"):
        if key in top and (not isinstance(top[key], int) or isinstance(top[key], bool) or top[key] < 1):
            fail(key, f"{key} must be a positive integer")
    if "train_teacher" in top and not isinstance(top["train_teacher"], bool):
        fail("train_teacher", "expected true/false")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    teacher = top.get("teacher")
    if teacher is not None:
        teacher = base_dir / str(teacher)
        if not teacher.exists():
            fail("teacher", f"teacher file {teacher} does not exist")
    out = Path(str(top.get("output_dir", "runs")))
    root = output_root()
    if root is not None and not out.is_absolute():
        out = root / out
    elif not out.is_absolute():
        out = base_dir / out
    try:
        clip_cfg = ClipConfig(enabled="rho" in clip, **clip) if clip else ClipConfig(enabled=False)
        train_cfg = replace(defaults, clip=clip_cfg, **train)
        for key in ("reward_scale",):
            if key in train and "value_scale" not in train:
                train_cfg = replace(train_cfg, value_scale=100.0 * train[key])
        return ExperimentConfig(
            experiment=str(values["experiment"]),
            train=train_cfg,
            seeds=tuple(seeds),
            output_dir=out,
            init=top.get("init"),
            teacher=teacher,
            train_teacher=top.get("train_teacher", False),
            pretrain_iterations=top.get("pretrain_iterations", PRETRAIN_ITERATIONS),
            unconstrained_iterations=top.get("unconstrained_iterations", UNCONSTRAINED_ITERATIONS),
            sample_counts=tuple(counts),
            repeats=top.get("repeats", 50),
            jobs=top.get("jobs", 1),
        )
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None


def parse_config_text(text: str, source: str = "<config>"):
    """``(values, lines)`` from YAML text, with the line number of every top-level key."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML: {getattr(e, 'problem', e)}") from None
    if node is None:
        raise ConfigError(f"{source}:1: empty configuration")
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}:{node.start_mark.line + 1}: top level must be a mapping")
    lines = {}
    for key_node, _ in node.value:
        if key_node.value in lines:
            raise ConfigError(f"{source}:{key_node.start_mark.line + 1}: duplicate key {key_node.value!r}")
        lines[key_node.value] = key_node.start_mark.line + 1
    return yaml.safe_load(text), lines


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config; ``overrides`` (already typed) win over file values."""
    path = Path(path)
    values, lines = parse_config_text(path.read_text(), str(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values, lines, str(path), base_dir=path.parent)


def config_from_values(values: dict, source: str = "<flags>") -> ExperimentConfig:
    return build_config(dict(values), None, source)


