"""Benchmark grids, handcrafted teachers and supervised teacher cloning."""
from __future__ import annotations

import numpy as np

from .divergence import kl_rows
from .errors import ContractError
from .grid import GridSpec, data_path, load_grid, parse_path
from .mdp import DOWN, RIGHT, UP
from .policy import Adam, Policy, TablePolicy, load_policy, save_policy

DETERMINED_MASS = 0.98
TRAINING_TEMPERATURE = 5.0
WALL_LEAP_TEACHER = "wall_leap_teacher.ckpt"
WALL_LEAP_TEACHER_ITERATIONS = 4000
WALL_LEAP_REWARD_SCALE = 0.02


def spine(grid: GridSpec) -> dict[tuple[int, int], int]:
    """Cell -> action along the grid's ``teacher_path`` (goal excluded)."""
    path = grid.metadata.get("teacher_path")
    if path is None:
        raise ContractError(f"grid {grid.name!r} declares no teacher_path")
    actions = parse_path(path)
    cells = grid.follow(actions)
    if cells[-1] != grid.goal:
        raise ContractError("teacher_path does not end at the goal")
    out = {}
    for cell, a in zip(cells[:-1], actions):
        if cell in out:
            raise ContractError(f"teacher_path revisits {cell}")
        out[cell] = a
    return out


def preferred_actions(grid: GridSpec) -> np.ndarray:
    """Spine action on the spine; elsewhere drift toward the start row, then right."""
    sp = spine(grid)
    r0 = grid.start[0]
    pref = np.empty(grid.state_count, dtype=np.int64)
    for s in range(grid.state_count):
        cell = grid.cell(s)
        if cell in sp:
            pref[s] = sp[cell]
        elif cell[0] < r0:
            pref[s] = DOWN
        elif cell[0] > r0:
            pref[s] = UP
        else:
            pref[s] = RIGHT
    return pref


def determined_teacher(grid: GridSpec, mass: float = DETERMINED_MASS) -> TablePolicy:
    pref = preferred_actions(grid)
    table = np.full((grid.state_count, 4), (1.0 - mass) / 3.0)
    table[np.arange(grid.state_count), pref] = mass
    return TablePolicy(table)


def less_confident_teacher(grid: GridSpec) -> TablePolicy:
    sp = spine(grid)
    table = np.full((grid.state_count, 4), 0.25)
    for cell, a in sp.items():
        table[grid.index(cell)] = 0.0
        table[grid.index(cell), a] = 1.0
    return TablePolicy(table)


def build_square_wave(variant: str = "determined") -> tuple[GridSpec, TablePolicy]:
    grid = load_grid(data_path("square_wave.grid"))
    if variant == "determined":
        return grid, determined_teacher(grid)
    if variant == "less_confident":
        return grid, less_confident_teacher(grid)
    raise ContractError(f"unknown square-wave variant {variant!r}")


def clone_teacher(
    teacher,
    arch: str,
    temperature: float = 1.0,
    iterations: int = 3000,
    lr: float = 1e-2,
    seed: int = 0,
    exclude=(),
) -> Policy:
    """Fit a parametric policy to a teacher table by Adam on the mean per-state forward KL."""
    target = np.asarray(teacher.table(), dtype=float)
    S, A = target.shape
    student = Policy.create(arch, S, A, np.random.default_rng(seed), temperature)
    keep = np.ones(S, dtype=bool)
    keep[list(exclude)] = False
    opt = Adam(student.theta.size, lr)
    for _ in range(iterations):
        P = student.table()
        g = np.where(keep[:, None], P - target, 0.0) / (keep.sum() * temperature)
        student = student.with_theta(opt.step(student.theta, student.backward(g)))
    return student


def clone_error(teacher, student, exclude=()) -> float:
    keep = np.ones(teacher.table().shape[0], dtype=bool)
    keep[list(exclude)] = False
    return float(np.max(kl_rows(teacher.table()[keep], student.table()[keep])))



def train_wall_leap_teacher(
    grid: GridSpec,
    seed: int = 0,
    iterations: int = WALL_LEAP_TEACHER_ITERATIONS,
    arch: str = "mlp(64,64)",
    reward_scale: float = WALL_LEAP_REWARD_SCALE,
) -> Policy:
    """Plain actor-critic (no divergence, no entropy term) on the grid with leaps blocked."""
    from .practical import PracticalConfig, run_practical

    spec = grid.blocked_leaps().to_mdp()
    init = Policy.create(arch, spec.state_count, 4, np.random.default_rng(seed), TRAINING_TEMPERATURE)
    config = PracticalConfig(
        iterations=iterations,
        seed=seed,
        lambda_init=0.0,
        zeta_init=0.0,
        freeze_lambda=True,
        freeze_zeta=True,
        reward_scale=reward_scale,
        value_scale=100.0 * reward_scale,
        temperature=TRAINING_TEMPERATURE,
    )
    return run_practical(spec, None, init, config).policy


def build_wall_leap(teacher_path=None, train_on_demand: bool = False, seed: int = 0):
    """``(teacher grid, student grid, teacher)``; the grids differ only in leapable walls.

    The teacher is read from ``teacher_path`` (default: the packaged
    checkpoint). If that file is missing it is trained and written there when
    ``train_on_demand`` is set, otherwise ``FileNotFoundError`` is raised.
    """
    student_grid = load_grid(data_path("wall_leap.grid"))
    teacher_grid = student_grid.blocked_leaps()
    path = data_path(WALL_LEAP_TEACHER) if teacher_path is None else teacher_path
    try:
        teacher = load_policy(path)
    except FileNotFoundError:
        if not train_on_demand:
            raise
        teacher = train_wall_leap_teacher(student_grid, seed)
        save_policy(teacher, path)
    if teacher.state_count != student_grid.state_count:
        raise ContractError(f"teacher covers {teacher.state_count} states, grid has {student_grid.state_count}")
    return teacher_grid, student_grid, teacher
