import numpy as np
import pytest

from corrective_rl.environments import (
    WALL_LEAP_TEACHER,
    build_square_wave,
    build_wall_leap,
    clone_error,
    clone_teacher,
    spine,
)
from corrective_rl.errors import ContractError
from corrective_rl.grid import data_path, format_path
from corrective_rl.mdp import greedy_rollout
from corrective_rl.policy import TablePolicy, load_policy


def test_determined_teacher_rows():
    grid, teacher = build_square_wave("determined")
    t = teacher.table()
    assert np.allclose(t.sum(axis=1), 1.0)
    assert np.allclose(t.max(axis=1), 0.98)


def test_less_confident_teacher_rows():
    grid, teacher = build_square_wave("less_confident")
    t = teacher.table()
    on = {grid.index(c) for c in spine(grid)}
    for s in range(grid.state_count):
        if s in on:
            assert t[s].max() == 1.0
        else:
            assert np.array_equal(t[s], np.full(4, 0.25))
    with pytest.raises(ContractError):
        build_square_wave("timid")


def test_square_wave_rewards():
    grid, teacher = build_square_wave()
    spec = grid.to_mdp()
    path = greedy_rollout(spec, teacher)
    assert path.total_reward == 61.0
    assert format_path(path.actions) == grid.metadata["teacher_path"]
    right = TablePolicy(np.tile([0.0, 0.0, 0.0, 1.0], (spec.state_count, 1)))
    assert greedy_rollout(spec, right).total_reward == 85.0


def test_clone_fits_the_teacher():
    grid, teacher = build_square_wave()
    term = grid.to_mdp().terminal
    student = clone_teacher(teacher, "mlp(16)", iterations=1500, exclude=[term])
    assert clone_error(teacher, student, exclude=[term]) < 0.05


def test_wall_leap_grids_and_rewards():
    teacher_grid, student_grid, teacher = build_wall_leap()
    assert teacher_grid == student_grid.blocked_leaps()
    assert teacher_grid.walls == student_grid.walls | student_grid.leapable_walls
    assert teacher.state_count == student_grid.state_count
    assert greedy_rollout(teacher_grid.to_mdp(), teacher).total_reward == 57.0
    legal = student_grid.follow(student_grid.metadata["teacher_path"])
    assert legal[-1] == student_grid.goal


def test_missing_wall_leap_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        build_wall_leap(tmp_path / "absent.ckpt")


@pytest.mark.slow
def test_on_demand_teacher_matches_packaged_checkpoint(tmp_path):
    path = tmp_path / "teacher.ckpt"
    _, _, trained = build_wall_leap(path, train_on_demand=True)
    assert path.exists()
    shipped = load_policy(data_path(WALL_LEAP_TEACHER))
    assert np.array_equal(trained.theta, shipped.theta)
