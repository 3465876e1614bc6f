import numpy as np
import pytest
from conftest import mc_gradient_rms, random_table

from corrective_rl.environments import build_square_wave
from corrective_rl.errors import ContractError
from corrective_rl.mdp import greedy_rollout, sample_batch
from corrective_rl.oracle import exact_lagrangian_grad
from corrective_rl.pdpg import (
    DualState,
    PdpgConfig,
    StepSchedule,
    check_two_timescale,
    forward_updates,
    lagrangian_grad_theta,
    lambda_update,
    run_pdpg,
    theta_update,
)
from corrective_rl.policy import Network, Policy, TablePolicy


def tabular(S, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return Policy(Network("tabular", S, 4), scale * rng.standard_normal(S * 4))


def teacher_init(teacher, spec):
    return Policy(Network("tabular", spec.state_count, 4), np.log(teacher.table()).ravel())


def test_lambda_update_examples():
    d = DualState(1.0)
    assert lambda_update(d, 0.3, 0.3, 0.1).lam == 1.0
    assert lambda_update(DualState(0.0), 0.1, 0.3, 0.1).lam == 0.0
    assert lambda_update(d, 0.8, 0.3, 0.1).lam == pytest.approx(1.05)
    assert lambda_update(DualState(9.9), 100.0, 0.0, 1.0).lam == 10.0


def test_theta_update_examples():
    theta = np.array([0.5, -0.5])
    assert np.array_equal(theta_update(theta, np.zeros(2), 0.1), theta)
    assert np.array_equal(theta_update(theta, np.ones(2), 0.0), theta)
    out = theta_update(theta, np.array([-100.0, 0.0]), 1.0, radius=2.0)
    assert np.linalg.norm(out) == pytest.approx(2.0)


def test_schedule_validation():
    check_two_timescale(StepSchedule(0.01, 0.6), StepSchedule(0.1, 0.9))
    with pytest.raises(ContractError):
        check_two_timescale(StepSchedule(0.01, 0.9), StepSchedule(0.1, 0.6))
    with pytest.raises(ContractError):
        check_two_timescale(StepSchedule(0.01, 0.4), StepSchedule(0.1, 0.9))
    with pytest.raises(ContractError):
        StepSchedule(0.0, 0.6)
    assert StepSchedule(1.0, 0.5)(3) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        PdpgConfig(delta=-1.0)


def test_forward_updates_examples(tiny):
    rng = np.random.default_rng(0)
    student = tabular(4, 1)
    trajs = sample_batch(tiny, student, 50, rng)
    cfg = PdpgConfig(delta=0.2, kl_direction="forward")
    _, inc = forward_updates(trajs, student, student, DualState(1.0), cfg)
    assert inc == pytest.approx(-0.2)
    teacher = TablePolicy(random_table(rng, 4, floor=0.1))
    g, _ = forward_updates(trajs, student, teacher, DualState(0.0), cfg)
    assert np.allclose(g, lagrangian_grad_theta(trajs, student, teacher, 0.0))


@pytest.mark.parametrize("direction,tol", [("reverse", 0.05), ("forward", 0.10)])
def test_mc_gradient_matches_exact(tiny, direction, tol):
    rng = np.random.default_rng(0)
    student = tabular(4, 0)
    teacher = TablePolicy(random_table(rng, 4, floor=0.2))
    trajs = sample_batch(tiny, student, 10_000, rng)
    lam = 0.5
    if direction == "reverse":
        g = lagrangian_grad_theta(trajs, student, teacher, lam)
    else:
        g, _ = forward_updates(trajs, student, teacher, DualState(lam), PdpgConfig(delta=0.0, kl_direction="forward"))
    exact = exact_lagrangian_grad(tiny, student, teacher, lam, direction=direction)
    assert np.linalg.norm(g - exact) / np.linalg.norm(exact) < tol


def test_reverse_mc_gradient_rms_error_is_small(tiny):
    for seed in range(5):
        student = tabular(4, seed)
        teacher = TablePolicy(random_table(np.random.default_rng(seed), 4, floor=0.2))
        assert mc_gradient_rms(tiny, student, teacher, 0.5, 10_000) < 0.05


def test_run_is_deterministic_and_in_bounds(tiny):
    teacher = TablePolicy(random_table(np.random.default_rng(4), 4, floor=0.1))
    cfg = PdpgConfig(delta=0.05, max_iters=300, seed=7, theta_radius=5.0)
    a = run_pdpg(tiny, teacher, tabular(4, 5), cfg)
    b = run_pdpg(tiny, teacher, tabular(4, 5), cfg)
    assert a.trace == b.trace
    assert all(0.0 <= r["lambda"] <= r["lambda_max"] for r in a.trace)
    assert np.linalg.norm(a.policy.theta) <= 5.0 + 1e-9


def test_lambda_max_doubles_when_pinned(tiny):
    teacher = TablePolicy(random_table(np.random.default_rng(6), 4, floor=0.01))
    cfg = PdpgConfig(delta=0.0, max_iters=200, lambda_max_init=0.01, boundary_window=10, lambda_schedule=StepSchedule(1.0, 0.9))
    res = run_pdpg(tiny, teacher, tabular(4, 7, scale=3.0), cfg)
    assert res.dual.doubling_count >= 1 and res.dual.lam_max > 0.01


def test_trace_file(tiny, tmp_path):
    teacher = TablePolicy(random_table(np.random.default_rng(8), 4, floor=0.1))
    run_pdpg(tiny, teacher, tabular(4, 9), PdpgConfig(delta=0.1, max_iters=20), trace_path=tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("iter,") and len(lines) == 21


def test_zero_delta_keeps_teacher():
    grid, teacher = build_square_wave()
    spec = grid.to_mdp()
    res = run_pdpg(spec, teacher, teacher_init(teacher, spec), PdpgConfig(delta=0.0, max_iters=2000))
    assert greedy_rollout(spec, res.policy).total_reward == greedy_rollout(spec, teacher).total_reward == 61.0
    assert abs(np.mean([r["mean_reward"] for r in res.trace[-500:]]) - 60.0) < 3.0
    assert res.dual.lam < 0.1


def test_frozen_lambda_improves_reward():
    grid, teacher = build_square_wave()
    spec = grid.to_mdp()
    cfg = PdpgConfig(delta=0.0, max_iters=2000, freeze_lambda=True, theta_schedule=StepSchedule(0.3, 0.6))
    res = run_pdpg(spec, teacher, teacher_init(teacher, spec), cfg)
    reward = [r["mean_reward"] for r in res.trace]
    assert np.mean(reward[-100:]) - np.mean(reward[:100]) >= 10.0


@pytest.mark.slow
def test_large_delta_reaches_unconstrained_optimum():
    grid, teacher = build_square_wave()
    spec = grid.to_mdp()
    cfg = PdpgConfig(delta=1000.0, max_iters=20_000, theta_schedule=StepSchedule(0.3, 0.6))
    res = run_pdpg(spec, teacher, teacher_init(teacher, spec), cfg)
    assert greedy_rollout(spec, res.policy).total_reward == 85.0
    assert res.dual.lam == 0.0
