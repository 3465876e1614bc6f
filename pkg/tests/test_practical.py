from dataclasses import replace

import numpy as np
import pytest
from conftest import random_table

from corrective_rl.divergence import ClipConfig
from corrective_rl.errors import ContractError
from corrective_rl.mdp import sample_batch
from corrective_rl.policy import Policy, TablePolicy
from corrective_rl.practical import (
    Critic,
    PracticalConfig,
    ZetaState,
    compute_loss,
    critic_update,
    expand_zeta_interval,
    extract_subtrajectories,
    run_practical,
    zeta_update,
)


def batch(spec, seed, n=8, arch="mlp(8)", temperature=2.0):
    rng = np.random.default_rng(seed)
    student = Policy.create(arch, spec.state_count, 4, rng, temperature)
    student = student.with_theta(student.theta + 0.5 * rng.standard_normal(student.theta.size))
    trajs = sample_batch(spec, student, n, rng)
    teacher = TablePolicy(random_table(rng, spec.state_count, floor=0.1))
    return student, teacher, trajs


def test_suffix_returns_and_log_probs(tiny):
    student, _, trajs = batch(tiny, 0, n=20)
    for gamma in (1.0, 0.9):
        sub = extract_subtrajectories(trajs, student, gamma)
        assert len(sub) == sum(t.length for t in trajs)
        table = student.table()
        for i in range(len(sub)):
            s = sub[i]
            disc = gamma ** np.arange(s.costs.size)
            assert s.ret == pytest.approx(float(np.dot(disc, s.costs)), abs=1e-10)
            assert s.log_prob == pytest.approx(float(np.sum(np.log(table[s.states, s.actions]))), abs=1e-10)
            if s.costs.size > 1:
                assert s.ret == pytest.approx(s.costs[0] + gamma * sub[i + 1].ret, abs=1e-10)
            else:
                assert s.ret == s.costs[0]


@pytest.mark.parametrize("direction", ["forward", "reverse", "hellinger"])
@pytest.mark.parametrize("score", ["suffix", "step"])
def test_loss_gradient_matches_finite_differences(tiny, direction, score):
    student, teacher, trajs = batch(tiny, 1)
    cfg = PracticalConfig(direction=direction, score=score, delta_ent=0.1)
    critic = Critic.create(tiny.state_count, "mlp(4)", np.random.default_rng(2))
    sub = extract_subtrajectories(trajs, student)
    _, _, grad = compute_loss(sub, student, teacher, critic, 0.7, 0.3, cfg)

    def loss_at(theta):
        pol = student.with_theta(theta)
        again = replace(extract_subtrajectories(trajs, pol), returns=sub.returns)
        return compute_loss(again, pol, teacher, critic, 0.7, 0.3, cfg)[0]

    fd = np.zeros_like(grad)
    h = 1e-6
    for i in range(grad.size):
        e = np.zeros_like(grad)
        e[i] = h
        fd[i] = (loss_at(student.theta + e) - loss_at(student.theta - e)) / (2 * h)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-3


def test_clipped_states_carry_no_divergence_gradient(tiny):
    student, teacher, trajs = batch(tiny, 3, n=16, arch="tabular")
    sub = extract_subtrajectories(trajs, student)
    base = PracticalConfig(use_critic=False)
    g0 = compute_loss(sub, student, teacher, None, 0.0, 0.0, base)[2]
    full = compute_loss(sub, student, teacher, None, 1.0, 0.0, base)
    tight = compute_loss(sub, student, teacher, None, 1.0, 0.0, replace(base, clip=ClipConfig(rho=1.0)))
    assert tight[1].kl_estimate <= full[1].kl_estimate
    d = np.array([np.sum(teacher.probs[x] * np.log(teacher.probs[x] / student.table()[x])) for x in range(4)])
    visited = np.unique(sub.steps.states)
    live = visited[d[visited] == d[visited].min()]
    div = (tight[2] - g0).reshape(4, 4)
    for x in visited:
        assert np.any(div[x] != 0.0) == (x in live)


def test_zero_advantage_leaves_only_constraint_terms(tiny):
    student, teacher, trajs = batch(tiny, 4)
    sub = extract_subtrajectories(trajs, student)
    zero = replace(sub, returns=np.zeros_like(sub.returns))
    cfg = PracticalConfig(delta=0.1, delta_ent=0.05)
    loss, comps, grad = compute_loss(zero, student, teacher, None, 0.0, 0.0, cfg)
    assert comps.pg == 0.0 and np.all(grad == 0.0)
    loss, comps, _ = compute_loss(zero, student, teacher, None, 2.0, 0.5, cfg)
    assert loss == pytest.approx(2.0 * (comps.kl_estimate - 0.1) + 0.5 * (comps.entropy - 0.05))


def test_no_teacher_drops_divergence(tiny):
    student, _, trajs = batch(tiny, 5)
    sub = extract_subtrajectories(trajs, student)
    _, comps, _ = compute_loss(sub, student, None, None, 1.0, 0.0, PracticalConfig(delta=0.0))
    assert comps.kl_estimate == 0.0 and comps.kl == 0.0


def test_critic_update_moves_toward_targets(tiny):
    student, _, trajs = batch(tiny, 6, n=32)
    sub = extract_subtrajectories(trajs, student)
    critic = Critic.create(tiny.state_count, "mlp(8)", np.random.default_rng(7), lr=1e-2)
    before = critic.mse(sub.steps.states, sub.returns)
    for _ in range(200):
        critic_update(critic, sub)
    assert critic.mse(sub.steps.states, sub.returns) < before


def test_perfect_critic_does_not_move(tiny):
    student, _, trajs = batch(tiny, 8)
    sub = extract_subtrajectories(trajs, student)
    critic = Critic.create(tiny.state_count, "tabular", np.random.default_rng(9))
    exact = replace(sub, returns=critic.values()[sub.steps.states])
    before = critic.theta.copy()
    critic_update(critic, exact)
    assert np.linalg.norm(critic.theta - before) < 1e-8


def test_critic_copy_is_independent(tiny):
    critic = Critic.create(tiny.state_count, "mlp(4)")
    twin = critic.copy()
    twin.theta += 1.0
    assert not np.array_equal(twin.theta, critic.theta)


def test_zeta_examples():
    assert zeta_update(ZetaState(0.5), 1.05, 0.05, 0.01).zeta == pytest.approx(0.51)
    pinned = zeta_update(ZetaState(5.0), 10.0, 0.0, 1.0)
    assert pinned.zeta == 5.0
    assert expand_zeta_interval(pinned, 5.0).zeta_max == 10.0
    low = ZetaState(-5.0)
    assert expand_zeta_interval(low, 5.0).zeta_min == -10.0
    mid = ZetaState(0.3)
    assert expand_zeta_interval(mid, 5.0) == mid
    with pytest.raises(ContractError):
        ZetaState(6.0)
    with pytest.raises(ContractError):
        expand_zeta_interval(mid, 0.0)


def test_run_is_deterministic(tiny, tmp_path):
    student, teacher, _ = batch(tiny, 10)
    cfg = PracticalConfig(iterations=50, critic_arch="mlp(8)", seed=3, dual_lr=0.05)
    a = run_practical(tiny, teacher, student, cfg, trace_path=tmp_path / "a.csv")
    b = run_practical(tiny, teacher, student, cfg, trace_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.lam == b.lam and np.array_equal(a.policy.theta, b.policy.theta)
    assert all(0.0 <= r["lambda"] <= 10.0 for r in a.trace)
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "iter,mean_train_reward,greedy_reward,kl_step,entropy,lambda,zeta,loss_pg,loss_kl,loss_ent"


def test_frozen_duals_stay_put(tiny):
    student, teacher, _ = batch(tiny, 11)
    cfg = PracticalConfig(iterations=20, lambda_init=0.0, zeta_init=0.0, freeze_lambda=True, freeze_zeta=True, use_critic=False)
    res = run_practical(tiny, teacher, student, cfg)
    assert res.lam == 0.0 and res.zeta == 0.0 and res.critic is None


def test_config_validation():
    with pytest.raises(ContractError):
        PracticalConfig(delta=-0.1)
    with pytest.raises(ContractError):
        PracticalConfig(direction="sideways")
    with pytest.raises(ContractError):
        PracticalConfig(normalize="h+1")
