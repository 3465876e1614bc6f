import numpy as np
import pytest
from conftest import chain_mdp, random_table

from corrective_rl.mdp import MdpSpec, sample_batch
from corrective_rl.oracle import (
    enumeration_table,
    exact_kl,
    exact_lagrangian,
    exact_lagrangian_grad,
    exact_state_distribution,
    exact_value,
    expected_length,
)
from corrective_rl.policy import Network, Policy, TablePolicy


def random_policy(arch, S, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    pol = Policy.create(arch, S, 4, rng, temperature=1.0)
    return pol.with_theta(pol.theta + scale * rng.standard_normal(pol.theta.size))


def fd_lagrangian(spec, student, teacher, lam, direction, h=1e-6):
    g = np.zeros(student.theta.size)
    for i in range(g.size):
        e = np.zeros_like(g)
        e[i] = h
        up = exact_lagrangian(spec, student.with_theta(student.theta + e), teacher, lam, direction=direction)
        dn = exact_lagrangian(spec, student.with_theta(student.theta - e), teacher, lam, direction=direction)
        g[i] = (up - dn) / (2 * h)
    return g


def test_table_probabilities_sum_to_one(tiny, tmp_path):
    rng = np.random.default_rng(0)
    t = enumeration_table(tiny, TablePolicy(random_table(rng, 4)))
    assert t.prob.sum() == pytest.approx(1.0, abs=1e-9)
    t.write_csv(tmp_path / "e.csv")
    assert len((tmp_path / "e.csv").read_text().splitlines()) == t.enumeration.size + 1
    stoch = chain_mdp()
    assert enumeration_table(stoch, TablePolicy(random_table(rng, 4))).prob.sum() == pytest.approx(1.0, abs=1e-9)


def test_exact_value_examples(tiny):
    spec = chain_mdp()
    zero = MdpSpec(spec.transition, np.zeros_like(spec.cost), spec.initial_dist, spec.terminal, spec.horizon_cap)
    assert exact_value(zero, TablePolicy(np.full((4, 4), 0.25))) == 0.0
    down = np.zeros((4, 4))
    down[:, 1] = 1.0
    assert exact_value(tiny, TablePolicy(down)) == pytest.approx(-99.0)


def test_exact_value_matches_monte_carlo(tiny):
    uni = TablePolicy(np.full((4, 4), 0.25))
    trajs = sample_batch(tiny, uni, 10**6, np.random.default_rng(1))
    J = np.array([t.costs.sum() for t in trajs])
    se = J.std(ddof=1) / np.sqrt(J.size)
    assert abs(J.mean() - exact_value(tiny, uni)) < 3 * se


def test_zero_lambda_constant_cost_gives_zero_gradient():
    P = np.zeros((2, 4, 2))
    P[:, :, 1] = 1.0
    C = np.zeros((2, 4, 2))
    C[0] = 3.0
    spec = MdpSpec(P, C, np.array([1.0, 0.0]), 1, 1)
    student = random_policy("tabular", 2, 2)
    g = exact_lagrangian_grad(spec, student, student, 0.0)
    assert np.max(np.abs(g)) < 1e-10


@pytest.mark.parametrize("arch", ["tabular", "linear", "mlp(8)"])
def test_reverse_gradient_matches_finite_differences(tiny, arch):
    student = random_policy(arch, 4, 3)
    teacher = TablePolicy(random_table(np.random.default_rng(4), 4, floor=0.1))
    g = exact_lagrangian_grad(tiny, student, teacher, 0.7)
    fd = fd_lagrangian(tiny, student, teacher, 0.7, "reverse")
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_true_forward_gradient_matches_finite_differences(tiny):
    student = random_policy("tabular", 4, 5)
    teacher = TablePolicy(random_table(np.random.default_rng(6), 4, floor=0.1))
    g = exact_lagrangian_grad(tiny, student, teacher, 0.7, direction="forward", forward_rule="true")
    fd = fd_lagrangian(tiny, student, teacher, 0.7, "forward")
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_importance_forward_rule_is_not_the_gradient(tiny):
    student = random_policy("tabular", 4, 7)
    teacher = TablePolicy(random_table(np.random.default_rng(8), 4, floor=0.1))
    rule = exact_lagrangian_grad(tiny, student, teacher, 5.0, direction="forward")
    true = exact_lagrangian_grad(tiny, student, teacher, 5.0, direction="forward", forward_rule="true")
    assert np.linalg.norm(rule - true) / np.linalg.norm(true) > 0.01


def test_state_distribution_normalizations(tiny):
    uni = TablePolicy(np.full((4, 4), 0.25))
    d1 = exact_state_distribution(tiny, uni, horizon=1)
    assert d1[0] == pytest.approx(1.0) and d1.sum() == pytest.approx(1.0)
    d = exact_state_distribution(tiny, uni, normalization="expected_length")
    assert d.sum() == pytest.approx(1.0) and d[tiny.terminal] == 0.0
    dh = exact_state_distribution(tiny, uni)
    assert dh.sum() == pytest.approx(1.0)
    eh = expected_length(tiny, uni)
    assert 1.0 <= eh <= tiny.horizon_cap


def test_exact_kl_is_zero_on_identical_policies(tiny):
    pol = random_policy("linear", 4, 9)
    assert exact_kl(tiny, pol, pol) == 0.0
    net = Network("tabular", 4, 4)
    assert exact_kl(tiny, Policy(net, np.zeros(16)), TablePolicy(np.full((4, 4), 0.25))) == pytest.approx(0.0, abs=1e-12)
