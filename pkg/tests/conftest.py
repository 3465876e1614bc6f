import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from corrective_rl.grid import data_path, load_grid
from corrective_rl.mdp import MdpSpec

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    """Record one acceptance verdict; all verdicts are printed at the end of the session."""
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def two_by_two():
    return load_grid(data_path("two_by_two.grid"))


@pytest.fixture(scope="session")
def tiny(two_by_two):
    return two_by_two.to_mdp()


@pytest.fixture(scope="session")
def square_wave():
    return load_grid(data_path("square_wave.grid"))


def random_table(rng, S, A=4, floor=0.0):
    p = rng.dirichlet(np.ones(A), size=S) + floor
    return p / p.sum(axis=1, keepdims=True)


def chain_mdp(n_states=3, slip=0.2, horizon=4):
    """A small stochastic chain: action 0 moves right w.p. 1 - slip, others stay."""
    S, A = n_states + 1, 4
    P = np.zeros((S, A, S))
    C = np.zeros((S, A, S))
    term = n_states
    for s in range(n_states):
        for a in range(A):
            if a == 0:
                P[s, a, s + 1] += 1 - slip
                P[s, a, s] += slip
            else:
                P[s, a, s] = 1.0
            C[s, a] = 1.0
    P[term, :, term] = 1.0
    p0 = np.zeros(S)
    p0[0] = 0.6
    p0[1] = 0.4
    return MdpSpec(P, C, p0, term, horizon)


def mc_gradient_rms(spec, student, teacher, lam, n):
    """Exact root-mean-square relative error of the ``n``-sample reverse Lagrangian gradient."""
    from corrective_rl.mdp import enumerate_arrays
    from corrective_rl.policy import score_gradient

    en = enumerate_arrays(spec, spec.horizon_cap)
    ls, lt = en.log_prob(student.table()), en.log_prob(teacher.table())
    prob = np.exp(en.env_logp + ls)
    w = en.returns(1.0) + lam * (ls - lt) + lam
    X = np.array(
        [
            score_gradient(student, en.states[b, : en.lengths[b]], en.actions[b, : en.lengths[b]], np.full(en.lengths[b], w[b]))
            for b in range(en.size)
        ]
    )
    g = prob @ X
    return float(np.sqrt(prob @ np.sum((X - g) ** 2, axis=1) / n) / np.linalg.norm(g))
