"""Exact values, divergences and Lagrangian gradients by full enumeration.

Everything here is brute force over every action sequence of a fixed horizon.
It is the ground truth that Monte Carlo estimators are tested against, so it
refuses instances above the enumeration cap rather than approximating.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InfiniteDivergenceError
from .mdp import ENUMERATION_CAP, Enumeration, MdpSpec, as_table, enumerate_arrays
from .policy import score_gradient


@dataclass(frozen=True, eq=False)
class EnumerationTable:
    """Per-branch records of one policy over an enumeration."""

    enumeration: Enumeration
    prob: np.ndarray
    returns: np.ndarray
    log_prob: np.ndarray

    def write_csv(self, path) -> None:
        en = self.enumeration
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "actions", "length", "final_state", "probability", "return", "log_prob"])
            for b in range(en.size):
                w.writerow(
                    [
                        b,
                        "".join(str(int(a)) for a in en.actions[b]),
                        int(en.lengths[b]),
                        int(en.states[b, int(en.lengths[b])]),
                        repr(float(self.prob[b])),
                        repr(float(self.returns[b])),
                        repr(float(self.log_prob[b])),
                    ]
                )


def _horizon(spec: MdpSpec, horizon) -> int:
    return spec.horizon_cap if horizon is None else int(horizon)


def enumeration_table(spec, policy, gamma: float = 1.0, horizon=None, cap=ENUMERATION_CAP) -> EnumerationTable:
    en = enumerate_arrays(spec, _horizon(spec, horizon), cap)
    table = as_table(policy, spec)
    lp = en.log_prob(table)
    return EnumerationTable(en, np.exp(en.env_logp + lp), en.returns(gamma), lp)


def exact_value(spec: MdpSpec, policy, gamma: float = 1.0, horizon=None, cap=ENUMERATION_CAP) -> float:
    """``sum_tau P(tau) J(tau)``."""
    t = enumeration_table(spec, policy, gamma, horizon, cap)
    return float(np.dot(t.prob, t.returns))


def _kl_terms(en: Enumeration, p_table, q_table):
    lp = en.log_prob(p_table)
    lq = en.log_prob(q_table)
    w = np.exp(en.env_logp + lp)
    live = w > 0
    if np.any(np.isneginf(lq[live])):
        raise InfiniteDivergenceError("first policy reaches trajectories the second never generates")
    return w, lp, lq, live


def exact_kl(spec: MdpSpec, p, q, horizon=None, cap=ENUMERATION_CAP) -> float:
    """Trajectory-level ``KL(P_p || P_q)``; environment factors cancel."""
    en = enumerate_arrays(spec, _horizon(spec, horizon), cap)
    w, lp, lq, live = _kl_terms(en, as_table(p, spec), as_table(q, spec))
    return float(np.sum(w[live] * (lp[live] - lq[live])))


def _branch_score(en: Enumeration, student, weights: np.ndarray) -> np.ndarray:
    """``sum_b weights[b] * grad log P_theta(b)`` over the alive steps."""
    rows, cols = np.nonzero(en.alive & (weights != 0)[:, None])
    return score_gradient(student, en.states[rows, cols], en.actions[rows, cols], weights[rows])


def exact_lagrangian_grad(
    spec: MdpSpec,
    student,
    teacher,
    lam: float,
    gamma: float = 1.0,
    direction: str = "reverse",
    horizon=None,
    cap=ENUMERATION_CAP,
    forward_rule: str = "importance",
) -> np.ndarray:
    """Exact expectation of the sampled Lagrangian gradient.

    ``reverse``: ``E_theta[grad log P (J + lam log(P_theta/P_phi) + lam)]``, the
    true gradient of ``V + lam (KL(theta||phi) - delta)``.

    ``forward`` with ``forward_rule="importance"`` is the expectation of the
    importance-weighted update ``grad log P (J + lam IS log(P_phi/P_theta) - lam)``;
    ``forward_rule="true"`` is the actual gradient of ``V + lam KL(phi||theta)``,
    i.e. ``E_theta[grad log P J] - lam E_theta[IS grad log P]``.
    """
    en = enumerate_arrays(spec, _horizon(spec, horizon), cap)
    J = en.returns(gamma)
    if direction == "reverse":
        w, lp, lq, live = _kl_terms(en, as_table(student, spec), as_table(teacher, spec))
        ratio = np.where(live, lp - lq, 0.0)
        weights = w * (J + lam * ratio + lam)
    elif direction == "forward":
        lt, ls = en.log_prob(as_table(teacher, spec)), en.log_prob(as_table(student, spec))
        w = np.exp(en.env_logp + ls)
        wt = np.exp(en.env_logp + lt)
        if np.any((wt > 0) & (w <= 0)):
            raise InfiniteDivergenceError("teacher reaches trajectories the student never generates")
        with np.errstate(invalid="ignore"):
            log_ratio = np.where(wt > 0, lt - ls, 0.0)
        if forward_rule == "importance":
            weights = w * J + lam * (wt * log_ratio - w)
        elif forward_rule == "true":
            weights = w * J - lam * wt
        else:
            raise ContractError(f"unknown forward rule {forward_rule!r}")
    else:
        raise ContractError(f"unknown direction {direction!r}")
    return _branch_score(en, student, weights)


def exact_lagrangian(
    spec: MdpSpec, student, teacher, lam: float, delta: float = 0.0, gamma: float = 1.0, direction="reverse", horizon=None
) -> float:
    """``V(theta) + lam (KL - delta)`` with the KL in the requested direction."""
    v = exact_value(spec, student, gamma, horizon)
    kl = exact_kl(spec, student, teacher, horizon) if direction == "reverse" else exact_kl(spec, teacher, student, horizon)
    return v + lam * (kl - delta)


def exact_state_distribution(spec: MdpSpec, policy, horizon=None, normalization: str = "horizon", cap=ENUMERATION_CAP):
    """Time-averaged state occupancy of ``policy``.

    ``horizon``: ``d(x) = sum_{t<H_max} P(x_t = x) / H_max``, where the terminal
    state keeps absorbing mass once reached.
    ``expected_length``: ``d(x) = sum_t P(x_t = x, t < H) / E[H]`` over
    non-terminal states only, so ``E[H] * d`` is the expected visit count.
    """
    h = _horizon(spec, horizon)
    en = enumerate_arrays(spec, h, cap)
    w = en.probability(as_table(policy, spec))
    S = spec.state_count
    d = np.zeros(S)
    if h == 0:
        return d
    if normalization == "horizon":
        np.add.at(d, en.states[:, :-1].reshape(-1), np.repeat(w, h))
        return d / h
    if normalization == "expected_length":
        rows, cols = np.nonzero(en.alive)
        np.add.at(d, en.states[rows, cols], w[rows])
        total = d.sum()
        return d / total if total > 0 else d
    raise ContractError(f"unknown normalization {normalization!r}")


def expected_length(spec: MdpSpec, policy, horizon=None, cap=ENUMERATION_CAP) -> float:
    en = enumerate_arrays(spec, _horizon(spec, horizon), cap)
    return float(np.dot(en.probability(as_table(policy, spec)), en.lengths))
