"""Finite MDPs, trajectories, sampling and exhaustive enumeration.

Costs are minimized internally; reward = -cost at reporting boundaries.
Action indices follow the GridWorld convention 0=up, 1=down, 2=left, 3=right.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError, EnumerationCapError

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
ENUMERATION_CAP = 10**7


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """A finite MDP with an absorbing, cost-free terminal state.

    ``transition[s, a, s']`` and ``cost[s, a, s']`` are dense arrays; the
    terminal state doubles as the goal in GridWorlds.
    """

    transition: np.ndarray
    cost: np.ndarray
    initial_dist: np.ndarray
    terminal: int
    horizon_cap: int = 200
    discount: float = 1.0

    def __post_init__(self):
        P = _readonly(self.transition)
        C = _readonly(self.cost)
        p0 = _readonly(self.initial_dist)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ContractError(f"transition must have shape (S, A, S), got {P.shape}")
        if C.shape != P.shape:
            raise ContractError("cost must have the same shape as transition")
        S = P.shape[0]
        if p0.shape != (S,):
            raise ContractError("initial_dist must have one entry per state")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ContractError("every transition row must be a distribution (sum 1 within 1e-12)")
        if np.any(p0 < 0) or abs(p0.sum() - 1.0) > 1e-12:
            raise ContractError("initial_dist must sum to 1")
        if not 0 <= self.terminal < S:
            raise ContractError("terminal must be a valid state index")
        term = int(self.terminal)
        if not np.all(P[term, :, term] == 1.0) or np.any(C[term] != 0.0):
            raise ContractError("terminal state must be absorbing with zero cost")
        if self.horizon_cap < 0:
            raise ContractError("horizon_cap must be non-negative")
        if not 0.0 < self.discount <= 1.0:
            raise ContractError("discount must lie in (0, 1]")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "cost", C)
        object.__setattr__(self, "initial_dist", p0)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "_cdf", _readonly(np.cumsum(P, axis=2)))
        det = None
        if np.all(P.max(axis=2) == 1.0):
            det = _readonly(P.argmax(axis=2), dtype=np.int64)
        object.__setattr__(self, "_next", det)

    @property
    def state_count(self) -> int:
        return self.transition.shape[0]

    @property
    def action_count(self) -> int:
        return self.transition.shape[1]

    @property
    def deterministic(self) -> bool:
        return self._next is not None

    def next_state_table(self) -> np.ndarray:
        """Successor table ``(S, A)``; only defined for deterministic MDPs."""
        if self._next is None:
            raise ContractError("MDP has stochastic transitions")
        return self._next


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States ``x_0..x_H``, actions ``a_0..a_{H-1}`` and costs ``c_0..c_{H-1}``."""

    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def final_state(self) -> int:
        return int(self.states[-1])

    @property
    def steps(self) -> list[tuple[int, int, float]]:
        return [(int(s), int(a), float(c)) for s, a, c in zip(self.states, self.actions, self.costs)]

    @property
    def total_reward(self) -> float:
        return -float(np.sum(self.costs))


def as_table(policy, spec: MdpSpec | None = None) -> np.ndarray:
    """Action-probability table ``(S, A)`` of a policy handle or raw array.

    With ``spec`` the table shape is checked against the MDP.
    """
    table = policy if isinstance(policy, np.ndarray) else policy.table()
    if spec is not None and table.shape != (spec.state_count, spec.action_count):
        raise ContractError(
            f"policy table has shape {table.shape}, MDP needs ({spec.state_count}, {spec.action_count})"
        )
    return table


def _categorical(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # zero-probability entries never win: u >= cdf counts them together with their left neighbour
    k = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(k, cdf_rows.shape[1] - 1)


def step(spec: MdpSpec, state: int, action: int, rng: np.random.Generator) -> tuple[int, float]:
    """Draw ``x' ~ P(.|state, action)`` and return it with the incurred cost."""
    if state == spec.terminal:
        raise ContractError("cannot step from the terminal state")
    if not 0 <= action < spec.action_count:
        raise ContractError(f"action {action} out of range")
    if spec.deterministic:
        nxt = int(spec._next[state, action])
    else:
        nxt = int(_categorical(spec._cdf[state, action][None], np.array([rng.random()]))[0])
    return nxt, float(spec.cost[state, action, nxt])


def sample_batch(spec: MdpSpec, policy, n: int, rng: np.random.Generator) -> list[Trajectory]:
    """Sample ``n`` trajectories in lockstep.

    Trajectory ``j`` consumes only row ``j`` of a pre-drawn uniform block, so the
    result is order-stable by index and identical to sampling the rows separately.
    """
    table = as_table(policy, spec)
    H = spec.horizon_cap
    u0 = rng.random(n)
    u = rng.random((n, H, 2))
    cur = _categorical(np.tile(np.cumsum(spec.initial_dist), (n, 1)), u0)
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    costs = np.empty((n, H))
    states[:, 0] = cur
    lengths = np.full(n, H)
    alive = cur != spec.terminal
    lengths[~alive] = 0
    det = spec._next
    for t in range(H):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        s = cur[idx]
        a = _categorical(np.cumsum(table[s], axis=1), u[idx, t, 0])
        if det is not None:
            nxt = det[s, a]
        else:
            nxt = _categorical(spec._cdf[s, a], u[idx, t, 1])
        actions[idx, t] = a
        costs[idx, t] = spec.cost[s, a, nxt]
        states[idx, t + 1] = nxt
        cur[idx] = nxt
        done = nxt == spec.terminal
        lengths[idx[done]] = t + 1
        alive[idx[done]] = False
    return [
        Trajectory(states[j, : lengths[j] + 1].copy(), actions[j, : lengths[j]].copy(), costs[j, : lengths[j]].copy())
        for j in range(n)
    ]


def sample_trajectory(spec: MdpSpec, policy, rng: np.random.Generator) -> Trajectory:
    """Roll out one trajectory from ``x_0 ~ P_0`` until termination or the horizon cap."""
    return sample_batch(spec, policy, 1, rng)[0]


def greedy_rollout(spec: MdpSpec, policy, horizon: int | None = None) -> Trajectory:
    """Follow the argmax action of ``policy`` from the most likely start state."""
    table = as_table(policy, spec)
    det = spec.next_state_table()
    H = spec.horizon_cap if horizon is None else horizon
    s = int(np.argmax(spec.initial_dist))
    best = np.argmax(table, axis=1)
    states, actions, costs = [s], [], []
    for _ in range(H):
        if s == spec.terminal:
            break
        a = int(best[s])
        nxt = int(det[s, a])
        actions.append(a)
        costs.append(float(spec.cost[s, a, nxt]))
        states.append(nxt)
        s = nxt
    return Trajectory(np.array(states, dtype=np.int64), np.array(actions, dtype=np.int64), np.array(costs))


def discounted_return(traj: Trajectory, gamma: float) -> float:
    """``sum_t gamma^t c_t`` over the trajectory's costs."""
    if not 0.0 < gamma <= 1.0:
        raise ContractError("gamma must lie in (0, 1]")
    if gamma == 1.0:
        return float(np.sum(traj.costs))
    return float(np.sum(traj.costs * gamma ** np.arange(traj.length)))


def trajectory_log_prob(policy, traj: Trajectory) -> float:
    """Policy part of ``log P(traj)``: ``sum_t log pi(a_t | x_t)``.

    Environment terms are excluded because they cancel in every ratio. Returns
    ``-inf`` when some step has zero probability under ``policy``.
    """
    table = as_table(policy)
    p = table[traj.states[:-1], traj.actions]
    if np.any(p <= 0.0):
        return -np.inf
    return float(np.sum(np.log(p)))


class Branch(NamedTuple):
    actions: tuple[int, ...]
    trajectory: Trajectory
    env_prob: float


@dataclass(frozen=True, eq=False)
class Enumeration:
    """All action sequences of a fixed horizon, as padded arrays.

    After termination a branch keeps "acting" in the terminal state; those
    padding steps have ``alive == False`` and carry probability ``1/A`` each,
    so every policy assigns total mass 1 over the branches.
    """

    states: np.ndarray  # (B, h + 1)
    actions: np.ndarray  # (B, h)
    costs: np.ndarray  # (B, h)
    alive: np.ndarray  # (B, h)
    env_logp: np.ndarray  # (B,)
    horizon: int
    action_count: int

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.alive.sum(axis=1)

    def trajectory(self, b: int) -> Trajectory:
        L = int(self.alive[b].sum())
        return Trajectory(self.states[b, : L + 1].copy(), self.actions[b, :L].copy(), self.costs[b, :L].copy())

    def log_prob(self, table: np.ndarray) -> np.ndarray:
        """Per-branch policy log-probability including the padding factor."""
        with np.errstate(divide="ignore"):
            lp = np.log(table[self.states[:, :-1], self.actions])
        lp = np.where(self.alive, lp, 0.0).sum(axis=1)
        return lp - (self.horizon - self.lengths) * np.log(self.action_count)

    def probability(self, table: np.ndarray) -> np.ndarray:
        return np.exp(self.env_logp + self.log_prob(table))

    def returns(self, gamma: float = 1.0) -> np.ndarray:
        return (self.costs * gamma ** np.arange(self.horizon)).sum(axis=1)


def enumerate_arrays(spec: MdpSpec, horizon: int, cap: int = ENUMERATION_CAP) -> Enumeration:
    """Enumerate every (action sequence, outcome) branch of length ``horizon``."""
    S, A = spec.state_count, spec.action_count
    starts = np.flatnonzero(spec.initial_dist > 0)
    if float(A) ** horizon * len(starts) > cap:
        raise EnumerationCapError(f"{len(starts)} * {A}^{horizon} trajectories exceed the cap {cap}")
    states = starts[:, None].astype(np.int64)
    actions = np.zeros((len(starts), 0), dtype=np.int64)
    costs = np.zeros((len(starts), 0))
    env_logp = np.log(spec.initial_dist[starts])
    P = spec.transition
    for _ in range(horizon):
        B = states.shape[0]
        s = np.repeat(states[:, -1], A)
        a = np.tile(np.arange(A), B)
        parent = np.repeat(np.arange(B), A)
        rows, nxt = np.nonzero(P[s, a] > 0)
        if len(rows) > cap:
            raise EnumerationCapError(f"enumeration exceeds the cap {cap}")
        s, a, parent = s[rows], a[rows], parent[rows]
        states = np.concatenate([states[parent], nxt[:, None]], axis=1)
        actions = np.concatenate([actions[parent], a[:, None]], axis=1)
        costs = np.concatenate([costs[parent], spec.cost[s, a, nxt][:, None]], axis=1)
        env_logp = env_logp[parent] + np.where(s == spec.terminal, 0.0, np.log(P[s, a, nxt]))
    alive = states[:, :-1] != spec.terminal
    for arr in (states, actions, costs, alive, env_logp):
        arr.setflags(write=False)
    return Enumeration(states, actions, costs, alive, env_logp, horizon, A)


def enumerate_trajectories(spec: MdpSpec, horizon: int, cap: int = ENUMERATION_CAP) -> list[Branch]:
    """Every action-sequence-induced trajectory of length ``<= horizon``.

    Sequences that reach the terminal state early keep their full action tuple,
    so overlapping trajectories are listed once per sequence.
    """
    en = enumerate_arrays(spec, horizon, cap)
    return [
        Branch(tuple(int(a) for a in en.actions[b]), en.trajectory(b), float(np.exp(en.env_logp[b])))
        for b in range(en.size)
    ]


class Steps(NamedTuple):
    """All visited (state, action, cost) steps of a batch, flattened."""

    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    traj: np.ndarray  # owning trajectory index
    t: np.ndarray  # step index within its trajectory
    lengths: np.ndarray  # per-trajectory H


def flatten(trajs: list[Trajectory]) -> Steps:
    lengths = np.array([tr.length for tr in trajs], dtype=np.int64)
    if lengths.sum() == 0:
        e = np.zeros(0, dtype=np.int64)
        return Steps(e, e, np.zeros(0), e, e, lengths)
    return Steps(
        np.concatenate([tr.states[:-1] for tr in trajs]).astype(np.int64),
        np.concatenate([tr.actions for tr in trajs]).astype(np.int64),
        np.concatenate([tr.costs for tr in trajs]).astype(float),
        np.repeat(np.arange(len(trajs)), lengths),
        np.concatenate([np.arange(n) for n in lengths]),
        lengths,
    )
