"""Practical primal-dual trainer: sub-trajectories, critic baseline,
clipped step-wise divergence penalty and an entropy equality constraint.

Per iteration the student (sampled at the training temperature) generates N
trajectories; every visited state starts a sub-trajectory. The loss is

    mean_{j,t} log P(tau_{j,t}) (J_{j,t} - V(x_{j,t}))
        + lam (D_step - delta) + zeta (ent - delta_ent)

and its gradient is accumulated directly on the (S, A) logits table, then
pulled back through the network in a single backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from .divergence import (
    ClipConfig,
    apply_clip,
    entropy_rows,
    hellinger_rows,
    horizon_weights,
    kl_rows,
)
from .errors import ContractError
from .mdp import MdpSpec, Steps, as_table, flatten, greedy_rollout, sample_batch
from .policy import Adam, Network, Policy
from .traces import write_trace

TRACE_COLUMNS = (
    "iter",
    "mean_train_reward",
    "greedy_reward",
    "kl_step",
    "entropy",
    "lambda",
    "zeta",
    "loss_pg",
    "loss_kl",
    "loss_ent",
)


@dataclass(frozen=True)
class ZetaState:
    zeta: float = 1.0
    zeta_min: float = -5.0
    zeta_max: float = 5.0
    expansions: int = 0

    def __post_init__(self):
        if not self.zeta_min <= 0.0 <= self.zeta_max:
            raise ContractError("zeta interval must contain 0")
        if not self.zeta_min <= self.zeta <= self.zeta_max:
            raise ContractError(f"zeta {self.zeta} outside [{self.zeta_min}, {self.zeta_max}]")


def zeta_update(z: ZetaState, entropy_estimate: float, delta_ent: float, alpha3: float) -> ZetaState:
    """Projected ascent on ``ent - delta_ent``."""
    if alpha3 < 0:
        raise ContractError("step size must be non-negative")
    zeta = min(max(z.zeta + alpha3 * (entropy_estimate - delta_ent), z.zeta_min), z.zeta_max)
    return replace(z, zeta=zeta)


def expand_zeta_interval(z: ZetaState, constant: float) -> ZetaState:
    """Push whichever bound ``zeta`` sits on outward by ``constant``."""
    if not constant > 0:
        raise ContractError("expansion constant must be positive")
    if z.zeta >= z.zeta_max:
        return replace(z, zeta_max=z.zeta_max + constant, expansions=z.expansions + 1)
    if z.zeta <= z.zeta_min:
        return replace(z, zeta_min=z.zeta_min - constant, expansions=z.expansions + 1)
    return z


@dataclass(frozen=True)
class PracticalConfig:
    delta: float = 0.2
    delta_ent: float = 0.02
    clip: ClipConfig = field(default_factory=lambda: ClipConfig(enabled=False))
    direction: str = "forward"  # forward | reverse | hellinger
    normalize: str = "h-1"
    score: str = "suffix"  # suffix | step
    gamma: float = 1.0
    batch_size: int = 16
    iterations: int = 20000
    lr: float = 1e-3
    critic_lr: float = 1e-3
    dual_lr: float = 1e-3
    dual_lr_decay: float = 1.0
    temperature: float = 5.0
    reward_scale: float = 1.0
    value_scale: float = 100.0
    lambda_init: float = 1.0
    zeta_init: float = 1.0
    lambda_max: float = 10.0
    zeta_bounds: tuple[float, float] = (-5.0, 5.0)
    zeta_expand: float = 5.0
    boundary_window: int = 200
    boundary_tol: float = 0.01
    freeze_lambda: bool = False
    freeze_zeta: bool = False
    use_critic: bool = True
    critic_arch: str = "mlp(64,64)"
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ContractError("delta must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.direction not in ("forward", "reverse", "hellinger"):
            raise ContractError(f"unknown direction {self.direction!r}")
        if self.score not in ("suffix", "step"):
            raise ContractError(f"unknown score mode {self.score!r}")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError("gamma must lie in (0, 1]")
        horizon_weights(np.ones(1), self.normalize)


# ------------------------------------------------------------------ sub-trajectories


def group_cumsum(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Running sum restarted at every trajectory boundary."""
    c = np.cumsum(x)
    ends = np.cumsum(lengths)
    before = np.where(ends - lengths > 0, c[np.maximum(ends - lengths - 1, 0)], 0.0)
    return c - np.repeat(before, lengths)


def group_reverse_cumsum(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Suffix sums within each trajectory."""
    traj = np.repeat(np.arange(lengths.size), lengths)
    totals = np.bincount(traj, weights=x, minlength=lengths.size)
    return totals[traj] - group_cumsum(x, lengths) + x


def suffix_returns(steps: Steps, gamma: float) -> np.ndarray:
    if steps.costs.size == 0:
        return np.zeros(0)
    if gamma == 1.0:
        return group_reverse_cumsum(steps.costs, steps.lengths)
    out = np.empty_like(steps.costs)
    start = 0
    for n in steps.lengths:
        seg = steps.costs[start : start + n]
        out[start : start + n] = lfilter([1.0], [1.0, -gamma], seg[::-1])[::-1]
        start += n
    return out


class SubTrajectory(NamedTuple):
    origin: tuple[int, int]
    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    ret: float
    log_prob: float


@dataclass(frozen=True, eq=False)
class SubTrajectories:
    """One record per visited non-terminal state, stored column-wise."""

    steps: Steps
    returns: np.ndarray
    log_probs: np.ndarray

    def __len__(self) -> int:
        return self.returns.size

    def __getitem__(self, i: int) -> SubTrajectory:
        end = i - int(self.steps.t[i]) + int(self.steps.lengths[self.steps.traj[i]])
        return SubTrajectory(
            (int(self.steps.traj[i]), int(self.steps.t[i])),
            self.steps.states[i:end],
            self.steps.actions[i:end],
            self.steps.costs[i:end],
            float(self.returns[i]),
            float(self.log_probs[i]),
        )


def extract_subtrajectories(trajs, policy, gamma: float = 1.0) -> SubTrajectories:
    if not trajs:
        raise ContractError("need at least one trajectory")
    steps = flatten(trajs)
    table = as_table(policy)
    lp = np.log(table[steps.states, steps.actions]) if steps.states.size else np.zeros(0)
    suffix_lp = group_reverse_cumsum(lp, steps.lengths) if lp.size else lp
    return SubTrajectories(steps, suffix_returns(steps, gamma), suffix_lp)


# ------------------------------------------------------------------ critic


class Critic:
    """State-value network ``V(x) = value_scale * net(x)`` trained by Adam on MSE."""

    def __init__(self, network: Network, theta: np.ndarray, lr: float = 1e-3, value_scale: float = 100.0):
        self.network = network
        self.theta = np.array(theta, dtype=float)
        self.value_scale = value_scale
        self.opt = Adam(self.theta.size, lr)

    @classmethod
    def create(cls, state_count: int, arch="mlp(64,64)", rng=None, lr=1e-3, value_scale=100.0):
        net = Network(arch, state_count, 1)
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(net, net.init(rng), lr, value_scale)

    def copy(self) -> Critic:
        c = Critic(self.network, self.theta.copy(), self.opt.lr, self.value_scale)
        c.opt.m, c.opt.v, c.opt.t = self.opt.m.copy(), self.opt.v.copy(), self.opt.t
        return c

    def values(self) -> np.ndarray:
        return self.value_scale * self.network.forward(self.theta)[:, 0]

    def mse(self, states: np.ndarray, targets: np.ndarray) -> float:
        return float(np.mean((self.values()[states] - targets) ** 2))

    def gradient(self, states: np.ndarray, targets: np.ndarray) -> np.ndarray:
        resid = self.values()[states] - targets
        g = np.zeros((self.network.in_dim, 1))
        np.add.at(g[:, 0], states, 2.0 * resid / resid.size)
        return self.network.vjp(self.theta, g * self.value_scale)


def critic_update(critic: Critic, subtrajs: SubTrajectories, step_size: float | None = None) -> Critic:
    """One Adam step of the critic on ``mean (V(x_{j,t}) - J_{j,t})^2`` (in place)."""
    if len(subtrajs) == 0:
        raise ContractError("need at least one sub-trajectory")
    if step_size is not None:
        critic.opt.lr = step_size
    grad = critic.gradient(subtrajs.steps.states, subtrajs.returns)
    critic.theta = critic.opt.step(critic.theta, grad)
    return critic


# ------------------------------------------------------------------ loss


class LossComponents(NamedTuple):
    pg: float
    kl: float
    ent: float
    kl_estimate: float
    entropy: float


def _divergence_and_grad(teacher_rows, student_rows, direction: str, temperature: float):
    """Per-row divergence and its gradient wrt the student's logits."""
    S = student_rows
    if direction == "forward":
        d = kl_rows(teacher_rows, S)
        g = S - teacher_rows
    elif direction == "reverse":
        d = kl_rows(S, teacher_rows)
        with np.errstate(divide="ignore"):
            g = S * (np.log(S) - np.log(teacher_rows) - d[:, None])
    else:
        d = hellinger_rows(teacher_rows, S)
        bc = np.sum(np.sqrt(teacher_rows * S), axis=1)
        dbc = 0.5 * (np.sqrt(teacher_rows * S) - S * bc[:, None])
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(d[:, None] > 0, -dbc / (2.0 * d[:, None]), 0.0)
    return d, g / temperature


def _entropy_and_grad(S: np.ndarray, temperature: float):
    h = entropy_rows(S)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(S > 0, np.log(S), 0.0)
    return h, -S * (logs + h[:, None]) / temperature


def compute_loss(
    subtrajs: SubTrajectories,
    student: Policy,
    teacher,
    critic: Critic | None,
    lam: float,
    zeta: float,
    config: PracticalConfig,
):
    """Loss value, its components, and the gradient wrt ``student.theta``.

    Advantages and clip thresholds are treated as constants. With
    ``teacher=None`` the divergence term is dropped (plain actor-critic).
    """
    steps = subtrajs.steps
    n = len(subtrajs)
    N = steps.lengths.size
    S = student.table()
    g_logits = np.zeros_like(S)
    if n == 0:
        return 0.0, LossComponents(0.0, -lam * config.delta, -zeta * config.delta_ent, 0.0, 0.0), np.zeros_like(student.theta)
    states, actions = steps.states, steps.actions
    rows = S[states]

    # policy-gradient term
    baseline = critic.values()[states] if critic is not None else 0.0
    adv = subtrajs.returns - baseline
    if config.score == "suffix":
        loss_pg = float(np.mean(subtrajs.log_probs * adv))
        w = group_cumsum(adv, steps.lengths) / n
    else:
        loss_pg = float(np.mean(np.log(rows[np.arange(n), actions]) * adv))
        w = adv / n
    np.add.at(g_logits, (states, actions), w / student.temperature)
    np.add.at(g_logits, states, -(w / student.temperature)[:, None] * rows)

    norm = horizon_weights(steps.lengths, config.normalize)[steps.traj] / N

    # divergence term
    kl_est = 0.0
    if teacher is not None:
        d, dg = _divergence_and_grad(as_table(teacher)[states], rows, config.direction, student.temperature)
        d_clipped, live = apply_clip(d, steps.t, config.clip)
        kl_est = float(np.sum(norm * d_clipped))
        if lam != 0.0:
            np.add.at(g_logits, states, (lam * norm * live)[:, None] * dg)

    # entropy term
    h, hg = _entropy_and_grad(rows, student.temperature)
    ent = float(np.sum(norm * h))
    if zeta != 0.0:
        np.add.at(g_logits, states, (zeta * norm)[:, None] * hg)

    comps = LossComponents(loss_pg, lam * (kl_est - config.delta), zeta * (ent - config.delta_ent), kl_est, ent)
    return comps.pg + comps.kl + comps.ent, comps, student.backward(g_logits)


# ------------------------------------------------------------------ training loop


@dataclass
class PracticalResult:
    policy: Policy
    critic: Critic | None
    lam: float
    zeta: float
    lam_max: float
    zeta_state: ZetaState
    trace: list[dict]


def run_practical(
    spec: MdpSpec,
    teacher,
    init: Policy,
    config: PracticalConfig,
    critic: Critic | None = None,
    trace_path=None,
    callback=None,
) -> PracticalResult:
    """Full training loop; ``init`` is re-tempered to ``config.temperature``."""
    rng = np.random.default_rng(config.seed)
    student = init.with_temperature(config.temperature)
    if config.use_critic:
        critic = (
            critic.copy()
            if critic is not None
            else Critic.create(spec.state_count, config.critic_arch, np.random.default_rng(config.seed + 7919), config.critic_lr, config.value_scale)
        )
        critic.opt.lr = config.critic_lr
    else:
        critic = None
    opt = Adam(student.theta.size, config.lr)
    lam = 0.0 if config.freeze_lambda and config.lambda_init == 0 else config.lambda_init
    lam_max = max(config.lambda_max, lam)
    zeta_state = ZetaState(config.zeta_init, *config.zeta_bounds)
    lam_edge = zeta_edge = 0
    dual_lr = config.dual_lr
    trace = []
    for k in range(config.iterations):
        trajs = sample_batch(spec, student, config.batch_size, rng)
        sub = extract_subtrajectories(trajs, student, config.gamma)
        if config.reward_scale != 1.0:
            sub = replace(sub, returns=sub.returns * config.reward_scale)
        loss, comps, grad = compute_loss(sub, student, teacher, critic, lam, zeta_state.zeta, config)
        student = student.with_theta(opt.step(student.theta, grad))
        if critic is not None and len(sub):
            critic_update(critic, sub)
        if not config.freeze_lambda:
            lam = min(max(lam + dual_lr * (comps.kl_estimate - config.delta), 0.0), lam_max)
            lam_edge = lam_edge + 1 if lam >= (1 - config.boundary_tol) * lam_max else 0
            if lam_edge >= config.boundary_window:
                lam_max, lam_edge = 2.0 * lam_max, 0
        if not config.freeze_zeta:
            zeta_state = zeta_update(zeta_state, comps.entropy, config.delta_ent, dual_lr)
            at_edge = zeta_state.zeta >= zeta_state.zeta_max or zeta_state.zeta <= zeta_state.zeta_min
            zeta_edge = zeta_edge + 1 if at_edge else 0
            if zeta_edge >= config.boundary_window:
                zeta_state, zeta_edge = expand_zeta_interval(zeta_state, config.zeta_expand), 0
        dual_lr *= config.dual_lr_decay
        row = {
            "iter": k,
            "mean_train_reward": -float(np.mean([t.costs.sum() for t in trajs])),
            "greedy_reward": greedy_rollout(spec, student).total_reward,
            "kl_step": comps.kl_estimate,
            "entropy": comps.entropy,
            "lambda": lam,
            "zeta": zeta_state.zeta,
            "loss_pg": comps.pg,
            "loss_kl": comps.kl,
            "loss_ent": comps.ent,
        }
        trace.append(row)
        if callback is not None:
            callback(k, row, student)
    if trace_path is not None:
        write_trace(trace, trace_path, TRACE_COLUMNS)
    return PracticalResult(student, critic, lam, zeta_state.zeta, lam_max, zeta_state, trace)

