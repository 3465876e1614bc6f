"""Primal-dual policy gradient with two-timescale projected updates.

The student minimizes expected discounted cost subject to a trajectory KL
bound, via the Lagrangian ``V(theta) + lam (KL - delta)``. Policy parameters
take projected gradient steps on a fast schedule, the multiplier takes
projected ascent steps on a slower one, and ``lam_max`` doubles whenever the
multiplier sits at its upper bound for a full window.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .divergence import LOG_RATIO_BOUND, importance_terms, kl_trajectory_mc_reverse, trajectory_log_ratios
from .errors import ContractError, InfiniteDivergenceError
from .mdp import MdpSpec, flatten, sample_batch
from .policy import DEFAULT_RADIUS, Policy, project_theta, score_gradient
from .traces import write_trace

TRACE_COLUMNS = ("iter", "mean_reward", "kl_estimate", "lambda", "grad_norm", "lambda_max")


@dataclass(frozen=True)
class StepSchedule:
    """``alpha(k) = a / (1 + k) ** exponent``."""

    a: float
    exponent: float
    kind: str = "polynomial"

    def __post_init__(self):
        if self.kind != "polynomial":
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if not self.a > 0:
            raise ContractError("schedule scale must be positive")

    def __call__(self, k: int) -> float:
        return self.a / (1.0 + k) ** self.exponent


def check_two_timescale(theta: StepSchedule, lam: StepSchedule) -> None:
    """Both sums diverge, both squared sums converge, and ``lam`` decays faster."""
    for name, s in (("theta", theta), ("lambda", lam)):
        if not 0.5 < s.exponent <= 1.0:
            raise ContractError(f"{name} schedule exponent must lie in (0.5, 1], got {s.exponent}")
    if not lam.exponent > theta.exponent:
        raise ContractError("lambda schedule must decay strictly faster than the theta schedule")


@dataclass(frozen=True)
class DualState:
    lam: float = 0.0
    lam_max: float = 10.0
    doubling_count: int = 0

    def __post_init__(self):
        if not self.lam_max > 0:
            raise ContractError("lam_max must be positive")
        if not 0.0 <= self.lam <= self.lam_max:
            raise ContractError(f"lambda {self.lam} outside [0, {self.lam_max}]")


@dataclass(frozen=True)
class PdpgConfig:
    delta: float
    gamma: float = 1.0
    batch_size: int = 16
    kl_direction: str = "reverse"
    max_iters: int = 2000
    theta_schedule: StepSchedule = field(default_factory=lambda: StepSchedule(0.01, 0.6))
    lambda_schedule: StepSchedule = field(default_factory=lambda: StepSchedule(0.1, 0.9))
    seed: int = 0
    theta_radius: float = DEFAULT_RADIUS
    lambda_max_init: float = 10.0
    lambda_init: float = 0.0
    freeze_lambda: bool = False
    boundary_window: int = 200
    boundary_tol: float = 0.01
    converge_window: int = 200
    theta_tol: float = 1e-5
    lambda_tol: float = 1e-6
    log_ratio_bound: float = LOG_RATIO_BOUND

    def __post_init__(self):
        if self.delta < 0:
            raise ContractError("delta must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.kl_direction not in ("reverse", "forward"):
            raise ContractError(f"unknown KL direction {self.kl_direction!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError("gamma must lie in (0, 1]")
        check_two_timescale(self.theta_schedule, self.lambda_schedule)


def _returns(trajs, gamma: float) -> np.ndarray:
    if gamma == 1.0:
        return np.array([float(np.sum(t.costs)) for t in trajs])
    return np.array([float(np.sum(t.costs * gamma ** np.arange(t.length))) for t in trajs])


def _trajectory_score(trajs, student: Policy, weights: np.ndarray) -> np.ndarray:
    """``sum_j weights[j] * grad log P_theta(tau_j)``."""
    steps = flatten(trajs)
    return score_gradient(student, steps.states, steps.actions, weights[steps.traj])


def lagrangian_grad_theta(trajs, student: Policy, teacher, lam: float, gamma: float = 1.0) -> np.ndarray:
    """``mean_j grad log P(tau_j) (J_j + lam log(P_theta/P_phi)(tau_j) + lam)``."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    J = _returns(trajs, gamma)
    if lam == 0:
        return _trajectory_score(trajs, student, J / len(trajs))
    ls, lt = trajectory_log_ratios(trajs, student, teacher)
    if np.any(np.isneginf(lt)):
        raise InfiniteDivergenceError("student sampled a step the teacher never takes")
    return _trajectory_score(trajs, student, (J + lam * (ls - lt) + lam) / len(trajs))


def theta_update(theta: np.ndarray, grad: np.ndarray, alpha1: float, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    if alpha1 < 0:
        raise ContractError("step size must be non-negative")
    return project_theta(theta - alpha1 * grad, radius)


def lambda_update(dual: DualState, kl_estimate: float, delta: float, alpha2: float) -> DualState:
    if alpha2 < 0:
        raise ContractError("step size must be non-negative")
    lam = min(max(dual.lam + alpha2 * (kl_estimate - delta), 0.0), dual.lam_max)
    return replace(dual, lam=lam)


def forward_updates(trajs, student: Policy, teacher, dual: DualState, config: PdpgConfig):
    """Importance-weighted forward-KL rules.

    Returns ``(theta_grad, lambda_increment)`` where
    ``theta_grad = mean_j grad log P (J + lam IS log(P_phi/P_theta) - lam)`` and
    ``lambda_increment = mean_j IS log(P_phi/P_theta) - delta``.
    """
    J = _returns(trajs, config.gamma)
    ls, lt = trajectory_log_ratios(trajs, student, teacher)
    w, r = importance_terms(ls, lt, config.log_ratio_bound)
    kl = w * r
    grad = _trajectory_score(trajs, student, (J + dual.lam * kl - dual.lam) / len(trajs))
    return grad, float(np.mean(kl)) - config.delta


@dataclass
class PdpgResult:
    policy: Policy
    dual: DualState
    trace: list[dict]
    converged: bool
    iterations: int


def run_pdpg(spec: MdpSpec, teacher, init: Policy, config: PdpgConfig, trace_path=None) -> PdpgResult:
    """Sample, estimate, take a theta step then a lambda step, until converged or out of budget."""
    rng = np.random.default_rng(config.seed)
    student = init.with_theta(project_theta(np.array(init.theta), config.theta_radius))
    dual = DualState(min(config.lambda_init, config.lambda_max_init), config.lambda_max_init)
    trace: list[dict] = []
    history = deque(maxlen=config.converge_window + 1)
    at_bound = 0
    converged = False
    k = 0
    for k in range(config.max_iters):
        trajs = sample_batch(spec, student, config.batch_size, rng)
        if config.kl_direction == "reverse":
            kl = kl_trajectory_mc_reverse(trajs, student, teacher)
            grad = lagrangian_grad_theta(trajs, student, teacher, dual.lam, config.gamma)
            increment = kl - config.delta
        else:
            grad, increment = forward_updates(trajs, student, teacher, dual, config)
            kl = increment + config.delta
        student = student.with_theta(theta_update(student.theta, grad, config.theta_schedule(k), config.theta_radius))
        if not config.freeze_lambda:
            dual = lambda_update(dual, increment + config.delta, config.delta, config.lambda_schedule(k))
        if dual.lam >= (1.0 - config.boundary_tol) * dual.lam_max:
            at_bound += 1
            if at_bound >= config.boundary_window:
                dual = replace(dual, lam_max=2.0 * dual.lam_max, doubling_count=dual.doubling_count + 1)
                at_bound = 0
        else:
            at_bound = 0
        trace.append(
            {
                "iter": k,
                "mean_reward": -float(np.mean([t.costs.sum() for t in trajs])),
                "kl_estimate": float(kl),
                "lambda": dual.lam,
                "grad_norm": float(np.linalg.norm(grad)),
                "lambda_max": dual.lam_max,
            }
        )
        history.append((student.theta, dual.lam))
        if len(history) == history.maxlen:
            old_theta, old_lam = history[0]
            if (
                np.max(np.abs(student.theta - old_theta)) < config.theta_tol
                and abs(dual.lam - old_lam) < config.lambda_tol
            ):
                converged = True
                break
    if trace_path is not None:
        write_trace(trace, trace_path, TRACE_COLUMNS)
    return PdpgResult(student, dual, trace, converged, k + 1)

