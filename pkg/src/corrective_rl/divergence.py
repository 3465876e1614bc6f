"""KL, entropy and Hellinger estimators at the step and trajectory level.

Per-state divergences are written ``kl(p || q)``; the step-wise estimators take
a ``direction``: ``forward`` means ``KL(teacher || student)`` at each visited
state, ``reverse`` means ``KL(student || teacher)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import oracle
from .errors import ContractError, HighVarianceWarning, InfiniteDivergenceError
from .mdp import MdpSpec, Trajectory, as_table, flatten

LOG_RATIO_BOUND = 50.0
SEMANTICS = ("cap", "literal_max")
GROUPINGS = ("batch", "timestep")
NORMALIZATIONS = ("h-1", "h", "none")


@dataclass(frozen=True)
class ClipConfig:
    rho: float = 100.0
    enabled: bool = True
    semantics: str = "cap"
    grouping: str = "batch"

    def __post_init__(self):
        if not 0.0 < self.rho <= 100.0:
            raise ContractError(f"rho must lie in (0, 100], got {self.rho}")
        if self.semantics not in SEMANTICS:
            raise ContractError(f"unknown clip semantics {self.semantics!r}")
        if self.grouping not in GROUPINGS:
            raise ContractError(f"unknown clip grouping {self.grouping!r}")

    @property
    def active(self) -> bool:
        return self.enabled and not (self.rho == 100.0 and self.semantics == "cap")


NO_CLIP = ClipConfig(enabled=False)


# ------------------------------------------------------------------ per state


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``sum_a p log(p/q)`` with ``0 log(0/q) = 0``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any((p > 0) & (q <= 0)):
        raise InfiniteDivergenceError("p puts mass on an action q never takes")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def kl_step_state(p_teacher, p_student) -> float:
    """``KL(p_teacher || p_student)`` for one state."""
    return float(kl_rows(p_teacher, p_student))


def entropy_rows(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)


def hellinger_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.asarray(p, dtype=float)) - np.sqrt(np.asarray(q, dtype=float))
    return np.sqrt(np.clip(0.5 * np.sum(d * d, axis=-1), 0.0, 1.0))


def hellinger_step(p, q) -> float:
    """``sqrt(0.5 sum_a (sqrt p - sqrt q)^2)``, always in ``[0, 1]``."""
    return float(hellinger_rows(p, q))


def step_divergence_rows(teacher_rows, student_rows, direction: str = "forward") -> np.ndarray:
    if direction == "forward":
        return kl_rows(teacher_rows, student_rows)
    if direction == "reverse":
        return kl_rows(student_rows, teacher_rows)
    if direction == "hellinger":
        return hellinger_rows(teacher_rows, student_rows)
    raise ContractError(f"unknown direction {direction!r}")


# ------------------------------------------------------------------ clipping


def nearest_rank(values, rho: float) -> float:
    """Nearest-rank percentile: the ``ceil(rho/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ContractError("percentile of an empty set")
    k = max(1, math.ceil(rho / 100.0 * v.size))
    return float(v[min(k, v.size) - 1])


def percentile_clip(values, rho: float, semantics: str = "cap") -> np.ndarray:
    """Cap (``min``) or, with ``literal_max``, floor (``max``) at the batch percentile."""
    if not 0.0 < rho <= 100.0:
        raise ContractError(f"rho must lie in (0, 100], got {rho}")
    v = np.asarray(values, dtype=float)
    thr = nearest_rank(v, rho)
    if semantics == "cap":
        return np.minimum(v, thr)
    if semantics == "literal_max":
        return np.maximum(v, thr)
    raise ContractError(f"unknown clip semantics {semantics!r}")


def clip_thresholds(values: np.ndarray, t: np.ndarray, clip: ClipConfig) -> np.ndarray:
    """Per-entry percentile threshold, grouped by batch or by time step."""
    if clip.grouping == "batch":
        return np.full(values.shape, nearest_rank(values, clip.rho))
    thr = np.empty(values.shape)
    for step in np.unique(t):
        sel = t == step
        thr[sel] = nearest_rank(values[sel], clip.rho)
    return thr


def apply_clip(values: np.ndarray, t: np.ndarray, clip: ClipConfig | None):
    """Clipped values and a mask of entries that still carry gradient."""
    if clip is None or not clip.active or values.size == 0:
        return values, np.ones(values.shape, dtype=bool)
    thr = clip_thresholds(values, t, clip)
    if clip.semantics == "cap":
        return np.minimum(values, thr), values <= thr
    return np.maximum(values, thr), values >= thr


def horizon_weights(lengths: np.ndarray, normalize="h-1") -> np.ndarray:
    """Per-trajectory normalizer; horizons too short to normalize fall back to 1."""
    if normalize is True:
        normalize = "h-1"
    elif normalize is False or normalize is None:
        normalize = "none"
    lengths = np.asarray(lengths, dtype=float)
    if normalize == "h-1":
        return np.where(lengths >= 2, 1.0 / np.maximum(lengths - 1, 1), 1.0)
    if normalize == "h":
        return np.where(lengths >= 1, 1.0 / np.maximum(lengths, 1), 1.0)
    if normalize == "none":
        return np.ones_like(lengths)
    raise ContractError(f"unknown normalization {normalize!r}")


# ------------------------------------------------------------------ batch estimators


def _policy_log_probs(policy, trajs: list[Trajectory]) -> np.ndarray:
    table = as_table(policy)
    steps = flatten(trajs)
    with np.errstate(divide="ignore"):
        lp = np.log(table[steps.states, steps.actions])
    return np.bincount(steps.traj, weights=lp, minlength=len(trajs)) if lp.size else np.zeros(len(trajs))


def trajectory_log_ratios(trajs, student, teacher) -> tuple[np.ndarray, np.ndarray]:
    """Per-trajectory policy log-probabilities ``(log P_student, log P_teacher)``."""
    return _policy_log_probs(student, trajs), _policy_log_probs(teacher, trajs)


def kl_trajectory_mc_reverse(trajs, student, teacher) -> float:
    """``mean_j [log P_student(tau_j) - log P_teacher(tau_j)]`` over student samples."""
    if not trajs:
        raise ContractError("need at least one trajectory")
    ls, lt = trajectory_log_ratios(trajs, student, teacher)
    if np.any(np.isneginf(lt)):
        raise InfiniteDivergenceError("student sampled a step the teacher never takes")
    return float(np.mean(ls - lt))


def importance_terms(ls: np.ndarray, lt: np.ndarray, bound: float = LOG_RATIO_BOUND):
    """``(IS, log(P_teacher/P_student))`` per trajectory; IS is 0 off the teacher's support."""
    off = np.isneginf(lt)
    r = np.where(off, 0.0, lt - ls)
    if np.any(r > bound):
        warnings.warn(
            f"importance log-ratio {float(r.max()):.1f} exceeds {bound}; estimate has very high variance",
            HighVarianceWarning,
            stacklevel=3,
        )
    w = np.where(off, 0.0, np.exp(r))
    return w, r


def kl_trajectory_mc_forward(trajs, student, teacher, log_ratio_bound: float = LOG_RATIO_BOUND) -> float:
    """``mean_j IS_j log(P_teacher/P_student)(tau_j)`` over student samples."""
    if not trajs:
        raise ContractError("need at least one trajectory")
    ls, lt = trajectory_log_ratios(trajs, student, teacher)
    w, r = importance_terms(ls, lt, log_ratio_bound)
    return float(np.mean(w * r))


def step_values(trajs, student, teacher, direction: str = "forward"):
    """Per visited step divergence values plus the flattened batch."""
    steps = flatten(trajs)
    vals = step_divergence_rows(as_table(teacher)[steps.states], as_table(student)[steps.states], direction)
    return vals, steps


def kl_step_estimate(
    trajs, student, teacher, clip: ClipConfig | None = None, normalize_by_horizon="h-1", direction: str = "forward"
) -> float:
    """``mean_j norm_j sum_t clip(kl(x_{j,t}))`` over visited states."""
    if not trajs:
        raise ContractError("need at least one trajectory")
    vals, steps = step_values(trajs, student, teacher, direction)
    vals, _ = apply_clip(vals, steps.t, clip)
    norm = horizon_weights(steps.lengths, normalize_by_horizon)
    per_traj = np.bincount(steps.traj, weights=vals, minlength=len(trajs)) if vals.size else np.zeros(len(trajs))
    return float(np.mean(norm * per_traj))


def entropy_estimate(trajs, student, normalize_by_horizon="h-1") -> float:
    """``mean_j norm_j sum_t H(pi(. | x_{j,t}))``."""
    if not trajs:
        raise ContractError("need at least one trajectory")
    steps = flatten(trajs)
    ent = entropy_rows(as_table(student)[steps.states])
    norm = horizon_weights(steps.lengths, normalize_by_horizon)
    per_traj = np.bincount(steps.traj, weights=ent, minlength=len(trajs)) if ent.size else np.zeros(len(trajs))
    return float(np.mean(norm * per_traj))


# ------------------------------------------------------------------ exact forms


def kl_trajectory_exact(spec: MdpSpec, p, q, horizon=None) -> float:
    """``KL(P_p || P_q)`` between trajectory distributions, by enumeration."""
    return oracle.exact_kl(spec, p, q, horizon)


def exact_step_kl(spec: MdpSpec, teacher, student, horizon=None, normalization: str = "expected_length") -> float:
    """``sum_x d_teacher(x) KL(teacher(x) || student(x))`` over non-terminal states."""
    d = oracle.exact_state_distribution(spec, teacher, horizon, normalization)
    kl = kl_rows(as_table(teacher), as_table(student))
    kl[spec.terminal] = 0.0
    return float(np.dot(d, kl))


def check_step_bound(spec: MdpSpec, teacher, student, horizon=None, normalization: str = "expected_length"):
    """Compare ``KL(P_teacher || P_student)`` with ``E_teacher[H] * step KL``.

    With the occupancy normalized by ``E[H]`` the right side is the expected
    sum of per-step KLs along teacher trajectories, which equals the
    trajectory KL (environment factors cancel step by step). Normalizing by
    the horizon cap instead shrinks the right side by ``E[H] / H_max``, so the
    comparison fails whenever trajectories can end early.
    """
    lhs = oracle.exact_kl(spec, teacher, student, horizon)
    eh = oracle.expected_length(spec, teacher, horizon)
    rhs = eh * exact_step_kl(spec, teacher, student, horizon, normalization)
    return lhs, rhs, bool(lhs <= rhs + 1e-9)
