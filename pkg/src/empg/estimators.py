"""Policy-gradient estimators over a shaped mini-batch.

``empg`` is the weight-free off-policy estimator: the mean of
grad log P_theta(tau) * advantage over buffer samples. ``importance-weighted``
multiplies each term by P_theta(tau) / P_theta*(tau), which makes it unbiased
for the on-policy gradient. ``clipped`` is the PPO-style pessimistic surrogate.
``kl-penalty`` is the gradient of -beta * KL(P_theta || P_ref).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, InvalidInputError, NumericalError
from .policy import PolicyParams, Trajectory, token_log_probs, trajectory_log_prob, weighted_grad
from .shaping import ShapedBatch
from .tasks import TaskSpec, completion_trajectories

ESTIMATORS = ("empg", "importance-weighted", "clipped")
KL_MODES = ("exact", "monte-carlo")
RATIO_LEVELS = ("trajectory", "token")


@dataclass(frozen=True)
class GradientEstimate:
    grad: np.ndarray
    estimator_kind: str
    theta_star_id: str | None
    batch_size: int
    weight_stats: tuple[float, float, float] | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise NumericalError(f"{self.estimator_kind} gradient has non-finite entries")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


# per-trajectory coefficients -------------------------------------------------
# Each estimator is sum_i coef_i * grad log P_theta(tau_i); these helpers return
# the coefficients so the oracle can take exact expectations of the same integrand.

def empg_coefs(advantages: np.ndarray) -> np.ndarray:
    return np.asarray(advantages, dtype=np.float64)


def importance_weights(logp: np.ndarray, logp_star: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        w = np.exp(np.asarray(logp) - np.asarray(logp_star))
    bad = np.flatnonzero(~np.isfinite(w))
    if len(bad):
        raise NumericalError(f"non-finite importance weight at batch position {bad[0]}", int(bad[0]))
    return w


def clipped_coefs(ratios: np.ndarray, advantages: np.ndarray, clip_eps: float) -> np.ndarray:
    """d/dtheta of min(r A, clip(r) A) expressed as a coefficient on grad log P.

    The unclipped branch contributes r * A. Once r reaches a band edge on the
    side where the clipped term is the minimum, the surrogate is constant in
    theta and contributes nothing (edges included).
    """
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    lo, hi = 1.0 - clip_eps, 1.0 + clip_eps
    clipped = np.clip(r, lo, hi)
    active = ((r > lo) & (r < hi)) | (r * a < clipped * a)
    return np.where(active, r * a, 0.0)


def _check_batch(batch: ShapedBatch, buffer) -> list[Trajectory]:
    n = len(buffer)
    if any(not 0 <= i < n for i in batch.trajectory_refs):
        raise InvalidInputError("batch refers to trajectories outside the buffer")
    trajs = [buffer[i] for i in batch.trajectory_refs]
    raw = np.array([t.raw_reward for t in trajs])
    if not np.array_equal(raw, batch.raw_rewards):
        raise InvalidInputError("batch rewards do not match the buffer")
    return trajs


def _check_star(params_star: PolicyParams, buffer) -> None:
    if params_star.checkpoint_id() != buffer.theta_star_id:
        raise ContractViolation(
            f"buffer was sampled under {buffer.theta_star_id}, not {params_star.checkpoint_id()}")


def _stats(w: np.ndarray) -> tuple[float, float, float]:
    return float(w.min()), float(w.max()), float(w.mean())


def empg_gradient(params: PolicyParams, batch: ShapedBatch, buffer) -> GradientEstimate:
    trajs = _check_batch(batch, buffer)
    coefs = empg_coefs(batch.advantages) / len(trajs)
    return GradientEstimate(weighted_grad(params, trajs, coefs), "empg", buffer.theta_star_id, len(trajs))


def importance_weighted_gradient(params: PolicyParams, params_star: PolicyParams, batch: ShapedBatch,
                                 buffer) -> GradientEstimate:
    _check_star(params_star, buffer)
    trajs = _check_batch(batch, buffer)
    logp = np.array([trajectory_log_prob(params, t) for t in trajs])
    logp_star = np.array([trajectory_log_prob(params_star, t) for t in trajs])
    w = importance_weights(logp, logp_star)
    coefs = w * np.asarray(batch.advantages) / len(trajs)
    return GradientEstimate(weighted_grad(params, trajs, coefs), "importance-weighted",
                            buffer.theta_star_id, len(trajs), _stats(w))


def clipped_gradient(params: PolicyParams, params_star: PolicyParams, batch: ShapedBatch, buffer,
                     clip_eps: float = 0.2, ratio_level: str = "trajectory") -> GradientEstimate:
    if not 0 < clip_eps < 1:
        raise InvalidInputError(f"clip_eps must lie in (0, 1), got {clip_eps}")
    if ratio_level not in RATIO_LEVELS:
        raise InvalidInputError(f"ratio_level must be one of {RATIO_LEVELS}")
    _check_star(params_star, buffer)
    trajs = _check_batch(batch, buffer)
    n = len(trajs)
    adv = np.asarray(batch.advantages)
    if ratio_level == "trajectory":
        logp = np.array([trajectory_log_prob(params, t) for t in trajs])
        logp_star = np.array([trajectory_log_prob(params_star, t) for t in trajs])
        w = importance_weights(logp, logp_star)
        coefs = clipped_coefs(w, adv, clip_eps) / n
        grad = weighted_grad(params, trajs, coefs)
        stats = _stats(w)
    else:
        step_coefs, all_w = [], []
        for i, t in enumerate(trajs):
            try:
                w = importance_weights(token_log_probs(params, t), token_log_probs(params_star, t))
            except NumericalError as exc:
                raise NumericalError(f"non-finite token-level weight in trajectory {i}", i) from exc
            step_coefs.append(clipped_coefs(w, np.full(len(w), adv[i]), clip_eps) / n)
            all_w.append(w)
        grad = weighted_grad(params, trajs, np.ones(n), step_coefs=step_coefs)
        flat = np.concatenate(all_w) if any(len(w) for w in all_w) else np.ones(1)
        stats = _stats(flat)
    return GradientEstimate(grad, "clipped", buffer.theta_star_id, n, stats)


def data_gradient(kind: str, params: PolicyParams, params_star: PolicyParams, batch: ShapedBatch, buffer,
                  clip_eps: float = 0.2, ratio_level: str = "trajectory") -> GradientEstimate:
    if kind == "empg":
        return empg_gradient(params, batch, buffer)
    if kind == "importance-weighted":
        return importance_weighted_gradient(params, params_star, batch, buffer)
    if kind == "clipped":
        return clipped_gradient(params, params_star, batch, buffer, clip_eps, ratio_level)
    raise InvalidInputError(f"unknown estimator {kind!r}; known: {ESTIMATORS}")


def kl_integrand_coefs(params: PolicyParams, params_ref: PolicyParams,
                       trajs: Sequence[Trajectory]) -> np.ndarray:
    return np.array([trajectory_log_prob(params, t) - trajectory_log_prob(params_ref, t) for t in trajs])


def kl_penalty_gradient(params: PolicyParams, params_ref: PolicyParams, task: TaskSpec | None, beta: float,
                        mode: str = "exact", buffer=None, indices: Sequence[int] | None = None) -> GradientEstimate:
    """Gradient of -beta * KL(P_theta || P_ref), averaged over queries.

    Uses grad KL = E_theta[grad log P_theta * (log P_theta - log P_ref)]; the
    extra E[grad log P_theta] term vanishes. Exact mode enumerates the task's
    query set; monte-carlo mode averages the integrand over buffer samples.
    """
    if beta < 0:
        raise InvalidInputError("beta must be nonnegative")
    if mode not in KL_MODES:
        raise InvalidInputError(f"mode must be one of {KL_MODES}")
    if beta == 0:
        return GradientEstimate(np.zeros(params.param_count), "kl-penalty", None, 0)
    if mode == "exact":
        if task is None:
            raise InvalidInputError("exact KL gradient needs a task")
        total = np.zeros(params.param_count)
        for q in task.queries:
            trajs = completion_trajectories(task, q)
            logp = np.array([trajectory_log_prob(params, t) for t in trajs])
            logp_ref = np.array([trajectory_log_prob(params_ref, t) for t in trajs])
            total += weighted_grad(params, trajs, np.exp(logp) * (logp - logp_ref))
        grad = -beta * total / len(task.queries)
        return GradientEstimate(grad, "kl-penalty", None, 0)
    if buffer is None:
        raise InvalidInputError("monte-carlo KL gradient needs a buffer")
    idx = range(len(buffer)) if indices is None else indices
    trajs = [buffer[i] for i in idx]
    if not trajs:
        raise InvalidInputError("empty batch")
    coefs = kl_integrand_coefs(params, params_ref, trajs)
    grad = -beta * weighted_grad(params, trajs, coefs / len(trajs))
    return GradientEstimate(grad, "kl-penalty", buffer.theta_star_id, len(trajs))
