"""Exhaustive-enumeration ground truth.

Everything here sums over the complete (rationale, answer) space of each
query, so objectives, gradients and estimator expectations are exact up to
floating-point summation. Queries are weighted uniformly over ``query_set``
(the task's full query set by default).

Exact gradients are built directly from the score-function identity over
enumerated probabilities; they never call into the estimators.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import CapacityError, InvalidInputError
from .estimators import ESTIMATORS, clipped_coefs, kl_penalty_gradient
from .policy import (PolicyParams, Trajectory, grad_trajectory_log_prob, log_softmax,
                     sample_trajectory, trajectory_log_prob, trajectory_steps)
from .shaping import shape_rewards_rows
from .tasks import ENUMERATION_BOUND, TaskSpec, completion_trajectories, reward

BATCH_K_MAX = 3
BATCH_BOUND = 2 * 10**6


@dataclass
class EnumeratedSpace:
    """All completions of one query, with step indices laid out for vectorized scoring."""

    query: tuple[int, ...]
    trajectories: list[Trajectory]
    rewards: np.ndarray
    ctx: np.ndarray
    tok: np.ndarray
    seg: np.ndarray

    def __len__(self) -> int:
        return len(self.trajectories)

    def log_probs(self, params: PolicyParams) -> np.ndarray:
        lp = log_softmax(params.logits[self.ctx])[np.arange(len(self.tok)), self.tok]
        return np.bincount(self.seg, weights=lp, minlength=len(self))

    def probabilities(self, params: PolicyParams) -> np.ndarray:
        return np.exp(self.log_probs(params))

    def total_probability(self, params: PolicyParams) -> float:
        return float(self.probabilities(params).sum())

    def grad(self, params: PolicyParams, coefs: np.ndarray) -> np.ndarray:
        """sum_tau coefs[tau] * grad log P_theta(tau)."""
        w = np.asarray(coefs, dtype=np.float64)[self.seg]
        G = np.zeros_like(params.logits)
        probs = np.exp(log_softmax(params.logits[self.ctx]))
        np.add.at(G, (self.ctx, self.tok), w)
        np.add.at(G, self.ctx, -w[:, None] * probs)
        return G.ravel()

    def step_grad(self, params: PolicyParams, step_coefs: np.ndarray) -> np.ndarray:
        G = np.zeros_like(params.logits)
        probs = np.exp(log_softmax(params.logits[self.ctx]))
        np.add.at(G, (self.ctx, self.tok), step_coefs)
        np.add.at(G, self.ctx, -step_coefs[:, None] * probs)
        return G.ravel()


_SPACES: dict = {}


def enumerate_space(params: PolicyParams, task: TaskSpec, query: Sequence[int],
                    bound: int = ENUMERATION_BOUND) -> EnumeratedSpace:
    q = tuple(query)
    key = (id(task), q, params.vocab_size, params.context_order, params.begin_token, bound)
    hit = _SPACES.get(key)
    if hit is not None and hit[0] is task:
        return hit[1]
    if params.vocab_size != task.vocab_size:
        raise InvalidInputError("policy and task vocabularies differ")
    trajs = completion_trajectories(task, q, bound)
    ctx_parts, tok_parts, seg_parts = [], [], []
    for i, t in enumerate(trajs):
        c, k = trajectory_steps(params, t)
        ctx_parts.append(c)
        tok_parts.append(k)
        seg_parts.append(np.full(len(k), i, dtype=np.int64))
    space = EnumeratedSpace(
        q, trajs, np.array([t.raw_reward for t in trajs]),
        np.concatenate(ctx_parts), np.concatenate(tok_parts), np.concatenate(seg_parts))
    if len(_SPACES) > 256:
        _SPACES.clear()
    _SPACES[key] = (task, space)
    return space


def _queries(task: TaskSpec, query_set) -> list[tuple[int, ...]]:
    qs = list(task.queries if query_set is None else query_set)
    if not qs:
        raise InvalidInputError("query_set is empty")
    return [tuple(q) for q in qs]


def exact_objective(params: PolicyParams, task: TaskSpec, query_set=None) -> float:
    qs = _queries(task, query_set)
    total = 0.0
    for q in qs:
        sp = enumerate_space(params, task, q)
        total += float(sp.probabilities(params) @ sp.rewards)
    return total / len(qs)


def exact_policy_gradient(params: PolicyParams, task: TaskSpec, query_set=None) -> np.ndarray:
    """E_theta[grad log P_theta(tau) R(tau)] by enumeration."""
    qs = _queries(task, query_set)
    g = np.zeros(params.param_count)
    for q in qs:
        sp = enumerate_space(params, task, q)
        g += sp.grad(params, sp.probabilities(params) * sp.rewards)
    return g / len(qs)


def exact_kl(params: PolicyParams, params_ref: PolicyParams, task: TaskSpec, query_set=None) -> float:
    qs = _queries(task, query_set)
    total = 0.0
    for q in qs:
        sp = enumerate_space(params, task, q)
        lp, lr = sp.log_probs(params), sp.log_probs(params_ref)
        total += float(np.exp(lp) @ (lp - lr))
    return max(total / len(qs), 0.0)


def exact_kl_gradient(params: PolicyParams, params_ref: PolicyParams, task: TaskSpec, query_set=None) -> np.ndarray:
    qs = _queries(task, query_set)
    g = np.zeros(params.param_count)
    for q in qs:
        sp = enumerate_space(params, task, q)
        lp, lr = sp.log_probs(params), sp.log_probs(params_ref)
        g += sp.grad(params, np.exp(lp) * (lp - lr))
    return g / len(qs)


def exact_baseline_term(params: PolicyParams, params_star: PolicyParams, task: TaskSpec, b: float,
                        query_set=None) -> np.ndarray:
    """E_{tau ~ P_theta*}[grad log P_theta(tau) * b] for a constant b."""
    qs = _queries(task, query_set)
    g = np.zeros(params.param_count)
    for q in qs:
        sp = enumerate_space(params, task, q)
        g += sp.grad(params, sp.probabilities(params_star) * b)
    return g / len(qs)


def exact_estimator_expectation(kind: str, params: PolicyParams, params_star: PolicyParams, task: TaskSpec,
                                query_set=None, shaping: str = "raw", baseline_mode: str = "none",
                                batch_size: int = 1, clip_eps: float = 0.2,
                                ratio_level: str = "trajectory") -> np.ndarray:
    """Expected gradient of the named estimator when batches are drawn from P_theta*.

    A batch is ``batch_size`` i.i.d. trajectories (query uniform over
    ``query_set``, completion from P_theta*); smoothing and the baseline are
    computed within the batch, so for batch_size > 1 every ordered batch is
    enumerated.
    """
    if kind not in ESTIMATORS:
        raise InvalidInputError(f"unknown estimator {kind!r}")
    if not 1 <= batch_size <= BATCH_K_MAX:
        raise CapacityError(f"batch_size {batch_size} outside 1..{BATCH_K_MAX} for exact batch enumeration",
                            BATCH_K_MAX)
    qs = _queries(task, query_set)
    spaces = [enumerate_space(params, task, q) for q in qs]
    n = sum(len(sp) for sp in spaces)
    if n**batch_size > BATCH_BOUND:
        raise CapacityError(f"{n}^{batch_size} batches exceed the bound {BATCH_BOUND}", BATCH_BOUND)

    lp = np.concatenate([sp.log_probs(params) for sp in spaces])
    lp_star = np.concatenate([sp.log_probs(params_star) for sp in spaces])
    p_star = np.exp(lp_star) / len(qs)
    rewards = np.concatenate([sp.rewards for sp in spaces])
    w = np.exp(lp - lp_star)

    k = batch_size
    batches = np.array(list(itertools.product(range(n), repeat=k)), dtype=np.int64).reshape(-1, k)
    pb = np.prod(p_star[batches], axis=1)
    _, adv, _, _, _ = shape_rewards_rows(rewards[batches], baseline_mode, shaping)

    offsets = np.cumsum([0] + [len(sp) for sp in spaces])
    g = np.zeros(params.param_count)
    if kind == "clipped" and ratio_level == "token":
        # per-token ratios: accumulate mass per (trajectory, advantage value)
        mass: dict = {}
        for b in range(len(batches)):
            for i in range(k):
                key = (int(batches[b, i]), float(adv[b, i]))
                mass[key] = mass.get(key, 0.0) + pb[b] / k
        for s, sp in enumerate(spaces):
            step_lp = log_softmax(params.logits[sp.ctx])[np.arange(len(sp.tok)), sp.tok]
            step_lp_star = log_softmax(params_star.logits[sp.ctx])[np.arange(len(sp.tok)), sp.tok]
            step_w = np.exp(step_lp - step_lp_star)
            step_coefs = np.zeros(len(sp.tok))
            for (j, a), m in mass.items():
                if offsets[s] <= j < offsets[s + 1]:
                    sel = sp.seg == j - offsets[s]
                    step_coefs[sel] += m * clipped_coefs(step_w[sel], np.full(sel.sum(), a), clip_eps)
            g += sp.step_grad(params, step_coefs)
        return g

    W = w[batches]
    if kind == "empg":
        C = adv
    elif kind == "importance-weighted":
        C = W * adv
    else:
        C = clipped_coefs(W, adv, clip_eps)
    coef_total = np.bincount(batches.ravel(), weights=(pb[:, None] * C / k).ravel(), minlength=n)
    for s, sp in enumerate(spaces):
        g += sp.grad(params, coef_total[offsets[s]:offsets[s + 1]])
    return g


# finite differences ------------------------------------------------------------

def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                      coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``f`` at ``x``; only ``coords`` are filled when given."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in (range(len(x)) if coords is None else coords):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, coords: Sequence[int] | None = None) -> float:
    """max |a - b| over compared entries, relative to the larger of the two max-norms."""
    a, b = np.asarray(a), np.asarray(b)
    if coords is not None:
        a, b = a[list(coords)], b[list(coords)]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(b).max())
    diff = np.abs(a - b).max()
    if scale == 0.0:
        return float(diff)
    return float(diff / max(scale, 1e-12))


def random_policy(rng: np.random.Generator, vocab_size: int, context_order: int, begin_token: int,
                  scale: float = 1.0) -> PolicyParams:
    return PolicyParams.gaussian(vocab_size, context_order, begin_token, scale, rng)


def small_task(rng: np.random.Generator) -> TaskSpec:
    """A random oracle-sized task: V <= 5, rationale <= 2, answer <= 2."""
    from .tasks import arithmetic_chain, copy_reverse, parity
    choice = int(rng.integers(3))
    if choice == 0:
        return parity(n_bits=int(rng.integers(1, 3)), max_rationale_len=int(rng.integers(0, 3)),
                      context_order=int(rng.integers(0, 3)))
    if choice == 1:
        return copy_reverse(n_symbols=2, length=int(rng.integers(1, 3)), max_rationale_len=int(rng.integers(0, 2)),
                            context_order=int(rng.integers(0, 3)))
    return arithmetic_chain(operand_max=1, chain_length=1, max_rationale_len=int(rng.integers(0, 2)),
                            context_order=int(rng.integers(0, 3)))


# gradcheck ---------------------------------------------------------------------

GRADCHECK_THRESHOLDS = {"policy": 1e-6, "objective": 1e-7, "kl": 1e-6}


def gradcheck(seed: int = 0, trials: int = 100, wrong_sign: bool = False, fd_coords: int = 12) -> dict:
    """Finite-difference suites for grad log P, grad J and grad KL.

    ``wrong_sign`` flips the analytic gradients, for checking that the
    detector actually fires.
    """
    rng = np.random.default_rng(seed)
    sign = -1.0 if wrong_sign else 1.0
    errors = {name: [] for name in GRADCHECK_THRESHOLDS}
    for trial in range(trials):
        task = small_task(rng)
        V, m = task.vocab_size, task.context_order
        p = random_policy(rng, V, m, task.begin_token)
        q = task.queries[int(rng.integers(len(task.queries)))]
        traj = sample_trajectory(p, q, 1.0, task.max_rationale_len, rng,
                                 eor_token=task.eor_token, answer_length=task.answer_length)
        analytic = sign * grad_trajectory_log_prob(p, traj)
        fd = finite_difference(lambda x: trajectory_log_prob(p.with_flat(x), traj), p.flat)
        errors["policy"].append(relative_error(analytic, fd))

        coords = rng.choice(p.param_count, size=min(fd_coords, p.param_count), replace=False)
        analytic = sign * exact_policy_gradient(p, task)
        fd = finite_difference(lambda x: exact_objective(p.with_flat(x), task), p.flat, coords=coords)
        errors["objective"].append(relative_error(analytic, fd, coords))

        ref = random_policy(rng, V, m, task.begin_token)
        analytic = sign * (-kl_penalty_gradient(p, ref, task, 1.0, "exact").grad)
        fd = finite_difference(lambda x: exact_kl(p.with_flat(x), ref, task), p.flat, coords=coords)
        errors["kl"].append(relative_error(analytic, fd, coords))

    report = {"seed": seed, "trials": trials, "vacuous": trials == 0, "suites": {}}
    ok = True
    for name, errs in errors.items():
        thr = GRADCHECK_THRESHOLDS[name]
        failing = [i for i, e in enumerate(errs) if not e < thr]
        ok &= not failing
        report["suites"][name] = {
            "max_relative_error": max(errs) if errs else None,
            "threshold": thr, "passed": not failing, "failing_trials": failing,
        }
    report["passed"] = ok
    return report


# identity checks -----------------------------------------------------------------

def _identity_task():
    from .tasks import parity
    return parity(n_bits=2, max_rationale_len=2, context_order=2)


def _pair(rng, task, scale=1.0, shift=0.5):
    p_star = random_policy(rng, task.vocab_size, task.context_order, task.begin_token, scale)
    p = p_star.with_flat(p_star.flat + shift * rng.standard_normal(p_star.param_count))
    return p, p_star


def identity_empg_at_theta_star(rng, draws=10) -> dict:
    task = _identity_task()
    err = 0.0
    for _ in range(draws):
        p = random_policy(rng, task.vocab_size, task.context_order, task.begin_token)
        exp = exact_estimator_expectation("empg", p, p, task)
        err = max(err, float(np.abs(exp - exact_policy_gradient(p, task)).max()))
    return {"identity": "empg-at-theta-star", "error": err, "tolerance": 1e-10, "passed": err < 1e-10}


def identity_is_unbiased(rng, draws=10) -> dict:
    task = _identity_task()
    err = 0.0
    for _ in range(draws):
        p, p_star = _pair(rng, task)
        exp = exact_estimator_expectation("importance-weighted", p, p_star, task)
        err = max(err, float(np.abs(exp - exact_policy_gradient(p, task)).max()))
    return {"identity": "is-unbiased", "error": err, "tolerance": 1e-10, "passed": err < 1e-10}


def saturating_pair(rng, task, shift=3.0):
    """theta far enough from theta* that many trajectory ratios leave the clip band."""
    p_star = random_policy(rng, task.vocab_size, task.context_order, task.begin_token)
    p = p_star.with_flat(p_star.flat + shift * rng.standard_normal(p_star.param_count))
    return p, p_star


def identity_clipped_bias(rng, draws=5, clip_eps=0.2) -> dict:
    task = _identity_task()
    biases, at_star = [], 0.0
    for _ in range(draws):
        p, p_star = saturating_pair(rng, task)
        exp = exact_estimator_expectation("clipped", p, p_star, task, clip_eps=clip_eps)
        biases.append(float(np.linalg.norm(exp - exact_policy_gradient(p, task))))
        exp_star = exact_estimator_expectation("clipped", p_star, p_star, task, clip_eps=clip_eps)
        at_star = max(at_star, float(np.abs(exp_star - exact_policy_gradient(p_star, task)).max()))
    ok = min(biases) > 1e-6 and at_star < 1e-10
    return {"identity": "clipped-bias", "bias_norms": biases, "error_at_theta_star": at_star,
            "tolerance": {"bias_min": 1e-6, "at_theta_star": 1e-10}, "passed": ok}


def identity_baseline_zero(rng, draws=10) -> dict:
    task = _identity_task()
    err = 0.0
    for _ in range(draws):
        p = random_policy(rng, task.vocab_size, task.context_order, task.begin_token)
        b = float(rng.uniform(0, 1))
        err = max(err, float(np.abs(exact_baseline_term(p, p, task, b)).max()))
    return {"identity": "baseline-zero", "error": err, "tolerance": 1e-10, "passed": err < 1e-10}


def bias_decay_curve(p: PolicyParams, p_star: PolicyParams, task: TaskSpec,
                     alphas: Sequence[float] = (1.0, 0.75, 0.5, 0.25, 0.0)) -> list[float]:
    """||E[empg] - grad J(theta)|| along theta = theta* + alpha (theta0 - theta*)."""
    gaps = []
    for a in alphas:
        theta = p_star.with_flat(p_star.flat + a * (p.flat - p_star.flat))
        exp = exact_estimator_expectation("empg", theta, p_star, task)
        gaps.append(float(np.linalg.norm(exp - exact_policy_gradient(theta, task))))
    return gaps


def identity_bias_decay(rng, draws=5) -> dict:
    task = _identity_task()
    ok, curves = True, []
    for _ in range(draws):
        p, p_star = _pair(rng, task)
        gaps = bias_decay_curve(p, p_star, task)
        curves.append(gaps)
        ok &= all(x > y for x, y in zip(gaps, gaps[1:])) and gaps[-1] < 1e-10
    return {"identity": "bias-decay", "curves": curves, "passed": ok}


IDENTITIES = {
    "empg-at-theta-star": identity_empg_at_theta_star,
    "is-unbiased": identity_is_unbiased,
    "clipped-bias": identity_clipped_bias,
    "baseline-zero": identity_baseline_zero,
    "bias-decay": identity_bias_decay,
}


# sampling cross-checks ---------------------------------------------------------------

def monte_carlo_objective(params: PolicyParams, task: TaskSpec, n: int, rng: np.random.Generator,
                          temperature: float = 1.0) -> tuple[float, float]:
    """(mean, standard error) of sampled rewards with queries uniform over the task."""
    r = np.empty(n)
    for i in range(n):
        q = task.queries[int(rng.integers(len(task.queries)))]
        t = sample_trajectory(params, q, temperature, task.max_rationale_len, rng,
                              eor_token=task.eor_token, answer_length=task.answer_length)
        r[i] = reward(task, t)
    return float(r.mean()), float(r.std(ddof=1) / np.sqrt(n))


def monte_carlo_kl(params: PolicyParams, params_ref: PolicyParams, task: TaskSpec, n: int,
                   rng: np.random.Generator) -> tuple[float, float]:
    x = np.empty(n)
    for i in range(n):
        q = task.queries[int(rng.integers(len(task.queries)))]
        t = sample_trajectory(params, q, 1.0, task.max_rationale_len, rng,
                              eor_token=task.eor_token, answer_length=task.answer_length)
        x[i] = trajectory_log_prob(params, t) - trajectory_log_prob(params_ref, t)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(n))
