import numpy as np
import pytest

from empg.errors import ContractViolation, InvalidInputError, NumericalError
from empg.estimators import (GradientEstimate, clipped_coefs, clipped_gradient, data_gradient, empg_gradient,
                             importance_weighted_gradient, importance_weights, kl_penalty_gradient)
from empg.oracle import (exact_estimator_expectation, exact_kl, exact_policy_gradient, finite_difference,
                         relative_error)
from empg.policy import PolicyParams, Trajectory, grad_trajectory_log_prob
from empg.rollout import Buffer, e_step
from empg.shaping import shape_batch
from empg.tasks import parity


@pytest.fixture
def task():
    return parity(n_bits=2, max_rationale_len=2, context_order=2)


def policy(task, rng, scale=1.0):
    return PolicyParams.gaussian(task.vocab_size, task.context_order, task.begin_token, scale, rng)


def shifted(p, rng, scale):
    return p.with_flat(p.flat + scale * rng.standard_normal(p.param_count))


def test_zero_advantages_give_zero(task, rng):
    p = policy(task, rng)
    # a constant-reward buffer shapes to all-zero advantages
    buf = Buffer(p.checkpoint_id(), 1, 4, 1.0)
    for _ in range(4):
        buf.append(Trajectory((0, 1), (2,), (1,), 1.0))
    buf.freeze()
    assert np.all(empg_gradient(p, shape_batch(buf, range(4)), buf).grad == 0)


def test_single_unit_advantage(task, rng):
    p = policy(task, rng)
    t = Trajectory((0, 1), (0, 2), (1,), 1.0)
    buf = Buffer(p.checkpoint_id(), 1, 1, 1.0, [t]).freeze()
    batch = shape_batch(buf, [0], baseline_mode="none", shaping="raw")
    assert np.array_equal(empg_gradient(p, batch, buf).grad, grad_trajectory_log_prob(p, t))


def test_estimators_coincide_at_theta_star(task, rng):
    p = policy(task, rng)
    buf = e_step(p, task, 4, 8, 1.0, rng)
    batch = shape_batch(buf, range(32))
    e = empg_gradient(p, batch, buf)
    iw = importance_weighted_gradient(p, p, batch, buf)
    cl = clipped_gradient(p, p, batch, buf)
    assert np.array_equal(e.grad, iw.grad) and np.array_equal(e.grad, cl.grad)
    assert iw.weight_stats == (1.0, 1.0, 1.0)
    assert e.weight_stats is None
    again = empg_gradient(p, batch, buf)
    assert np.array_equal(again.grad, e.grad)


def test_star_mismatch_is_rejected(task, rng):
    p = policy(task, rng)
    buf = e_step(p, task, 2, 4, 1.0, rng)
    other = shifted(p, rng, 0.1)
    batch = shape_batch(buf, range(8))
    for fn in (importance_weighted_gradient, clipped_gradient):
        with pytest.raises(ContractViolation):
            fn(other, other, batch, buf)


def test_batch_buffer_mismatch(task, rng):
    p = policy(task, rng)
    a = e_step(p, task, 2, 4, 1.0, rng)
    b = e_step(p, task, 2, 4, 1.0, np.random.default_rng(77))
    batch = shape_batch(a, range(8))
    if not np.array_equal(a.rewards, b.rewards):
        with pytest.raises(InvalidInputError):
            empg_gradient(p, batch, b)
    with pytest.raises(InvalidInputError):
        data_gradient("reinforce", p, p, batch, a)


def test_non_finite_weight_reports_index():
    with pytest.raises(NumericalError) as err:
        importance_weights(np.array([0.0, 1000.0]), np.array([0.0, -10.0]))
    assert err.value.index == 1
    with pytest.raises(NumericalError):
        GradientEstimate(np.array([np.nan]), "empg", None, 1)


def test_saturated_clip_is_zero():
    r = np.array([1.2, 1.5, 3.0])
    assert np.all(clipped_coefs(r, np.ones(3), 0.2) == 0)
    r = np.array([0.8, 0.5])
    assert np.all(clipped_coefs(r, -np.ones(2), 0.2) == 0)
    # the pessimistic branch keeps the unclipped gradient on the other side
    np.testing.assert_array_equal(clipped_coefs(np.array([0.5, 2.0]), np.array([1.0, -1.0]), 0.2), [0.5, -2.0])
    np.testing.assert_array_equal(clipped_coefs(np.array([1.1]), np.array([0.3]), 0.2), [1.1 * 0.3])


def test_clipped_saturated_batch(task, rng):
    p_star = policy(task, rng)
    buf = e_step(p_star, task, 2, 4, 1.0, rng)
    batch = shape_batch(buf, range(8), baseline_mode="none")
    # push every sampled trajectory's probability up so all ratios exceed 1 + eps
    g = sum(grad_trajectory_log_prob(p_star, t) for t in buf.trajectories)
    p = p_star.with_flat(p_star.flat + 2.0 * g)
    est = clipped_gradient(p, p_star, batch, buf, clip_eps=0.2)
    assert est.weight_stats[0] >= 1.2
    assert np.all(est.grad == 0)


def test_clip_eps_range(task, rng):
    p = policy(task, rng)
    buf = e_step(p, task, 1, 2, 1.0, rng)
    batch = shape_batch(buf, range(2))
    for eps in (0.0, 1.0):
        with pytest.raises(InvalidInputError):
            clipped_gradient(p, p, batch, buf, eps)


def test_token_level_clipping_at_theta_star(task, rng):
    p = policy(task, rng)
    buf = e_step(p, task, 3, 4, 1.0, rng)
    batch = shape_batch(buf, range(12))
    a = clipped_gradient(p, p, batch, buf, ratio_level="token")
    b = importance_weighted_gradient(p, p, batch, buf)
    np.testing.assert_allclose(a.grad, b.grad, atol=1e-15)


def test_kl_examples(task, rng):
    p = policy(task, rng)
    assert np.all(kl_penalty_gradient(p, p, task, 0.0).grad == 0)
    assert np.abs(kl_penalty_gradient(p, p, task, 1.0).grad).max() < 1e-15
    with pytest.raises(InvalidInputError):
        kl_penalty_gradient(p, p, task, 1.0, mode="monte-carlo")
    ref = policy(task, rng)
    g = kl_penalty_gradient(p, ref, task, 0.3).grad
    fd = finite_difference(lambda x: -0.3 * exact_kl(p.with_flat(x), ref, task), p.flat)
    assert relative_error(g, fd) < 1e-6


def test_monte_carlo_kl_gradient_is_unbiased(task):
    rng = np.random.default_rng(5)
    p, ref = policy(task, rng), policy(task, rng)
    exact = kl_penalty_gradient(p, ref, task, 1.0).grad
    est = []
    for _ in range(400):
        buf = e_step(p, task, 4, 8, 1.0, rng)
        est.append(kl_penalty_gradient(p, ref, task, 1.0, "monte-carlo", buf).grad)
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / np.sqrt(len(est)) + 1e-12
    assert np.all(np.abs(est.mean(axis=0) - exact) < 5 * se + 1e-9)


@pytest.mark.parametrize("kind", ["empg", "importance-weighted", "clipped"])
@pytest.mark.parametrize("batch_size,shaping,baseline", [(1, "raw", "none"), (2, "smoothed", "batch-mean")])
def test_sampled_estimators_match_exact_expectation(task, kind, batch_size, shaping, baseline):
    """Library estimators on sampled batches average to the oracle expectation."""
    rng = np.random.default_rng(21)
    # moderate logits keep every token frequent enough for the standard error to be meaningful
    p_star = policy(task, rng, scale=0.5)
    p = shifted(p_star, rng, 0.4)
    exact = exact_estimator_expectation(kind, p, p_star, task, shaping=shaping, baseline_mode=baseline,
                                        batch_size=batch_size)
    n_batches = 3000
    buf = e_step(p_star, task, n_batches * batch_size, 1, 1.0, rng)
    est = np.empty((n_batches, p.param_count))
    for i in range(n_batches):
        batch = shape_batch(buf, range(i * batch_size, (i + 1) * batch_size), baseline, shaping)
        est[i] = data_gradient(kind, p, p_star, batch, buf).grad
    se = est.std(axis=0, ddof=1) / np.sqrt(n_batches)
    z = np.abs(est.mean(axis=0) - exact) / np.where(se > 0, se, 1.0)
    assert np.all(z[se > 0] < 5)
    assert np.all(np.abs(exact[se == 0]) < 1e-12)


def test_is_expectation_equals_policy_gradient(task, rng):
    for _ in range(3):
        p_star = policy(task, rng)
        p = shifted(p_star, rng, 0.5)
        g = exact_estimator_expectation("importance-weighted", p, p_star, task)
        assert np.abs(g - exact_policy_gradient(p, task)).max() < 1e-10
