"""The outer EM loop: freeze theta*, sample a buffer, take M-step updates, evaluate."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, ContractViolation, InvalidInputError, NumericalError
from .estimators import ESTIMATORS, KL_MODES, RATIO_LEVELS, data_gradient, kl_penalty_gradient
from .oracle import exact_kl
from .policy import PolicyParams, greedy_trajectory, save_params, trajectory_log_prob
from .rollout import Buffer, e_step
from .shaping import BASELINE_MODES, SHAPINGS, shape_batch
from .tasks import TaskSpec, make_task, reward, sample_query, task_parameters

OPTIMIZERS = ("sgd", "adam")
INITS = ("zeros", "gaussian")

# seed-sequence stream tags; evaluation draws from a range disjoint from training
_E_STEP, _M_STEP, _EVAL, _INIT = 0, 1, 2, 3

KL_EXACT_BOUND = 10**5


@dataclass
class TrainConfig:
    task: str = "arithmetic_chain"
    task_params: dict = field(default_factory=dict)
    iterations: int = 300
    n_queries: int = 8
    n_per_query: int = 8
    temperature: float = 1.0
    minibatch_size: int = 32
    epochs_per_m_step: int = 1
    learning_rate: float = 10.0
    optimizer: str = "sgd"
    beta: float = 0.0
    baseline_mode: str = "batch-mean"
    reward_shaping: str = "smoothed"
    estimator_kind: str = "empg"
    clip_eps: float = 0.2
    clip_ratio_level: str = "trajectory"
    kl_mode: str = "monte-carlo"
    seed: int = 0
    eval_every: int = 5
    eval_size: int = 500
    init: str = "zeros"
    init_scale: float = 1.0
    fixed_query_pool: bool = False
    checkpoint_every: int = 0
    lanes: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", key=key)

        if self.iterations < 1:
            bad("iterations", "must be >= 1")
        if not self.learning_rate >= 0:
            bad("learning_rate", "must be >= 0")
        if not self.beta >= 0:
            bad("beta", "must be >= 0")
        if not self.temperature > 0:
            bad("temperature", "must be > 0")
        for key in ("n_queries", "n_per_query", "minibatch_size", "epochs_per_m_step", "eval_every",
                    "eval_size", "lanes"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        if self.checkpoint_every < 0:
            bad("checkpoint_every", "must be >= 0")
        if not 0 < self.clip_eps < 1:
            bad("clip_eps", "must lie in (0, 1)")
        for key, allowed in (("optimizer", OPTIMIZERS), ("baseline_mode", BASELINE_MODES),
                             ("reward_shaping", SHAPINGS), ("estimator_kind", ESTIMATORS),
                             ("clip_ratio_level", RATIO_LEVELS), ("kl_mode", KL_MODES), ("init", INITS)):
            if getattr(self, key) not in allowed:
                bad(key, f"must be one of {list(allowed)}, got {getattr(self, key)!r}")
        try:
            params = task_parameters(self.task)
        except InvalidInputError as exc:
            bad("task", str(exc))
        for k in self.task_params:
            if k not in params:
                bad(f"task.{k}", f"unknown parameter for task {self.task!r}")

    def make_task(self) -> TaskSpec:
        return make_task(self.task, **self.task_params)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "task_params":
                continue
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
            if f.name == "task":
                lines += [f"task.{k} = {_format_value(v)}" for k, v in sorted(self.task_params.items())]
        return "\n".join(lines) + "\n"


# config text format --------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "task_params"}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_loose(text: str):
    low = text.lower()
    if low in ("none", "null"):
        return None
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_field(key: str, text: str):
    kind = _FIELDS[key].type
    if kind in ("bool", bool):
        return _parse_bool(text)
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    return text


def parse_assignments(pairs: Iterable[tuple[int | None, str]]) -> dict:
    """Parse ``(line_number, "key = value")`` items into config kwargs."""
    kwargs: dict = {}
    task_params: dict = {}
    for line_no, raw in pairs:
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line_no)
        key, value = (s.strip() for s in text.split("=", 1))
        if key.startswith("task."):
            task_params[key[5:]] = _parse_loose(value)
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", line_no, key)
        try:
            kwargs[key] = _parse_field(key, value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line_no, key) from None
    if task_params:
        kwargs["task_params"] = task_params
    return kwargs


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    items: list = []
    if path is not None:
        items += list(enumerate(Path(path).read_text().splitlines(), start=1))
    base = parse_assignments(items)
    over = parse_assignments((None, o) for o in overrides)
    if "task_params" in over:
        if "task" in over and over["task"] != base.get("task"):
            base.pop("task_params", None)
        merged = dict(base.get("task_params", {}))
        merged.update(over.pop("task_params"))
        base["task_params"] = merged
    base.update(over)
    return TrainConfig(**base)


# metrics ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    iteration: int
    mean_raw_reward: float | None
    mean_smoothed_reward: float | None
    eval_success_rate: float | None
    mean_response_length: float | None
    gradient_norm: float | None
    kl_to_reference: float | None
    wall_time: float
    eval_mean_length: float | None = None
    batch_mean: float | None = None
    batch_std: float | None = None
    baseline: float | None = None
    weight_min: float | None = None
    weight_max: float | None = None
    weight_mean: float | None = None
    theta_star_id: str | None = None

    def to_dict(self, timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


METRIC_FIELDS = tuple(f.name for f in dataclasses.fields(MetricsRecord))
CSV_FIELDS = ("iteration", "eval_success_rate", "mean_response_length")


def write_metrics_jsonl(records: Iterable[MetricsRecord], path: str | Path) -> None:
    """Deterministic metrics stream; wall-clock time goes to :func:`write_timing_jsonl`."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def write_timing_jsonl(records: Iterable[MetricsRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"iteration": r.iteration, "wall_time": r.wall_time}) + "\n")


def write_curves_csv(records: Iterable[MetricsRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            if r.eval_success_rate is not None:
                w.writerow([r.iteration, repr(r.eval_success_rate), repr(r.mean_response_length)
                            if r.mean_response_length is not None else ""])


# optimizers --------------------------------------------------------------------------

def _apply(params: PolicyParams, delta: np.ndarray) -> PolicyParams:
    with np.errstate(over="ignore", invalid="ignore"):
        flat = params.flat + delta
    bad = np.flatnonzero(~np.isfinite(flat))
    if len(bad):
        raise NumericalError(f"optimizer step produced a non-finite logit at index {bad[0]}", int(bad[0]))
    return params.with_flat(flat)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: PolicyParams, grad: np.ndarray) -> PolicyParams:
        if self.lr == 0:
            return params
        return _apply(params, self.lr * grad)


class Adam:
    """First/second-moment ascent with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: PolicyParams, grad: np.ndarray) -> PolicyParams:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        if self.lr == 0:
            return params
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return _apply(params, self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(config: TrainConfig):
    return SGD(config.learning_rate) if config.optimizer == "sgd" else Adam(config.learning_rate)


# M-step ----------------------------------------------------------------------------------

@dataclass
class StepStats:
    gradient_norm: float
    mean_smoothed: float
    batch_mean: float
    batch_std: float
    baseline: float
    weight_stats: tuple | None


def m_step(params: PolicyParams, buffer: Buffer, config: TrainConfig, *, task: TaskSpec | None = None,
           params_ref: PolicyParams | None = None, optimizer=None, rng: np.random.Generator | None = None,
           step_log: list | None = None) -> PolicyParams:
    """Mini-batch ascent on the buffer; ``params`` must be the policy that filled it."""
    if buffer.theta_star_id != params.checkpoint_id():
        raise ContractViolation(
            f"stale buffer: sampled under {buffer.theta_star_id}, M-step starts from {params.checkpoint_id()}")
    if not buffer.frozen:
        raise ContractViolation("M-step needs a frozen buffer")
    if config.beta > 0 and params_ref is None:
        raise InvalidInputError("beta > 0 needs a reference policy")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    optimizer = make_optimizer(config) if optimizer is None else optimizer
    params_star = params
    n = len(buffer)
    for _ in range(config.epochs_per_m_step):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            batch = shape_batch(buffer, idx, config.baseline_mode, config.reward_shaping)
            est = data_gradient(config.estimator_kind, params, params_star, batch, buffer,
                                config.clip_eps, config.clip_ratio_level)
            if est.theta_star_id != params_star.checkpoint_id():
                raise ContractViolation("gradient computed from a buffer of another checkpoint")
            grad = est.grad
            if config.beta > 0:
                kl = kl_penalty_gradient(params, params_ref, task, config.beta, config.kl_mode, buffer, idx)
                grad = grad + kl.grad
            params = optimizer.step(params, grad)
            if step_log is not None:
                step_log.append(StepStats(float(np.linalg.norm(grad)), float(batch.smoothed_rewards.mean()),
                                          batch.batch_mean, batch.batch_std, batch.baseline, est.weight_stats))
    return params


# evaluation ------------------------------------------------------------------------------------

def evaluate(params: PolicyParams, task: TaskSpec, eval_size: int, rng: np.random.Generator) -> tuple[float, float]:
    """Greedy-decoding success rate and mean generated length on ``eval_size`` sampled queries.

    Exact logit ties are split at random (the zero-temperature limit of sampling).
    """
    if eval_size < 1:
        raise InvalidInputError("eval_size must be >= 1")
    hits, length = 0.0, 0
    for _ in range(eval_size):
        q = sample_query(task, rng)
        t = greedy_trajectory(params, q, task.max_rationale_len, eor_token=task.eor_token,
                              answer_length=task.answer_length, rng=rng)
        hits += reward(task, t)
        length += t.length
    return hits / eval_size, length / eval_size


def _stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *extra]))


def initial_params(config: TrainConfig, task: TaskSpec) -> PolicyParams:
    if config.init == "zeros":
        return PolicyParams.zeros(task.vocab_size, task.context_order, task.begin_token)
    return PolicyParams.gaussian(task.vocab_size, task.context_order, task.begin_token,
                                 config.init_scale, _stream(config.seed, _INIT))


def _mean_or_none(xs):
    return float(np.mean(xs)) if xs else None


def _check_finite(rec: MetricsRecord) -> None:
    for k, v in rec.to_dict(timing=True).items():
        if isinstance(v, float) and not math.isfinite(v):
            raise NumericalError(f"non-finite metric {k}={v} at iteration {rec.iteration}")


def train(config: TrainConfig, *, checkpoint_dir: str | Path | None = None,
          on_record: Callable[[MetricsRecord], None] | None = None,
          params0: PolicyParams | None = None) -> tuple[PolicyParams, list[MetricsRecord]]:
    task = config.make_task()
    params = initial_params(config, task) if params0 is None else params0
    params_ref = params  # frozen copy of theta_0; PolicyParams is immutable
    ref_id = params_ref.checkpoint_id()
    optimizer = make_optimizer(config)
    pool = task.queries if config.fixed_query_pool else None
    records: list[MetricsRecord] = []
    # the logged KL is exact when the space is small enough, else a buffer estimate
    exact_kl_ok = task.completion_count * len(task.queries) <= KL_EXACT_BOUND
    t0 = time.perf_counter()

    def emit(rec: MetricsRecord):
        _check_finite(rec)
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    succ, elen = evaluate(params, task, config.eval_size, _stream(config.seed, _EVAL))
    emit(MetricsRecord(0, None, None, succ, None, None, 0.0, time.perf_counter() - t0, eval_mean_length=elen))

    for it in range(1, config.iterations + 1):
        params_star = params
        star_id = params_star.checkpoint_id()
        buffer = e_step(params_star, task, config.n_queries, config.n_per_query, config.temperature,
                        _stream(config.seed, _E_STEP, it), query_pool=pool, lanes=config.lanes)
        if buffer.theta_star_id != star_id:
            raise ContractViolation("buffer does not come from the checkpoint frozen at this iteration")
        steps: list[StepStats] = []
        params = m_step(params_star, buffer, config, task=task, params_ref=params_ref, optimizer=optimizer,
                        rng=_stream(config.seed, _M_STEP, it), step_log=steps)
        if params_ref.checkpoint_id() != ref_id:
            raise ContractViolation("reference policy changed")

        if exact_kl_ok:
            kl = exact_kl(params, params_ref, task)
        else:
            kl = float(np.mean([trajectory_log_prob(params_star, t) - trajectory_log_prob(params_ref, t)
                                for t in buffer.trajectories]))
        ws = [s.weight_stats for s in steps if s.weight_stats is not None]
        rec = MetricsRecord(
            iteration=it,
            mean_raw_reward=buffer.reward_stats[0],
            mean_smoothed_reward=_mean_or_none([s.mean_smoothed for s in steps]),
            eval_success_rate=None,
            mean_response_length=buffer.mean_length,
            gradient_norm=_mean_or_none([s.gradient_norm for s in steps]),
            kl_to_reference=kl,
            wall_time=0.0,
            batch_mean=_mean_or_none([s.batch_mean for s in steps]),
            batch_std=_mean_or_none([s.batch_std for s in steps]),
            baseline=_mean_or_none([s.baseline for s in steps]),
            weight_min=min(w[0] for w in ws) if ws else None,
            weight_max=max(w[1] for w in ws) if ws else None,
            weight_mean=_mean_or_none([w[2] for w in ws]),
            theta_star_id=star_id,
        )
        if it % config.eval_every == 0 or it == config.iterations:
            rec.eval_success_rate, rec.eval_mean_length = evaluate(params, task, config.eval_size,
                                                                   _stream(config.seed, _EVAL))
        rec.wall_time = time.perf_counter() - t0
        emit(rec)
        if checkpoint_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            save_params(params, Path(checkpoint_dir) / f"checkpoint_{it:05d}.json")
    return params, records


def eval_scores(records: Iterable[MetricsRecord]) -> list[float]:
    return [r.eval_success_rate for r in records if r.eval_success_rate is not None and r.iteration > 0]


def final_score(records: Iterable[MetricsRecord], last: int = 10) -> float:
    """Mean of the last ``last`` evaluation scores."""
    scores = eval_scores(records)
    return float(np.mean(scores[-last:])) if scores else float("nan")
