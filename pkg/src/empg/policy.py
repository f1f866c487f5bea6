"""Tabular order-m autoregressive softmax policy.

The policy keeps one row of logits per context, where a context is the last
``context_order`` tokens of the running sequence (query followed by whatever
has been generated so far). Short histories are left-padded with the begin
token. Rows are addressed by the base-V reading of the context tuple, so the
mapping between context keys and rows is exact.

Rationale and answer tokens share the same table: the joint distribution
over (rationale, answer) given the query is a single autoregressive chain.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

CHECKPOINT_FORMAT = "empg-policy-v1"


@dataclass(frozen=True)
class Trajectory:
    """One sampled (query, rationale, answer) triple with its reward.

    ``rationale`` holds every token generated before the answer, including the
    end-of-rationale token when it was emitted. ``truncated`` is set when the
    rationale hit its length cap without emitting that token.
    """

    query: tuple[int, ...]
    rationale: tuple[int, ...]
    answer: tuple[int, ...]
    raw_reward: float = 0.0
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "query", tuple(int(t) for t in self.query))
        object.__setattr__(self, "rationale", tuple(int(t) for t in self.rationale))
        object.__setattr__(self, "answer", tuple(int(t) for t in self.answer))
        if not self.raw_reward >= 0:
            raise InvalidInputError(f"raw_reward must be >= 0, got {self.raw_reward}")

    @property
    def generated(self) -> tuple[int, ...]:
        return self.rationale + self.answer

    @property
    def length(self) -> int:
        return len(self.rationale) + len(self.answer)

    def with_reward(self, reward: float) -> "Trajectory":
        return Trajectory(self.query, self.rationale, self.answer, reward, self.truncated)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    logits: np.ndarray
    vocab_size: int
    context_order: int = 2
    begin_token: int = 0
    _id: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self):
        V, m = int(self.vocab_size), int(self.context_order)
        if V < 1:
            raise InvalidInputError("vocab_size must be positive")
        if m < 0:
            raise InvalidInputError("context_order must be nonnegative")
        if not 0 <= self.begin_token < V:
            raise InvalidInputError("begin_token must be a valid token id")
        logits = np.array(self.logits, dtype=np.float64).reshape(V**m, V)
        if not np.all(np.isfinite(logits)):
            raise InvalidInputError("logits must be finite")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "vocab_size", V)
        object.__setattr__(self, "context_order", m)

    @classmethod
    def zeros(cls, vocab_size: int, context_order: int = 2, begin_token: int = 0) -> "PolicyParams":
        return cls(np.zeros((vocab_size**context_order, vocab_size)), vocab_size, context_order, begin_token)

    @classmethod
    def gaussian(cls, vocab_size: int, context_order: int = 2, begin_token: int = 0,
                 scale: float = 1.0, rng: np.random.Generator | None = None) -> "PolicyParams":
        rng = np.random.default_rng() if rng is None else rng
        shape = (vocab_size**context_order, vocab_size)
        return cls(scale * rng.standard_normal(shape), vocab_size, context_order, begin_token)

    @property
    def n_contexts(self) -> int:
        return self.logits.shape[0]

    @property
    def param_count(self) -> int:
        return self.logits.size

    @property
    def flat(self) -> np.ndarray:
        return self.logits.ravel()

    def with_flat(self, flat: np.ndarray) -> "PolicyParams":
        return PolicyParams(np.asarray(flat, dtype=np.float64).reshape(self.logits.shape),
                            self.vocab_size, self.context_order, self.begin_token)

    def checkpoint_id(self) -> str:
        """Content hash; equal parameters give equal ids."""
        if not self._id:
            h = hashlib.sha256()
            h.update(f"{self.vocab_size}:{self.context_order}:{self.begin_token}:".encode())
            h.update(self.logits.tobytes())
            self._id.append(h.hexdigest()[:16])
        return self._id[0]

    def context_key(self, history: Sequence[int]) -> tuple[int, ...]:
        m = self.context_order
        if m == 0:
            return ()
        tail = tuple(int(t) for t in history[-m:]) if len(history) else ()
        return (self.begin_token,) * (m - len(tail)) + tail

    def context_index(self, key: Sequence[int]) -> int:
        idx = 0
        for t in key:
            idx = idx * self.vocab_size + int(t)
        return idx

    def context_key_of_index(self, index: int) -> tuple[int, ...]:
        key = []
        for _ in range(self.context_order):
            index, t = divmod(index, self.vocab_size)
            key.append(t)
        return tuple(reversed(key))


def log_softmax(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(rows: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(rows))


def _check_token(params: PolicyParams, token: int) -> None:
    if not 0 <= token < params.vocab_size:
        raise InvalidInputError(f"token id {token} out of range for vocab_size {params.vocab_size}")


@lru_cache(maxsize=1 << 18)
def _steps(query: tuple, generated: tuple, V: int, m: int, begin: int) -> tuple[np.ndarray, np.ndarray]:
    seq = (begin,) * m + query + generated
    offset = m + len(query)
    ctx = np.empty(len(generated), dtype=np.int64)
    for i in range(len(generated)):
        idx = 0
        for t in seq[offset + i - m: offset + i]:
            idx = idx * V + t
        ctx[i] = idx
    tok = np.array(generated, dtype=np.int64)
    ctx.setflags(write=False)
    tok.setflags(write=False)
    return ctx, tok


def trajectory_steps(params: PolicyParams, traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Row index and emitted token for every generation step, in order."""
    V = params.vocab_size
    for t in traj.query + traj.generated:
        if not 0 <= t < V:
            raise InvalidInputError(f"token id {t} out of range for vocab_size {V}")
    return _steps(traj.query, traj.generated, V, params.context_order, params.begin_token)


def token_log_prob(params: PolicyParams, context: Sequence[int], token: int) -> float:
    _check_token(params, token)
    for t in context:
        _check_token(params, t)
    row = params.logits[params.context_index(params.context_key(context))]
    return float(log_softmax(row)[token])


def trajectory_log_prob(params: PolicyParams, traj: Trajectory) -> float:
    """log P(rationale, answer | query); the query itself carries no factor."""
    ctx, tok = trajectory_steps(params, traj)
    if len(tok) == 0:
        return 0.0
    return float(log_softmax(params.logits[ctx])[np.arange(len(tok)), tok].sum())


def token_log_probs(params: PolicyParams, traj: Trajectory) -> np.ndarray:
    ctx, tok = trajectory_steps(params, traj)
    if len(tok) == 0:
        return np.zeros(0)
    return log_softmax(params.logits[ctx])[np.arange(len(tok)), tok]


def grad_trajectory_log_prob(params: PolicyParams, traj: Trajectory) -> np.ndarray:
    return weighted_grad(params, [traj], [1.0])


def weighted_grad(params: PolicyParams, trajs: Sequence[Trajectory], coefs: Sequence[float],
                  step_coefs: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Sum of coef_i * grad log P(traj_i), as a flat vector.

    ``step_coefs`` optionally gives a per-token coefficient array for each
    trajectory, replacing the scalar coefficient.
    """
    G = np.zeros_like(params.logits)
    ctx_parts, tok_parts, w_parts = [], [], []
    for i, (traj, c) in enumerate(zip(trajs, coefs)):
        ctx, tok = trajectory_steps(params, traj)
        if len(tok) == 0:
            continue
        ctx_parts.append(ctx)
        tok_parts.append(tok)
        w_parts.append(np.full(len(tok), float(c)) if step_coefs is None else np.asarray(step_coefs[i], dtype=float))
    if not ctx_parts:
        return G.ravel()
    ctx = np.concatenate(ctx_parts)
    tok = np.concatenate(tok_parts)
    w = np.concatenate(w_parts)
    probs = softmax(params.logits[ctx])
    np.add.at(G, (ctx, tok), w)
    np.add.at(G, ctx, -w[:, None] * probs)
    return G.ravel()


def _draw(logits_row: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    p = softmax(logits_row / temperature)
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def _argmax(logits_row: np.ndarray, rng: np.random.Generator | None) -> int:
    best = np.flatnonzero(logits_row == logits_row.max())
    if len(best) == 1 or rng is None:
        return int(best[0])
    # ties split uniformly, which is the zero-temperature limit of sampling
    return int(best[rng.integers(len(best))])


def generate(params: PolicyParams, query: Sequence[int], *, eor_token: int, max_rationale_len: int,
             answer_length: int, temperature: float = 1.0, rng: np.random.Generator | None = None,
             greedy: bool = False) -> Trajectory:
    """Decode a rationale (stopping at ``eor_token`` or the cap) then the answer."""
    if not greedy and not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    if rng is None and not greedy:
        raise InvalidInputError("sampling requires an rng")
    seq = list(query)
    for t in seq:
        _check_token(params, t)

    def pick() -> int:
        row = params.logits[params.context_index(params.context_key(seq))]
        return _argmax(row, rng) if greedy else _draw(row, temperature, rng)

    rationale = []
    stopped = False
    for _ in range(max_rationale_len):
        tok = pick()
        seq.append(tok)
        rationale.append(tok)
        if tok == eor_token:
            stopped = True
            break
    truncated = max_rationale_len > 0 and not stopped
    answer = []
    for _ in range(answer_length):
        tok = pick()
        seq.append(tok)
        answer.append(tok)
    return Trajectory(tuple(query), tuple(rationale), tuple(answer), 0.0, truncated)


def sample_trajectory(params: PolicyParams, query: Sequence[int], temperature: float,
                      max_rationale_len: int, rng: np.random.Generator, *,
                      eor_token: int, answer_length: int) -> Trajectory:
    return generate(params, query, eor_token=eor_token, max_rationale_len=max_rationale_len,
                    answer_length=answer_length, temperature=temperature, rng=rng)


def greedy_trajectory(params: PolicyParams, query: Sequence[int], max_rationale_len: int, *,
                      eor_token: int, answer_length: int, rng: np.random.Generator | None = None) -> Trajectory:
    return generate(params, query, eor_token=eor_token, max_rationale_len=max_rationale_len,
                    answer_length=answer_length, rng=rng, greedy=True)


# checkpoints -----------------------------------------------------------------

def params_to_dict(params: PolicyParams) -> dict:
    records = []
    for c in range(params.n_contexts):
        key = list(params.context_key_of_index(c))
        for t in range(params.vocab_size):
            records.append([key, t, float(params.logits[c, t])])
    return {
        "format": CHECKPOINT_FORMAT,
        "vocab_size": params.vocab_size,
        "context_order": params.context_order,
        "begin_token": params.begin_token,
        "checkpoint_id": params.checkpoint_id(),
        "records": records,
    }


def params_from_dict(data: dict) -> PolicyParams:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"unknown checkpoint format {data.get('format')!r}")
    V, m = int(data["vocab_size"]), int(data["context_order"])
    params = PolicyParams.zeros(V, m, int(data.get("begin_token", 0)))
    logits = np.zeros_like(params.logits)
    seen = np.zeros(logits.shape, dtype=bool)
    for key, tok, value in data["records"]:
        if len(key) != m:
            raise InvalidInputError(f"context key {key} does not have length {m}")
        c = params.context_index(key)
        logits[c, int(tok)] = float(value)
        seen[c, int(tok)] = True
    if not seen.all():
        raise InvalidInputError("checkpoint is missing logit records")
    return PolicyParams(logits, V, m, params.begin_token)


def save_params(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)))


def load_params(path: str | Path) -> PolicyParams:
    return params_from_dict(json.loads(Path(path).read_text()))
