"""E-step: fill a replay buffer with scored samples from the frozen policy."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation, InvalidInputError
from .policy import PolicyParams, Trajectory, sample_trajectory
from .tasks import TaskSpec, reward, sample_query


@dataclass
class Buffer:
    """Trajectories drawn from the single policy named by ``theta_star_id``.

    Append-only until :meth:`freeze`; the M-step only ever sees frozen buffers.
    """

    theta_star_id: str
    n_queries: int
    n_per_query: int
    temperature: float
    trajectories: list[Trajectory] = field(default_factory=list)
    frozen: bool = False
    _stats: tuple | None = field(default=None, repr=False)

    def append(self, traj: Trajectory) -> None:
        if self.frozen:
            raise ContractViolation("buffer is frozen")
        self.trajectories.append(traj)
        self._stats = None

    def freeze(self) -> "Buffer":
        if len(self.trajectories) != self.n_queries * self.n_per_query:
            raise ContractViolation(
                f"buffer holds {len(self.trajectories)} trajectories, expected {self.n_queries * self.n_per_query}")
        self.frozen = True
        return self

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.raw_reward for t in self.trajectories], dtype=np.float64)

    @property
    def reward_stats(self) -> tuple[float, float]:
        """(mean, population std) of raw rewards, cached."""
        if self._stats is None:
            r = self.rewards
            self._stats = (float(r.mean()), float(r.std())) if len(r) else (0.0, 0.0)
        return self._stats

    @property
    def mean_length(self) -> float:
        return float(np.mean([t.length for t in self.trajectories])) if self.trajectories else 0.0

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for t in self.trajectories:
                fh.write(json.dumps({
                    "query": list(t.query), "rationale": list(t.rationale), "answer": list(t.answer),
                    "raw_reward": t.raw_reward, "truncated": t.truncated, "theta_star_id": self.theta_star_id,
                }) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, n_per_query: int, temperature: float) -> "Buffer":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        ids = {r["theta_star_id"] for r in rows}
        if len(ids) != 1:
            raise InvalidInputError(f"buffer file mixes {len(ids)} policies")
        buf = cls(ids.pop(), len(rows) // n_per_query, n_per_query, temperature)
        for r in rows:
            buf.append(Trajectory(r["query"], r["rationale"], r["answer"], r["raw_reward"], r["truncated"]))
        return buf.freeze()


def _rollout_query(params: PolicyParams, task: TaskSpec, query: tuple, n: int, temperature: float,
                   rng: np.random.Generator) -> list[Trajectory]:
    out = []
    for _ in range(n):
        traj = sample_trajectory(params, query, temperature, task.max_rationale_len, rng,
                                 eor_token=task.eor_token, answer_length=task.answer_length)
        out.append(traj.with_reward(reward(task, traj)))
    return out


def e_step(params_star: PolicyParams, task: TaskSpec, n_queries: int, n_per_query: int,
           temperature: float, rng: np.random.Generator, *, query_pool: Sequence[tuple] | None = None,
           lanes: int = 1) -> Buffer:
    """Sample ``n_per_query`` trajectories for each of ``n_queries`` queries.

    Each query gets its own child stream spawned from ``rng``, so the buffer is
    identical for any number of ``lanes``.
    """
    if n_queries < 1 or n_per_query < 1:
        raise InvalidInputError("n_queries and n_per_query must be >= 1")
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    if query_pool is not None:
        if not query_pool:
            raise InvalidInputError("query pool is empty")
        queries = [tuple(query_pool[i % len(query_pool)]) for i in range(n_queries)]
    else:
        queries = [sample_query(task, rng) for _ in range(n_queries)]
    streams = rng.spawn(n_queries)
    buf = Buffer(params_star.checkpoint_id(), n_queries, n_per_query, temperature)

    def work(i):
        return _rollout_query(params_star, task, queries[i], n_per_query, temperature, streams[i])

    if lanes > 1:
        with ThreadPoolExecutor(max_workers=lanes) as pool:
            groups = list(pool.map(work, range(n_queries)))
    else:
        groups = [work(i) for i in range(n_queries)]
    for group in groups:
        for traj in group:
            buf.append(traj)
    return buf.freeze()
