"""Reward smoothing and baseline subtraction for one mini-batch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

BASELINE_MODES = ("batch-mean", "none")
SHAPINGS = ("smoothed", "raw")


@dataclass(frozen=True)
class ShapedBatch:
    trajectory_refs: tuple[int, ...]
    raw_rewards: np.ndarray
    smoothed_rewards: np.ndarray
    baseline: float
    advantages: np.ndarray
    batch_mean: float
    batch_std: float

    def __len__(self) -> int:
        return len(self.trajectory_refs)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def standardize(raw: Sequence[float]) -> tuple[np.ndarray, float, float]:
    """(R - mean) / std with the population std; a constant batch maps to zeros."""
    r = np.asarray(raw, dtype=np.float64)
    if r.ndim != 1 or len(r) == 0:
        raise InvalidInputError("reward batch must be a non-empty vector")
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise InvalidInputError("rewards must be finite and nonnegative")
    mu, sd = float(r.mean()), float(r.std())
    # all-equal batches can still produce a rounding-level std; treat them as degenerate
    if sd == 0.0 or np.ptp(r) == 0.0:
        return np.zeros_like(r), mu, 0.0
    return (r - mu) / sd, mu, sd


def smooth_rewards(raw: Sequence[float]) -> np.ndarray:
    z, _, _ = standardize(raw)
    return sigmoid(z)


def shape_rewards(raw: Sequence[float], baseline_mode: str = "batch-mean",
                  shaping: str = "smoothed") -> tuple[np.ndarray, np.ndarray, float, float, float]:
    """Returns (coefficients-before-baseline, advantages, baseline, mean, std)."""
    if baseline_mode not in BASELINE_MODES:
        raise InvalidInputError(f"baseline_mode must be one of {BASELINE_MODES}, got {baseline_mode!r}")
    if shaping not in SHAPINGS:
        raise InvalidInputError(f"shaping must be one of {SHAPINGS}, got {shaping!r}")
    z, mu, sd = standardize(raw)
    values = sigmoid(z) if shaping == "smoothed" else np.asarray(raw, dtype=np.float64)
    b = float(values.mean()) if baseline_mode == "batch-mean" else 0.0
    return values, values - b, b, mu, sd


def shape_batch(buffer, batch_indices: Sequence[int], baseline_mode: str = "batch-mean",
                shaping: str = "smoothed") -> ShapedBatch:
    idx = tuple(int(i) for i in batch_indices)
    if not idx:
        raise InvalidInputError("empty batch")
    n = len(buffer)
    if any(not 0 <= i < n for i in idx):
        raise InvalidInputError(f"batch index out of range for buffer of size {n}")
    raw = np.array([buffer[i].raw_reward for i in idx], dtype=np.float64)
    values, adv, b, mu, sd = shape_rewards(raw, baseline_mode, shaping)
    return ShapedBatch(idx, raw, values, b, adv, mu, sd)


def shape_rewards_rows(raw: np.ndarray, baseline_mode: str = "batch-mean",
                       shaping: str = "smoothed") -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise :func:`shape_rewards` for a (n_batches, batch_size) array."""
    if baseline_mode not in BASELINE_MODES:
        raise InvalidInputError(f"baseline_mode must be one of {BASELINE_MODES}, got {baseline_mode!r}")
    if shaping not in SHAPINGS:
        raise InvalidInputError(f"shaping must be one of {SHAPINGS}, got {shaping!r}")
    r = np.asarray(raw, dtype=np.float64)
    mu = r.mean(axis=1)
    sd = r.std(axis=1)
    degenerate = (sd == 0.0) | (np.ptp(r, axis=1) == 0.0)
    safe = np.where(degenerate, 1.0, sd)
    z = np.where(degenerate[:, None], 0.0, (r - mu[:, None]) / safe[:, None])
    values = sigmoid(z) if shaping == "smoothed" else r
    b = values.mean(axis=1) if baseline_mode == "batch-mean" else np.zeros(len(r))
    sd = np.where(degenerate, 0.0, sd)
    return values, values - b[:, None], b, mu, sd
