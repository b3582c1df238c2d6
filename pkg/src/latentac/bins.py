"""Discretization grids for values and actions.

Value distributions are categoricals over an evenly spaced bin grid; the
scalar value is the expectation of bin centers. Actions are discretized
per dimension onto uniform bin centers over a configured range.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch


@dataclass(frozen=True)
class ValueBins:
    """Evenly spaced value-bin grid on [q_min, q_max]."""

    q_min: float
    q_max: float
    count: int = 101

    def __post_init__(self):
        if not self.q_min < self.q_max:
            raise ValueError("q_min must be < q_max")
        if self.count < 2:
            raise ValueError("need at least 2 bins")

    @property
    def epsilon(self) -> float:
        return (self.q_max - self.q_min) / (self.count - 1)

    @cached_property
    def centers(self) -> np.ndarray:
        return np.linspace(self.q_min, self.q_max, self.count)

    def torch_centers(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.centers, dtype=dtype)

    def nearest_index(self, values):
        """Index of the bin center nearest to each value.

        Values are clipped into [q_min, q_max] first; exact midpoints
        between two centers go to the lower bin.
        """
        if isinstance(values, torch.Tensor):
            v = values.clamp(self.q_min, self.q_max)
            idx = torch.ceil((v - self.q_min) / self.epsilon - 0.5)
            return idx.clamp(0, self.count - 1).long()
        v = np.clip(np.asarray(values, dtype=np.float64), self.q_min, self.q_max)
        idx = np.ceil((v - self.q_min) / self.epsilon - 0.5)
        return np.clip(idx, 0, self.count - 1).astype(np.int64)


def q_value(logits, bins: ValueBins):
    """Expected value: bin centers weighted by softmax(logits) over the last axis."""
    if isinstance(logits, torch.Tensor):
        probs = torch.softmax(logits, dim=-1)
        return probs @ bins.torch_centers(logits.dtype)
    probs = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs @ bins.centers


@dataclass(frozen=True)
class ActionCodec:
    """Per-dimension uniform action bins over [low, high]."""

    n_dims: int
    n_bins: int
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.n_bins < 1 or self.n_dims < 1:
            raise ValueError("n_dims and n_bins must be positive")
        if self.n_bins > 1 and not self.low < self.high:
            raise ValueError("low must be < high")

    @cached_property
    def centers(self) -> np.ndarray:
        if self.n_bins == 1:
            return np.array([0.5 * (self.low + self.high)])
        return np.linspace(self.low, self.high, self.n_bins)

    def to_indices(self, actions: torch.Tensor) -> torch.Tensor:
        """(..., n_dims) continuous actions -> nearest bin index per dimension."""
        if self.n_bins == 1:
            return torch.zeros(actions.shape, dtype=torch.long, device=actions.device)
        step = (self.high - self.low) / (self.n_bins - 1)
        a = actions.clamp(self.low, self.high)
        idx = torch.ceil((a - self.low) / step - 0.5)
        return idx.clamp(0, self.n_bins - 1).long()

    def to_values(self, indices: torch.Tensor) -> torch.Tensor:
        centers = torch.as_tensor(self.centers, dtype=torch.float64,
                                  device=indices.device)
        return centers[indices]
