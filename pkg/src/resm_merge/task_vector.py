"""Task vectors and the per-layer statistics used for reweighting.

A task vector is the difference between a fine-tuned layer and the base
layer. From a layer's task vectors we derive:

* row-wise outlier statistics (mean and spread of ``|delta|`` per row),
* a hard-threshold mask keeping entries at or above ``mu + k * sigma``,
* per-model aggregation weights ``alpha`` (normalized outlier L1 mass),
* the layer sparsity ``omega`` (fraction of near-zero entries),
* the sparsity-adaptive rank ``floor(d * (gamma0 + gamma * omega))``.

Statistics are always computed on the full, untruncated task vectors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyMatrix, ShapeMismatch

logger = logging.getLogger(__name__)

__all__ = [
    "DeltaMatrix",
    "RowStats",
    "LayerStats",
    "ResmParams",
    "delta",
    "row_stats",
    "threshold_mask",
    "outlier_mass",
    "outlier_weights",
    "layer_sparsity",
    "dynamic_rank",
]


@dataclass(frozen=True)
class DeltaMatrix:
    """Task vector of one model for one layer."""

    values: np.ndarray
    model_index: int = 1
    layer_name: str = ""

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class RowStats:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class LayerStats:
    alpha: list[float]
    omega: float
    rank_k: int
    retained_rank: int
    clamped: bool = False
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class ResmParams:
    """Hyperparameters of the reweighted singular-vector merge.

    ``scale`` multiplies the summed merged update of every layer.
    ``invert_alpha`` flips the outlier weighting so that models with more
    outlier mass receive *less* weight (off by default); ``uniform_alpha``
    replaces the outlier weights by ``1/n``.
    """

    gamma0: float = 0.2
    gamma: float = 0.6
    epsilon: float = 0.1
    sigma_mult: float = 3.0
    scale: float = 1.0
    rank_override: int | None = None
    invert_alpha: bool = False
    uniform_alpha: bool = False

    def __post_init__(self):
        if not self.gamma0 > 0 or not self.gamma > 0:
            raise ValueError("gamma0 and gamma must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.rank_override is not None and self.rank_override < 1:
            raise ValueError("rank_override must be a positive integer")
        if self.gamma0 + self.gamma > 1:
            logger.warning(
                "gamma0 + gamma = %.3f exceeds 1; ranks will be clamped to the layer size",
                self.gamma0 + self.gamma,
            )


def _rows(d) -> np.ndarray:
    """View any task vector as a 2-D float64 matrix (vectors become one row)."""
    arr = np.asarray(d, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def delta(model_layer, base_layer, model_index: int = 1, layer_name: str = "") -> DeltaMatrix:
    """Element-wise ``model_layer - base_layer``."""
    a = np.asarray(model_layer, dtype=np.float64)
    b = np.asarray(base_layer, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} vs base {b.shape}", layer=layer_name or None)
    return DeltaMatrix(a - b, model_index, layer_name)


def row_stats(d) -> RowStats:
    """Per-row mean and population standard deviation of ``|d|``."""
    a = np.abs(_rows(d))
    if a.shape[1] == 0:
        raise EmptyMatrix("row statistics need at least one column")
    mu = a.mean(axis=1)
    # two-pass form of sqrt(E|x|^2 - mu^2): same quantity, no cancellation
    sigma = np.sqrt(np.maximum(((a - mu[:, None]) ** 2).mean(axis=1), 0.0))
    return RowStats(mu, sigma)


def threshold_mask(d, stats: RowStats | None = None, sigma_mult: float = 3.0) -> np.ndarray:
    """Zero every entry whose magnitude is strictly below its row threshold.

    The threshold of row ``r`` is ``mu[r] + sigma_mult * sigma[r]``; entries
    exactly at the threshold are kept. The output has the input's shape.
    """
    arr = np.asarray(d, dtype=np.float64)
    rows = _rows(arr)
    if stats is None:
        stats = row_stats(rows)
    tau = stats.mu + sigma_mult * stats.sigma
    kept = np.where(np.abs(rows) >= tau[:, None], rows, 0.0)
    return kept.reshape(arr.shape)


def outlier_mass(d, sigma_mult: float = 3.0) -> float:
    """Total L1 mass of the entries surviving :func:`threshold_mask`."""
    return float(np.abs(threshold_mask(d, sigma_mult=sigma_mult)).sum())


def outlier_weights(deltas: Sequence, sigma_mult: float = 3.0, invert: bool = False) -> np.ndarray:
    """L1-normalized outlier masses, one weight per model.

    When no model has outlier mass the weights are uniform. With
    ``invert=True`` the complement ``(1 - alpha) / (n - 1)`` is returned,
    which still sums to one but favours models with *less* outlier mass.
    """
    if len(deltas) == 0:
        raise ValueError("need at least one task vector")
    shape = np.shape(deltas[0])
    for d in deltas[1:]:
        if np.shape(d) != shape:
            raise ShapeMismatch(f"task vector shapes differ: {shape} vs {np.shape(d)}")
    n = len(deltas)
    masses = np.array([outlier_mass(d, sigma_mult) for d in deltas])
    total = masses.sum()
    if total == 0:
        alpha = np.full(n, 1.0 / n)
    else:
        alpha = masses / total
    if invert and n > 1:
        alpha = (1.0 - alpha) / (n - 1)
    return alpha


def layer_sparsity(deltas: Sequence, epsilon: float = 0.1) -> float:
    """Fraction of entries, over all models, with ``|delta| < epsilon``."""
    if len(deltas) == 0:
        raise ValueError("need at least one task vector")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    small = 0
    total = 0
    for d in deltas:
        a = np.asarray(d, dtype=np.float64)
        small += int(np.count_nonzero(np.abs(a) < epsilon))
        total += a.size
    return small / total


def dynamic_rank(d_l: int, omega: float, gamma0: float = 0.2, gamma: float = 0.6) -> int:
    """Sparsity-adaptive rank ``floor(d_l * (gamma0 + gamma * omega))`` in ``[1, d_l]``."""
    if d_l < 1:
        raise ValueError("d_l must be a positive integer")
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    k = math.floor(d_l * (gamma0 + gamma * omega))
    return min(max(k, 1), d_l)
