"""Element-wise baseline merge operators.

All of them are instances of ``base + sum_i w_i * m_i * delta_i`` with a
binary mask ``m_i`` per model: weight averaging, task arithmetic, TIES
(top-k trim + sign election), DARE (random drop + rescale) and Breadcrumbs
(discard both magnitude tails). Tensors of any rank are handled through a
flattened view.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidFractions, LengthMismatch, ShapeMismatch

logger = logging.getLogger(__name__)

__all__ = [
    "MaskedDelta",
    "weight_average",
    "task_arithmetic",
    "topk_mask",
    "ties_combine",
    "dare_drop",
    "breadcrumbs_mask",
    "derive_rng",
]


@dataclass(frozen=True)
class MaskedDelta:
    """A task vector after masking (and, for DARE, rescaling).

    ``mask`` is the boolean selection; unselected entries of ``values`` are 0.
    """

    values: np.ndarray
    mask: np.ndarray

    @property
    def mask_density(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _stack(tensors: Sequence) -> np.ndarray:
    if len(tensors) == 0:
        raise ValueError("need at least one tensor")
    arrays = [np.asarray(t, dtype=np.float64) for t in tensors]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeMismatch(f"tensor shapes differ: {shape} vs {a.shape}")
    return np.stack(arrays)


def weight_average(layers: Sequence, weights: Sequence[float]) -> np.ndarray:
    """Weighted sum of ``layers``; weights are renormalized to sum to one."""
    stacked = _stack(layers)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (stacked.shape[0],):
        raise LengthMismatch(f"{stacked.shape[0]} tensors but {w.size} weights")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    total = w.sum()
    if total == 0:
        raise ValueError("weights sum to zero")
    if abs(total - 1.0) > 1e-12:
        logger.warning("weights sum to %.6g; normalizing", total)
        w = w / total
    return np.tensordot(w, stacked, axes=1)


def task_arithmetic(base, deltas: Sequence, lam: float = 1.0) -> np.ndarray:
    """``base + lam * sum(deltas)``."""
    b = np.asarray(base, dtype=np.float64)
    stacked = _stack(deltas)
    if stacked.shape[1:] != b.shape:
        raise ShapeMismatch(f"delta shape {stacked.shape[1:]} vs base {b.shape}")
    return b + lam * stacked.sum(axis=0)


def _magnitude_order(flat: np.ndarray) -> np.ndarray:
    # descending magnitude; ties keep the smaller (row-major) index first
    return np.argsort(-np.abs(flat), kind="stable")


def topk_mask(delta, density: float) -> MaskedDelta:
    """Keep the ``ceil(density * N)`` largest-magnitude entries of a tensor."""
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    arr = np.asarray(delta, dtype=np.float64)
    flat = arr.ravel()
    k = min(flat.size, math.ceil(density * flat.size - 1e-9))
    mask = np.zeros(flat.size, dtype=bool)
    mask[_magnitude_order(flat)[:k]] = True
    mask = mask.reshape(arr.shape)
    return MaskedDelta(np.where(mask, arr, 0.0), mask)


def ties_combine(masked: Sequence, lam: float = 1.0) -> np.ndarray:
    """Sign election followed by a disjoint mean.

    Per coordinate the elected sign is the sign of the summed values; the
    output is ``lam`` times the mean of the values agreeing with it. A zero
    sum yields 0.
    """
    stacked = _stack(masked)
    elected = np.sign(stacked.sum(axis=0))
    agree = (np.sign(stacked) == elected) & (elected != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, stacked, 0.0).sum(axis=0)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return lam * mean


def derive_rng(seed: int, layer_name: str = "", model_index: int = 0) -> np.random.Generator:
    """Generator determined only by ``(seed, layer_name, model_index)``."""
    digest = hashlib.sha256(layer_name.encode("utf-8")).digest()
    name_words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    seq = np.random.SeedSequence([int(seed) & (2**64 - 1), *name_words, int(model_index)])
    return np.random.default_rng(seq)


def dare_drop(
    delta,
    drop_p: float,
    rng_seed: int = 0,
    layer_name: str = "",
    model_index: int = 0,
) -> MaskedDelta:
    """Drop each entry with probability ``drop_p``; rescale survivors by ``1/(1-drop_p)``."""
    if not 0 <= drop_p < 1:
        raise ValueError(f"drop_p must lie in [0, 1), got {drop_p}")
    arr = np.asarray(delta, dtype=np.float64)
    if drop_p == 0:
        return MaskedDelta(arr.copy(), np.ones(arr.shape, dtype=bool))
    rng = derive_rng(rng_seed, layer_name, model_index)
    mask = rng.random(arr.shape) >= drop_p
    return MaskedDelta(np.where(mask, arr / (1.0 - drop_p), 0.0), mask)


def breadcrumbs_mask(delta, top_discard: float = 0.01, bottom_discard: float = 0.15) -> MaskedDelta:
    """Zero the largest ``top_discard`` and smallest ``bottom_discard`` fractions by magnitude."""
    if top_discard < 0 or bottom_discard < 0 or top_discard + bottom_discard >= 1:
        raise InvalidFractions(
            f"need 0 <= top, bottom and top + bottom < 1 (got {top_discard}, {bottom_discard})"
        )
    arr = np.asarray(delta, dtype=np.float64)
    flat = arr.ravel()
    n = flat.size
    n_top = math.floor(top_discard * n + 1e-9)
    n_bottom = math.floor(bottom_discard * n + 1e-9)
    order = _magnitude_order(flat)
    mask = np.zeros(n, dtype=bool)
    mask[order[n_top:n - n_bottom]] = True
    mask = mask.reshape(arr.shape)
    return MaskedDelta(np.where(mask, arr, 0.0), mask)
