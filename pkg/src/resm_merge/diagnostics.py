"""Desk-scale diagnostics.

* effective-rank profiles of task vectors (how many singular values hold a
  given fraction of the spectral energy),
* outlier profiles (per-row ``mu + k sigma`` thresholding, outlier mass and
  the resulting aggregation weights),
* sparsity profiles,
* a Monte-Carlo check of the conflict bound ``2.5 / sqrt(k)`` for pairs of
  random unit vectors in dimension ``k``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .linalg import effective_rank
from .task_vector import layer_sparsity, outlier_mass, outlier_weights, threshold_mask

__all__ = [
    "ConflictEstimate",
    "conflict_bound",
    "conflict_mc",
    "rank_profile",
    "model_rank_profile",
    "outlier_profile",
    "sparsity_profile",
    "rows_to_csv",
]

# trials are drawn in fixed-size blocks, each seeded by (seed, block index),
# so estimates do not depend on how the work is scheduled
TRIAL_BLOCK = 4096


@dataclass(frozen=True)
class ConflictEstimate:
    k: int
    epsilon_conflict: float
    trials: int
    p_hat: float
    p_hat_se: float
    expected_abs_dot: float
    abs_dot_se: float
    bound: float

    @property
    def abs_dot_passes(self) -> bool:
        return self.expected_abs_dot <= self.bound + 3 * self.abs_dot_se

    @property
    def p_hat_passes(self) -> bool:
        return self.p_hat <= self.bound + 3 * self.p_hat_se

    @property
    def passes(self) -> bool:
        return self.abs_dot_passes and self.p_hat_passes

    def as_dict(self) -> dict:
        out = asdict(self)
        out.update(
            abs_dot_pass=self.abs_dot_passes, p_hat_pass=self.p_hat_passes, passes=self.passes
        )
        return out


def conflict_bound(k: int) -> float:
    """Upper bound ``2.5 / sqrt(k)`` on the expected conflict in dimension ``k``."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    return 2.5 / math.sqrt(k)


def _random_dots(k: int, count: int, rng: np.random.Generator) -> np.ndarray:
    # u.v of normalized Gaussians, without materializing the unit vectors
    g = rng.standard_normal((count, k))
    h = rng.standard_normal((count, k))
    gh = np.einsum("ij,ij->i", g, h)
    gg = np.einsum("ij,ij->i", g, g)
    hh = np.einsum("ij,ij->i", h, h)
    return np.clip(gh / np.sqrt(gg * hh), -1.0, 1.0)


def conflict_mc(
    k: int, epsilon_conflict: float = 0.3, trials: int = 100_000, seed: int = 0
) -> ConflictEstimate:
    """Estimate conflict statistics for independent uniform unit vectors.

    ``p_hat`` is the fraction of pairs with ``u.v > epsilon_conflict`` and
    ``expected_abs_dot`` the mean of ``|u.v|``; both come with Monte-Carlo
    standard errors.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    if trials < 1:
        raise ValueError("trials must be a positive integer")
    dots = []
    for block, start in enumerate(range(0, trials, TRIAL_BLOCK)):
        count = min(TRIAL_BLOCK, trials - start)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), block]))
        dots.append(_random_dots(k, count, rng))
    dot = np.concatenate(dots)
    hits = dot > epsilon_conflict
    abs_dot = np.abs(dot)
    p_hat = float(hits.mean())
    denom = math.sqrt(trials)
    return ConflictEstimate(
        k=k,
        epsilon_conflict=float(epsilon_conflict),
        trials=trials,
        p_hat=p_hat,
        p_hat_se=math.sqrt(p_hat * (1 - p_hat)) / denom,
        expected_abs_dot=float(abs_dot.mean()),
        abs_dot_se=float(abs_dot.std()) / denom,
        bound=conflict_bound(k),
    )


def _spectrum_rank(matrix: np.ndarray, energy: float) -> int:
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return effective_rank(s, energy)


def rank_profile(deltas_by_layer: Mapping[str, Sequence], energy: float = 0.95) -> dict[str, int]:
    """Effective rank of each layer's mean task matrix.

    Layers whose mean task matrix is exactly zero map to 0. Tensors that are
    not 2-D are skipped.
    """
    if not 0 < energy <= 1:
        raise ValueError(f"energy must lie in (0, 1], got {energy}")
    out = {}
    for name, deltas in deltas_by_layer.items():
        mats = [np.asarray(d, dtype=np.float64) for d in deltas]
        if not mats or mats[0].ndim != 2:
            continue
        out[name] = _spectrum_rank(np.mean(mats, axis=0), energy)
    return out


def model_rank_profile(
    deltas_by_layer: Mapping[str, Sequence], energy: float = 0.95
) -> dict[str, list[int]]:
    """Per-model effective ranks for each 2-D layer."""
    out = {}
    for name, deltas in deltas_by_layer.items():
        mats = [np.asarray(d, dtype=np.float64) for d in deltas]
        if not mats or mats[0].ndim != 2:
            continue
        out[name] = [_spectrum_rank(m, energy) for m in mats]
    return out


def _singular_outliers(d: np.ndarray, sigma_mult: float) -> dict:
    s = np.linalg.svd(d, compute_uv=False)
    tau = s.mean() + sigma_mult * s.std()
    idx = np.flatnonzero(s > tau)
    return {"threshold": float(tau), "indices": idx.tolist(), "values": s[idx].tolist()}


def outlier_profile(
    deltas: Sequence, sigma_mult: float = 3.0, mask_singular_outliers: bool = False
) -> dict:
    """Outlier statistics of one layer's task vectors.

    For each model: the fraction of entries kept by the per-row threshold,
    their total L1 mass, and the model's aggregation weight. With
    ``mask_singular_outliers`` the singular values above ``mean + k std`` of
    each model's spectrum are listed as well.
    """
    alpha = outlier_weights(deltas, sigma_mult)
    models = []
    for i, d in enumerate(deltas):
        arr = np.asarray(d, dtype=np.float64)
        kept = threshold_mask(arr, sigma_mult=sigma_mult)
        # a zero entry surviving a zero threshold is not an outlier
        count = int(np.count_nonzero(kept))
        entry = {
            "model": i + 1,
            "outlier_fraction": count / arr.size,
            "outlier_count": count,
            "outlier_mass": outlier_mass(arr, sigma_mult),
            "alpha": float(alpha[i]),
        }
        if mask_singular_outliers and arr.ndim == 2:
            entry["singular_outliers"] = _singular_outliers(arr, sigma_mult)
        models.append(entry)
    return {"sigma_mult": sigma_mult, "alpha": alpha.tolist(), "models": models}


def sparsity_profile(deltas_by_layer: Mapping[str, Sequence], epsilon: float = 0.1) -> dict[str, float]:
    """Layer sparsity (fraction of ``|delta| < epsilon``) for every layer."""
    return {name: layer_sparsity(ds, epsilon) for name, ds in deltas_by_layer.items()}


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
