"""Singular-vector merging (TSVM and RESM) and whole-checkpoint orchestration.

Per layer, each model's task vector is decomposed by SVD; the leading
singular vectors of all models are stacked and jointly orthogonalized
(orthogonal Procrustes), so the per-model components no longer interfere,
and the layer is rebuilt as ``base + scale * sum_i U_i diag(S_i) V_i^T``.

RESM additionally reweights each model's singular values by its outlier
weight ``alpha_i`` and picks the retained rank per layer from the layer's
sparsity.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import linalg
from .errors import HighRankTensor, IoFailure, MergeError, RankDeficient, ShapeMismatch
from .merge_methods import (
    breadcrumbs_mask,
    dare_drop,
    task_arithmetic,
    ties_combine,
    topk_mask,
    weight_average,
)
from .plan import MergePlan
from .task_vector import (
    LayerStats,
    ResmParams,
    dynamic_rank,
    layer_sparsity,
    outlier_weights,
)
from .tensor_store import (
    Checkpoint,
    CheckpointReader,
    TensorRecord,
    atomic_write_bytes,
    encode_array,
    serialize,
    validate_compat,
)

logger = logging.getLogger(__name__)

__all__ = [
    "LayerMergeOutcome",
    "tsvm_layer",
    "resm_layer",
    "merge_model",
    "run_plan",
    "report_path_for",
]


@dataclass
class LayerMergeOutcome:
    """Merged layer plus what the engine decided for it.

    ``components`` holds the orthogonalized per-model factors
    ``(U_i, S_i, V_i)`` that were summed, for inspection.
    """

    merged: np.ndarray
    method: str
    retained_rank: int
    stats: LayerStats | None = None
    clamped: bool = False
    warnings: list[str] = field(default_factory=list)
    components: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=list, repr=False
    )


def _prepare(base_l, deltas: Sequence, layer_name: str) -> tuple[np.ndarray, list[np.ndarray]]:
    base = np.asarray(base_l, dtype=np.float64)
    if base.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D layer, got shape {base.shape}", layer=layer_name or None)
    if len(deltas) == 0:
        raise ValueError("need at least one task vector")
    ds = [np.asarray(d, dtype=np.float64) for d in deltas]
    for d in ds:
        if d.shape != base.shape:
            raise ShapeMismatch(f"task vector shape {d.shape} vs layer {base.shape}",
                                layer=layer_name or None)
    return base, ds


def _joint_merge(
    base: np.ndarray,
    factors: Sequence[linalg.SvdFactors],
    weights: np.ndarray,
    r: int,
    scale: float,
) -> tuple[np.ndarray, list]:
    # components with zero singular value add nothing to the sum, but their
    # arbitrary singular vectors would still rotate everyone else's, so each
    # model keeps at most its numerical rank
    kept = []
    for i, f in enumerate(factors):
        r_i = min(r, linalg.numerical_rank(f.s, base.shape))
        if r_i > 0:
            kept.append((i, r_i))
    if not kept:
        return base.copy(), []

    u_cat = np.hstack([factors[i].u[:, :r_i] for i, r_i in kept])
    v_cat = np.hstack([factors[i].v[:, :r_i] for i, r_i in kept])
    u_orth = linalg.orthogonalize(u_cat)
    v_orth = linalg.orthogonalize(v_cat)

    update = np.zeros_like(base)
    components = []
    start = 0
    for i, r_i in kept:
        u_i = u_orth[:, start:start + r_i]
        v_i = v_orth[:, start:start + r_i]
        # reweight the full spectrum first, then slice to the retained rank
        s_i = (weights[i] * factors[i].s)[:r_i]
        update += (u_i * s_i) @ v_i.T
        components.append((u_i, s_i, v_i))
        start += r_i
    return base + scale * update, components


def _merge_with_retry(base, factors, weights, r, scale, layer_name, warnings):
    try:
        return r, _joint_merge(base, factors, weights, r, scale)
    except RankDeficient as exc:
        half = r // 2
        if half < 1:
            raise RankDeficient(str(exc), layer=layer_name or None) from exc
        msg = f"stacked singular vectors rank deficient at rank {r}; retrying with rank {half}"
        logger.warning("%s: %s", layer_name or "<layer>", msg)
        warnings.append(msg)
        try:
            return half, _joint_merge(base, factors, weights, half, scale)
        except RankDeficient as exc2:
            raise RankDeficient(str(exc2), layer=layer_name or None) from exc2


def tsvm_layer(
    base_l,
    deltas: Sequence,
    k_fixed: int,
    scale: float = 1.0,
    layer_name: str = "",
) -> LayerMergeOutcome:
    """Merge one 2-D layer with a fixed per-model rank ``k_fixed``.

    If ``n * k_fixed`` exceeds ``min(rows, cols)`` the rank is reduced to
    ``min(rows, cols) // n`` with a warning. Layers smaller than the number of
    models fall back to plain task arithmetic.
    """
    base, ds = _prepare(base_l, deltas, layer_name)
    if k_fixed < 1:
        raise ValueError("k_fixed must be a positive integer")
    n = len(ds)
    d = min(base.shape)
    warnings: list[str] = []

    if d < n:
        msg = f"layer dimension {d} < {n} models; falling back to task arithmetic"
        logger.warning("%s: %s", layer_name or "<layer>", msg)
        merged = task_arithmetic(base, ds, scale)
        return LayerMergeOutcome(merged, "TSVM", 0, None, True, [msg])

    k = k_fixed
    clamped = False
    if n * k > d:
        k = d // n
        clamped = True
        msg = f"k_fixed={k_fixed} infeasible for {n} models in dimension {d}; using {k}"
        logger.warning("%s: %s", layer_name or "<layer>", msg)
        warnings.append(msg)

    factors = [linalg.svd(x) for x in ds]
    weights = np.ones(n)
    k, (merged, comps) = _merge_with_retry(base, factors, weights, k, scale, layer_name, warnings)
    return LayerMergeOutcome(merged, "TSVM", k, None, clamped or k < k_fixed, warnings, comps)


def resm_layer(
    base_l,
    deltas: Sequence,
    params: ResmParams | None = None,
    layer_name: str = "",
) -> LayerMergeOutcome:
    """Reweighted singular-vector merge of one 2-D layer.

    Order of work: outlier weights and sparsity on the full task vectors,
    then the dynamic rank, then full SVDs, joint orthogonalization,
    reweighting of the singular values and finally rank selection.
    """
    params = params or ResmParams()
    base, ds = _prepare(base_l, deltas, layer_name)
    n = len(ds)
    d = min(base.shape)
    warnings: list[str] = []

    if params.uniform_alpha:
        alpha = np.full(n, 1.0 / n)
    else:
        alpha = outlier_weights(ds, params.sigma_mult, invert=params.invert_alpha)
    omega = layer_sparsity(ds, params.epsilon)
    k_l = dynamic_rank(d, omega, params.gamma0, params.gamma)

    if d < n:
        msg = f"layer dimension {d} < {n} models; falling back to alpha-weighted task arithmetic"
        logger.warning("%s: %s", layer_name or "<layer>", msg)
        merged = base + params.scale * np.tensordot(alpha, np.stack(ds), axes=1)
        stats = LayerStats(alpha.tolist(), omega, k_l, 0, True, [msg])
        return LayerMergeOutcome(merged, "RESM", 0, stats, True, [msg])

    target = k_l
    if params.rank_override is not None:
        target = min(params.rank_override, d)
    r = min(target, d // n)
    clamped = r < target
    if clamped:
        msg = f"rank {target} infeasible for {n} models in dimension {d}; using {r}"
        logger.warning("%s: %s", layer_name or "<layer>", msg)
        warnings.append(msg)

    factors = [linalg.svd(x) for x in ds]
    r_used, (merged, comps) = _merge_with_retry(
        base, factors, alpha, r, params.scale, layer_name, warnings
    )
    clamped = clamped or r_used < r
    stats = LayerStats(alpha.tolist(), omega, k_l, r_used, clamped, warnings)
    return LayerMergeOutcome(merged, "RESM", r_used, stats, clamped, warnings, comps)


# -- whole checkpoints -----------------------------------------------------------


def _shape2(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return 1, shape[0]
    return shape[0], int(np.prod(shape[1:]))


def _merge_vector(base, deltas, plan: MergePlan) -> tuple[np.ndarray, list[float] | None]:
    policy = plan.effective_vector_policy
    scale = plan.resm.scale if plan.method == "resm" else plan.lam
    if policy == "base_passthrough":
        return base.copy(), None
    if policy == "uniform_ta":
        return task_arithmetic(base, deltas, scale), None
    if plan.resm.uniform_alpha:
        alpha = np.full(len(deltas), 1.0 / len(deltas))
    else:
        alpha = outlier_weights(deltas, plan.resm.sigma_mult, invert=plan.resm.invert_alpha)
    return base + scale * np.tensordot(alpha, np.stack(deltas), axes=1), alpha.tolist()


def _merge_elementwise(name, base, models, deltas, plan: MergePlan) -> np.ndarray:
    method = plan.method
    n = len(models)
    if method == "weight_average":
        weights = plan.weights if plan.weights is not None else [1.0 / n] * n
        return weight_average(models, weights)
    if method == "task_arithmetic":
        return task_arithmetic(base, deltas, plan.lam)
    if method in ("dare", "dare_ties"):
        masked = [
            dare_drop(dl, plan.drop_p, plan.seed, name, i + 1) for i, dl in enumerate(deltas)
        ]
    elif method == "ties":
        masked = [topk_mask(dl, plan.density) for dl in deltas]
    elif method in ("breadcrumbs", "breadcrumbs_ties"):
        masked = [breadcrumbs_mask(dl, plan.top_discard, plan.bottom_discard) for dl in deltas]
    else:
        raise ValueError(f"not an element-wise method: {method}")
    if method in ("ties", "dare_ties", "breadcrumbs_ties"):
        return base + ties_combine(masked, plan.lam)
    return task_arithmetic(base, masked, plan.lam)


def _merge_tensor(name, info, base_src, model_srcs, plan: MergePlan):
    rows, cols = _shape2(info.shape)
    entry: dict[str, Any] = {
        "layer": name,
        "method": plan.method,
        "rows": rows,
        "cols": cols,
        "omega": None,
        "k_l": None,
        "retained_rank": None,
        "alpha": None,
        "clamped": False,
        "warnings": [],
    }
    if len(info.shape) > 2:
        if not plan.passthrough_high_rank:
            raise HighRankTensor(
                f"tensor of rank {len(info.shape)} cannot be merged "
                "(set passthrough_high_rank to copy it from the base)",
                layer=name,
            )
        entry["method"] = "base_passthrough"
        entry["warnings"].append("rank > 2 tensor copied from base unmerged")
        return base_src.record(name), entry

    base = base_src.load(name)
    models = [m.load(name) for m in model_srcs]
    deltas = [m - base for m in models]

    if plan.method in ("tsvm", "resm") and len(info.shape) == 2:
        if plan.method == "tsvm":
            k_fixed = plan.k_fixed or max(min(info.shape) // len(deltas), 1)
            out = tsvm_layer(base, deltas, k_fixed, plan.lam, layer_name=name)
            entry["k_l"] = k_fixed
        else:
            out = resm_layer(base, deltas, plan.resm, layer_name=name)
            entry["omega"] = out.stats.omega
            entry["k_l"] = out.stats.rank_k
            entry["alpha"] = out.stats.alpha
        merged = out.merged
        entry["retained_rank"] = out.retained_rank
        entry["clamped"] = out.clamped
        entry["warnings"] = list(out.warnings)
    elif plan.method in ("tsvm", "resm"):
        merged, alpha = _merge_vector(base, deltas, plan)
        entry["method"] = plan.effective_vector_policy
        entry["alpha"] = alpha
    else:
        merged = _merge_elementwise(name, base, models, deltas, plan)

    record = TensorRecord(name, info.dtype, info.shape, encode_array(merged, info.dtype))
    return record, entry


def merge_model(base, models: Sequence, plan: MergePlan, threads: int | None = None):
    """Merge every tensor of ``models`` into ``base`` according to ``plan``.

    ``base`` and ``models`` may be :class:`Checkpoint` or
    :class:`CheckpointReader` objects. Layers are processed by a thread pool
    of ``threads`` workers (default: ``plan.threads`` or the CPU count); the
    result does not depend on the worker count.

    Returns:
        ``(checkpoint, report)`` where ``report`` is a JSON-ready dict with
        one entry per tensor.
    """
    if len(models) == 0:
        raise ValueError("need at least one model to merge")
    manifest = validate_compat([base, *models])
    infos = base.infos
    workers = threads or plan.threads or os.cpu_count() or 1

    def work(name):
        try:
            return _merge_tensor(name, infos[name], base, models, plan)
        except MergeError as exc:
            if exc.layer is None:
                raise type(exc)(str(exc), layer=name) from exc
            raise

    names = manifest.names
    if workers == 1:
        results = [work(n) for n in names]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(work, n) for n in names]
            try:
                results = [f.result() for f in futures]
            except BaseException:
                for f in futures:
                    f.cancel()
                raise

    merged = Checkpoint([rec for rec, _ in results], getattr(base, "metadata", None))
    report = {
        "method": plan.method,
        "n_models": len(models),
        "layers": [entry for _, entry in results],
    }
    return merged, report


def report_path_for(output_path: str | os.PathLike) -> Path:
    output_path = Path(output_path)
    return output_path.with_name(output_path.name + ".report.json")


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n").encode("utf-8")


def run_plan(plan: MergePlan, threads: int | None = None) -> dict:
    """Execute a plan end to end: read, merge, write checkpoint and report.

    Nothing is left on disk if any step fails.
    """
    readers: list[CheckpointReader] = []
    try:
        for p in [plan.base_path, *plan.model_paths]:
            try:
                readers.append(CheckpointReader(p))
            except IoFailure:
                raise
            except OSError as exc:
                raise IoFailure(f"cannot open {p}: {exc.strerror}") from exc
        merged, report = merge_model(readers[0], readers[1:], plan, threads=threads)
    finally:
        for r in readers:
            r.close()

    payload = serialize(merged)
    report_bytes = dump_json(report)
    out = Path(plan.output_path)
    atomic_write_bytes(out, payload)
    try:
        atomic_write_bytes(report_path_for(out), report_bytes)
    except BaseException:
        out.unlink(missing_ok=True)
        raise
    return report
