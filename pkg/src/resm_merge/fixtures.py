"""Deterministic synthetic checkpoints with controlled task-vector structure.

Each fine-tuned model is ``base + delta`` where, per matrix layer, ``delta``
is a low-rank product ``U diag(s) V^T`` supported on a subset of rows, plus
optional dense noise and injected heavy-tailed outliers. With
``orthogonal_deltas`` the models' singular subspaces are disjoint blocks of
one shared orthonormal basis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .merge_methods import derive_rng
from .tensor_store import Checkpoint, TensorRecord, encode_array, write_checkpoint

__all__ = ["DEFAULT_LAYERS", "FixtureSpec", "generate_fixtures", "write_fixtures"]

DEFAULT_LAYERS = {
    "attn": [64, 256],
    "bias": [64],
    "dense": [64, 64],
    "proj": [256, 64],
}

# model index used to derive the randomness shared by all models of a layer
_SHARED = 0xFFFF


@dataclass
class FixtureSpec:
    n_models: int = 3
    rank: int = 4
    layers: dict[str, list[int]] = field(default_factory=lambda: dict(DEFAULT_LAYERS))
    orthogonal_deltas: bool = False
    sparsity: float = 0.0
    delta_scale: float = 0.1
    noise: float = 0.0
    outlier_fraction: float = 0.002
    outlier_scale: float = 10.0
    base_scale: float = 0.02
    dtype: str = "F32"
    seed: int = 0

    def __post_init__(self):
        if self.n_models < 1:
            raise ValueError("n_models must be positive")
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must lie in [0, 1)")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        for name, shape in self.layers.items():
            if len(shape) not in (0, 1, 2) or any(d < 1 for d in shape):
                raise ValueError(f"layer {name!r}: unsupported shape {shape}")

    @classmethod
    def from_dict(cls, raw: dict) -> "FixtureSpec":
        unknown = set(raw) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown fixture key {sorted(unknown)[0]!r}")
        return cls(**raw)


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _support(rng: np.random.Generator, n: int, sparsity: float, minimum: int) -> np.ndarray:
    size = max(minimum, math.ceil((1 - sparsity) * n))
    size = min(size, n)
    return np.sort(rng.choice(n, size=size, replace=False))


def _add_outliers(rng, delta: np.ndarray, spec: FixtureSpec) -> None:
    count = int(round(spec.outlier_fraction * delta.size))
    if count == 0:
        return
    flat = delta.reshape(-1)
    idx = rng.choice(flat.size, size=count, replace=False)
    magnitude = spec.outlier_scale * spec.delta_scale * (1 + np.minimum(np.abs(rng.standard_t(2, count)), 10))
    flat[idx] += rng.choice([-1.0, 1.0], size=count) * magnitude


def _matrix_deltas(name: str, shape: tuple[int, int], spec: FixtureSpec) -> list[np.ndarray]:
    rows, cols = shape
    n, k = spec.n_models, spec.rank
    shared = derive_rng(spec.seed, name, _SHARED)
    width = n * k if spec.orthogonal_deltas else k
    support = _support(shared, rows, spec.sparsity, width)
    if width > min(len(support), cols):
        raise ValueError(f"layer {name!r} too small for rank {k} x {n} orthogonal models")
    if spec.orthogonal_deltas:
        u_all = _orthonormal(shared, len(support), width)
        v_all = _orthonormal(shared, cols, width)

    deltas = []
    for i in range(n):
        rng = derive_rng(spec.seed, name, i + 1)
        if spec.orthogonal_deltas:
            u = u_all[:, i * k:(i + 1) * k]
            v = v_all[:, i * k:(i + 1) * k]
        else:
            u = _orthonormal(rng, len(support), k)
            v = _orthonormal(rng, cols, k)
        s = 0.7 ** np.arange(k) * rng.uniform(0.5, 1.5)
        # entries on the support have RMS close to delta_scale
        s *= spec.delta_scale * math.sqrt(len(support) * cols) / math.sqrt(np.sum(s * s))
        d = np.zeros(shape)
        d[support] = (u * s) @ v.T
        if spec.noise:
            d[support] += spec.noise * rng.standard_normal((len(support), cols))
        _add_outliers(rng, d, spec)
        deltas.append(d)
    return deltas


def _vector_deltas(name: str, shape: tuple[int, ...], spec: FixtureSpec) -> list[np.ndarray]:
    size = math.prod(shape)
    shared = derive_rng(spec.seed, name, _SHARED)
    support = _support(shared, size, spec.sparsity, 1)
    deltas = []
    for i in range(spec.n_models):
        rng = derive_rng(spec.seed, name, i + 1)
        d = np.zeros(size)
        d[support] = spec.delta_scale * rng.standard_normal(len(support))
        _add_outliers(rng, d, spec)
        deltas.append(d.reshape(shape))
    return deltas


def generate_fixtures(spec: FixtureSpec | None = None) -> tuple[Checkpoint, list[Checkpoint]]:
    """Build the base checkpoint and ``spec.n_models`` fine-tuned ones in memory."""
    spec = spec or FixtureSpec()
    base_records = []
    model_records: list[list[TensorRecord]] = [[] for _ in range(spec.n_models)]
    for name in sorted(spec.layers):
        shape = tuple(spec.layers[name])
        rng = derive_rng(spec.seed, name, 0)
        base = spec.base_scale * rng.standard_normal(shape)
        if len(shape) == 2:
            deltas = _matrix_deltas(name, shape, spec)
        else:
            deltas = _vector_deltas(name, shape, spec)
        base_bytes = encode_array(base, spec.dtype)
        base_records.append(TensorRecord(name, spec.dtype, shape, base_bytes))
        for i, d in enumerate(deltas):
            data = encode_array(base + d, spec.dtype)
            model_records[i].append(TensorRecord(name, spec.dtype, shape, data))
    meta = {"generator": "resm_merge.fixtures", "seed": str(spec.seed)}
    base_ckpt = Checkpoint(base_records, {**meta, "role": "base"})
    models = [
        Checkpoint(recs, {**meta, "role": f"model_{i + 1}"}) for i, recs in enumerate(model_records)
    ]
    return base_ckpt, models


def write_fixtures(out_dir: str | os.PathLike, spec: FixtureSpec | None = None) -> list[Path]:
    """Write ``base.safetensors``, ``model_<i>.safetensors`` and ``fixture.json``."""
    spec = spec or FixtureSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base, models = generate_fixtures(spec)
    paths = [out / "base.safetensors"]
    write_checkpoint(paths[0], base)
    for i, m in enumerate(models):
        p = out / f"model_{i + 1}.safetensors"
        write_checkpoint(p, m)
        paths.append(p)
    (out / "fixture.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return paths
