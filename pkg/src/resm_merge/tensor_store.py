"""Reading and writing checkpoint containers.

The container is the common header+blob layout::

    [8 bytes]  little-endian u64 header length N
    [N bytes]  JSON header: name -> {"dtype", "shape", "data_offsets"},
               plus an optional "__metadata__" string map
    [rest]     raw little-endian row-major tensor bytes

Tensor payloads are kept as raw bytes so that F16/BF16 data round-trips
bit-exactly; values are decoded to floating point only on demand.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    DtypeMismatch,
    IoFailure,
    MalformedHeader,
    MissingTensor,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedDtype,
)

__all__ = [
    "DTYPE_WIDTH",
    "TensorInfo",
    "TensorRecord",
    "Checkpoint",
    "CheckpointReader",
    "ManifestEntry",
    "LayerManifest",
    "read_checkpoint",
    "write_checkpoint",
    "encode_array",
    "decode_bytes",
    "validate_compat",
]

DTYPE_WIDTH = {"F32": 4, "F16": 2, "BF16": 2}
_STORAGE = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2"), "BF16": np.dtype("<u2")}
_ENTRY_KEYS = {"dtype", "shape", "data_offsets"}
METADATA_KEY = "__metadata__"


# -- dtype codec -------------------------------------------------------------


def _f64_to_f32_round_to_odd(x: np.ndarray) -> np.ndarray:
    # Round-to-odd in the intermediate precision makes the second rounding
    # (f32 -> bf16, RNE) equal to a single correctly rounded f64 -> bf16 step.
    f = x.astype(np.float32)
    bits = f.view(np.uint32).copy()
    back = f.astype(np.float64)
    inexact = (back != x) & np.isfinite(x) & np.isfinite(f)
    overshoot = inexact & (np.abs(back) > np.abs(x))
    # step magnitude down by one ulp to get the truncated value
    bits[overshoot] -= 1
    bits[inexact] |= 1
    return bits.view(np.float32)


def _f32_to_bf16_bits(f: np.ndarray) -> np.ndarray:
    u = np.ascontiguousarray(f, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    out = rounded.astype(np.uint16)
    nan = np.isnan(f)
    if nan.any():
        out[nan] = ((u[nan] >> 16) | 0x40).astype(np.uint16)
    return out


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    """Widen raw bfloat16 bit patterns to float32 (exact)."""
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def encode_array(values: np.ndarray, dtype: str) -> bytes:
    """Encode real values as little-endian bytes of ``dtype``.

    Narrowing conversions round to nearest, ties to even.
    """
    if dtype not in DTYPE_WIDTH:
        raise UnsupportedDtype(f"unsupported dtype {dtype!r}")
    arr = np.asarray(values)
    if dtype == "BF16":
        if arr.dtype == np.uint16:
            bits = arr
        else:
            x = arr.astype(np.float64)
            bits = _f32_to_bf16_bits(_f64_to_f32_round_to_odd(x))
        return np.ascontiguousarray(bits, dtype="<u2").tobytes()
    return np.ascontiguousarray(arr.astype(_STORAGE[dtype])).tobytes()


def decode_bytes(data: bytes, dtype: str, shape: Sequence[int]) -> np.ndarray:
    """Decode raw container bytes to a float32 array (lossless for all dtypes)."""
    raw = np.frombuffer(data, dtype=_STORAGE[dtype]).reshape(tuple(shape))
    if dtype == "BF16":
        return bf16_bits_to_f32(raw)
    return raw.astype(np.float32)


# -- records and checkpoints -------------------------------------------------


class TensorInfo(NamedTuple):
    dtype: str
    shape: tuple[int, ...]


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name or "\x00" in name:
        raise MalformedHeader(f"invalid tensor name {name!r}")
    if name == METADATA_KEY:
        raise MalformedHeader(f"tensor name {METADATA_KEY!r} is reserved")


@dataclass(frozen=True)
class TensorRecord:
    """One named tensor with its raw little-endian payload."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data: bytes = field(repr=False)

    def __post_init__(self):
        _check_name(self.name)
        if self.dtype not in DTYPE_WIDTH:
            raise UnsupportedDtype(f"unsupported dtype {self.dtype!r}")
        shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in shape):
            raise MalformedHeader(f"{self.name}: shape {shape} must be positive")
        object.__setattr__(self, "shape", shape)
        expected = math.prod(shape) * DTYPE_WIDTH[self.dtype]
        if len(self.data) != expected:
            raise MalformedHeader(
                f"{self.name}: {len(self.data)} bytes, expected {expected}"
            )

    @classmethod
    def from_array(cls, name: str, values, dtype: str | None = None) -> "TensorRecord":
        arr = np.asarray(values)
        if dtype is None:
            dtype = "F16" if arr.dtype == np.float16 else "F32"
        return cls(name, dtype, arr.shape, encode_array(arr, dtype))

    @property
    def info(self) -> TensorInfo:
        return TensorInfo(self.dtype, self.shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def to_float32(self) -> np.ndarray:
        return decode_bytes(self.data, self.dtype, self.shape)

    def to_float64(self) -> np.ndarray:
        return self.to_float32().astype(np.float64)


class Checkpoint(Mapping[str, TensorRecord]):
    """Ordered name -> TensorRecord map; iteration is lexicographic by name."""

    def __init__(
        self,
        records: Iterable[TensorRecord] | Mapping[str, TensorRecord] = (),
        metadata: Mapping[str, str] | None = None,
    ):
        if isinstance(records, Mapping):
            records = records.values()
        by_name: dict[str, TensorRecord] = {}
        for rec in records:
            if rec.name in by_name:
                raise MalformedHeader(f"duplicate tensor name {rec.name!r}")
            by_name[rec.name] = rec
        self._records = {k: by_name[k] for k in sorted(by_name)}
        self.metadata = dict(metadata) if metadata else None
        if self.metadata is not None:
            for k, v in self.metadata.items():
                if not isinstance(k, str) or not isinstance(v, str):
                    raise MalformedHeader("metadata must map strings to strings")

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, np.ndarray],
        dtype: str | None = None,
        metadata: Mapping[str, str] | None = None,
    ) -> "Checkpoint":
        return cls(
            [TensorRecord.from_array(k, v, dtype) for k, v in arrays.items()],
            metadata,
        )

    def __getitem__(self, name: str) -> TensorRecord:
        return self._records[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self._records == other._records and (self.metadata or None) == (
            other.metadata or None
        )

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors)"

    @property
    def infos(self) -> dict[str, TensorInfo]:
        return {k: r.info for k, r in self._records.items()}

    def record(self, name: str) -> TensorRecord:
        return self._records[name]

    def load(self, name: str) -> np.ndarray:
        return self._records[name].to_float64()


# -- serialization -------------------------------------------------------------


def _header_bytes(entries: Sequence[tuple[str, str, tuple[int, ...], int, int]],
                  metadata: Mapping[str, str] | None) -> bytes:
    header: dict = {}
    if metadata:
        header[METADATA_KEY] = {k: metadata[k] for k in sorted(metadata)}
    for name, dtype, shape, begin, end in entries:
        header[name] = {"dtype": dtype, "shape": list(shape), "data_offsets": [begin, end]}
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    # pad with spaces so the blob starts 8-byte aligned
    pad = (-(8 + len(raw))) % 8
    return raw + b" " * pad


def serialize(ckpt: Checkpoint) -> bytes:
    """Return the full container bytes for ``ckpt``."""
    entries = []
    offset = 0
    for name in ckpt:
        rec = ckpt[name]
        entries.append((name, rec.dtype, rec.shape, offset, offset + len(rec.data)))
        offset += len(rec.data)
    header = _header_bytes(entries, ckpt.metadata)
    parts = [struct.pack("<Q", len(header)), header]
    parts.extend(ckpt[name].data for name in ckpt)
    return b"".join(parts)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temporary file and atomic rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException as exc:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        if isinstance(exc, OSError) and not isinstance(exc, IoFailure):
            raise IoFailure(f"cannot write {path}: {exc}") from exc
        raise


def write_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Serialize ``ckpt`` to ``path``. Tensors are laid out in name order."""
    atomic_write_bytes(path, serialize(ckpt))


def _parse_header(raw: bytes, blob_size: int) -> tuple[dict[str, tuple[TensorInfo, int, int]], dict | None]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = header.pop(METADATA_KEY, None)
    if metadata is not None:
        if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
        ):
            raise MalformedHeader("__metadata__ must map strings to strings")

    entries: dict[str, tuple[TensorInfo, int, int]] = {}
    for name, entry in header.items():
        _check_name(name)
        if not isinstance(entry, dict) or set(entry) != _ENTRY_KEYS:
            raise MalformedHeader(f"{name}: entry must have exactly {sorted(_ENTRY_KEYS)}")
        dtype = entry["dtype"]
        if dtype not in DTYPE_WIDTH:
            raise UnsupportedDtype(f"{name}: unsupported dtype {dtype!r}")
        shape = entry["shape"]
        offsets = entry["data_offsets"]
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape
        ):
            raise MalformedHeader(f"{name}: invalid shape {shape!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
            or offsets[0] > offsets[1]
        ):
            raise MalformedHeader(f"{name}: invalid data_offsets {offsets!r}")
        begin, end = offsets
        if end - begin != math.prod(shape) * DTYPE_WIDTH[dtype]:
            raise MalformedHeader(f"{name}: byte range does not match shape and dtype")
        entries[name] = (TensorInfo(dtype, tuple(shape)), begin, end)

    spans = sorted((b, e, n) for n, (_, b, e) in entries.items())
    for (b0, e0, n0), (b1, _, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise MalformedHeader(f"data ranges of {n0!r} and {n1!r} overlap")
    for b, e, n in spans:
        if e > blob_size:
            raise TruncatedFile(f"{n}: data ends at {e}, only {blob_size} bytes present")
    return entries, metadata


class CheckpointReader:
    """Lazy, thread-safe random access to the tensors of one container.

    Only the header is parsed on open; :meth:`load` reads a single tensor with
    ``os.pread`` so concurrent workers never share a file position.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        try:
            size = os.fstat(self._fd).st_size
            if size < 8:
                raise TruncatedFile(f"{self.path}: shorter than the 8-byte length prefix")
            (n,) = struct.unpack("<Q", os.pread(self._fd, 8, 0))
            if 8 + n > size:
                raise TruncatedFile(f"{self.path}: header length {n} exceeds file size")
            raw = os.pread(self._fd, n, 8)
            self._entries, self.metadata = _parse_header(raw, size - 8 - n)
            self._data_start = 8 + n
        except BaseException:
            os.close(self._fd)
            raise
        self._lock = threading.Lock()
        self._closed = False

    def __enter__(self) -> "CheckpointReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                os.close(self._fd)
                self._closed = True

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    @property
    def infos(self) -> dict[str, TensorInfo]:
        return {k: self._entries[k][0] for k in sorted(self._entries)}

    def record(self, name: str) -> TensorRecord:
        info, begin, end = self._entries[name]
        data = os.pread(self._fd, end - begin, self._data_start + begin)
        if len(data) != end - begin:
            raise TruncatedFile(f"{self.path}: short read for {name!r}")
        return TensorRecord(name, info.dtype, info.shape, data)

    def load(self, name: str) -> np.ndarray:
        """Decode one tensor to float64."""
        return self.record(name).to_float64()

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint([self.record(n) for n in self], self.metadata)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read every tensor of the container at ``path`` into memory."""
    with CheckpointReader(path) as reader:
        return reader.to_checkpoint()


# -- compatibility ---------------------------------------------------------------


class ManifestEntry(NamedTuple):
    name: str
    shape: tuple[int, ...]
    dtype: str
    mergeable: bool


@dataclass(frozen=True)
class LayerManifest:
    entries: tuple[ManifestEntry, ...]

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]


def validate_compat(ckpts: Sequence) -> LayerManifest:
    """Check that all checkpoints share names, shapes and dtypes.

    Accepts :class:`Checkpoint` or :class:`CheckpointReader` objects (anything
    with an ``infos`` mapping). The first checkpoint is the reference.
    """
    if len(ckpts) < 2:
        raise ValueError("validate_compat needs at least two checkpoints")
    ref = ckpts[0].infos
    for other in ckpts[1:]:
        infos = other.infos
        for name in sorted(set(ref) | set(infos)):
            if name not in infos or name not in ref:
                raise MissingTensor(f"tensor {name!r} missing from one checkpoint", layer=name)
            if infos[name].shape != ref[name].shape:
                raise ShapeMismatch(
                    f"{name!r}: shape {list(ref[name].shape)} vs {list(infos[name].shape)}",
                    layer=name,
                )
            if infos[name].dtype != ref[name].dtype:
                raise DtypeMismatch(
                    f"{name!r}: dtype {ref[name].dtype} vs {infos[name].dtype}", layer=name
                )
    return LayerManifest(
        tuple(ManifestEntry(n, i.shape, i.dtype, len(i.shape) <= 2) for n, i in ref.items())
    )
