import json
import struct
import threading
import tracemalloc
from fractions import Fraction

import ml_dtypes
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resm_merge.errors import (
    DtypeMismatch,
    MalformedHeader,
    MissingTensor,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedDtype,
)
from resm_merge.tensor_store import (
    Checkpoint,
    CheckpointReader,
    TensorRecord,
    decode_bytes,
    encode_array,
    read_checkpoint,
    serialize,
    validate_compat,
    write_checkpoint,
)


def _raw_file(path, header: dict, blob: bytes) -> None:
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + blob)


def test_read_hand_built_file(tmp_path):
    p = tmp_path / "w.st"
    blob = np.array([[1, 2], [3, 4]], dtype="<f4").tobytes()
    _raw_file(p, {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, blob)
    ckpt = read_checkpoint(p)
    assert ckpt["w"].shape == (2, 2)
    np.testing.assert_array_equal(ckpt["w"].to_float32(), [[1, 2], [3, 4]])


def test_round_trip_is_byte_identical(tmp_path):
    ckpt = Checkpoint.from_arrays(
        {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.ones(4, np.float16)},
        metadata={"format": "pt", "note": "x"},
    )
    p1, p2 = tmp_path / "1.st", tmp_path / "2.st"
    write_checkpoint(p1, ckpt)
    write_checkpoint(p2, read_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()
    assert read_checkpoint(p1) == ckpt


def test_offsets_past_end_of_file(tmp_path):
    p = tmp_path / "t.st"
    _raw_file(p, {"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\x00" * 8)
    with pytest.raises(TruncatedFile):
        read_checkpoint(p)


def test_header_longer_than_file(tmp_path):
    p = tmp_path / "t.st"
    p.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(TruncatedFile):
        read_checkpoint(p)


@pytest.mark.parametrize(
    "header",
    [
        b"not json",
        b"[1, 2]",
        json.dumps({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}).encode(),
        json.dumps({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8], "x": 1}}).encode(),
        json.dumps({"w": {"dtype": "F32", "shape": [0], "data_offsets": [0, 0]}}).encode(),
        json.dumps({
            "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
        }).encode(),
        json.dumps({"__metadata__": {"k": 1}}).encode(),
    ],
)
def test_malformed_headers(tmp_path, header):
    p = tmp_path / "bad.st"
    p.write_bytes(struct.pack("<Q", len(header)) + header + b"\x00" * 16)
    with pytest.raises(MalformedHeader):
        read_checkpoint(p)


def test_unsupported_dtype(tmp_path):
    p = tmp_path / "f64.st"
    _raw_file(p, {"w": {"dtype": "F64", "shape": [1], "data_offsets": [0, 8]}}, b"\x00" * 8)
    with pytest.raises(UnsupportedDtype):
        read_checkpoint(p)


def test_empty_checkpoint(tmp_path):
    p = tmp_path / "empty.st"
    write_checkpoint(p, Checkpoint())
    data = p.read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    assert json.loads(data[8:8 + n]) == {}
    assert len(read_checkpoint(p)) == 0


def test_two_tensors_have_disjoint_ranges(tmp_path):
    p = tmp_path / "two.st"
    write_checkpoint(p, Checkpoint.from_arrays({"x": np.ones((3, 2)), "y": np.zeros(5)}))
    data = p.read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n])
    (b0, e0), (b1, e1) = header["x"]["data_offsets"], header["y"]["data_offsets"]
    assert e0 <= b1 and b0 < e0 and b1 < e1
    assert (8 + n) % 8 == 0


def test_writes_are_deterministic_and_order_independent(tmp_path):
    arrays = {"z": np.ones(3), "a": np.arange(4.0).reshape(2, 2), "m": np.float32(2.5)}
    c1 = Checkpoint.from_arrays(arrays)
    c2 = Checkpoint.from_arrays(dict(reversed(list(arrays.items()))))
    assert list(c1) == ["a", "m", "z"]
    write_checkpoint(tmp_path / "1", c1)
    write_checkpoint(tmp_path / "2", c1)
    write_checkpoint(tmp_path / "3", c2)
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes() == (tmp_path / "3").read_bytes()


def test_rank0_tensor(tmp_path):
    p = tmp_path / "s.st"
    write_checkpoint(p, Checkpoint.from_arrays({"s": np.float32(3.5)}))
    rec = read_checkpoint(p)["s"]
    assert rec.shape == () and float(rec.to_float32()) == 3.5


@pytest.mark.parametrize("name", ["", "a\x00b", "__metadata__"])
def test_invalid_names(name):
    with pytest.raises(MalformedHeader):
        TensorRecord(name, "F32", (1,), b"\x00" * 4)


def test_record_byte_length_checked():
    with pytest.raises(MalformedHeader):
        TensorRecord("w", "F16", (3,), b"\x00" * 4)


# -- interoperability with the reference implementation ---------------------------


def test_reference_library_reads_our_files(tmp_path):
    from safetensors.numpy import load_file

    arrays = {"w": np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32),
              "h": np.linspace(-2, 2, 7).astype(np.float16)}
    write_checkpoint(tmp_path / "o.safetensors", Checkpoint.from_arrays(arrays, metadata={"a": "b"}))
    loaded = load_file(tmp_path / "o.safetensors")
    for k, v in arrays.items():
        np.testing.assert_array_equal(loaded[k], v)


def test_we_read_reference_library_files(tmp_path):
    from safetensors.numpy import save_file

    arrays = {"w": np.random.default_rng(1).standard_normal((4, 6)).astype(np.float32),
              "h": np.arange(5, dtype=np.float16)}
    save_file(arrays, tmp_path / "ref.safetensors", metadata={"k": "v"})
    ckpt = read_checkpoint(tmp_path / "ref.safetensors")
    assert ckpt.metadata == {"k": "v"}
    for k, v in arrays.items():
        np.testing.assert_array_equal(ckpt[k].to_float32(), v.astype(np.float32))


# -- 16-bit codecs -----------------------------------------------------------------


def _nearest_even(x: float, candidates: np.ndarray, bits: np.ndarray) -> int:
    """Exact round-to-nearest-even by rational arithmetic over candidate values."""
    fx = Fraction(x)
    best = None
    for value, pattern in zip(candidates, bits):
        if not np.isfinite(value):
            continue
        dist = abs(Fraction(float(value)) - fx)
        key = (dist, int(pattern) & 1)
        if best is None or key < best[0]:
            best = (key, int(pattern))
    return best[1]


finite_in_range = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False, allow_subnormal=False)


@settings(max_examples=300, deadline=None)
@given(finite_in_range)
def test_bf16_encoding_is_correctly_rounded(x):
    got = np.frombuffer(encode_array(np.array([x]), "BF16"), dtype="<u2")[0]
    # candidates: the two bf16 neighbours of x (truncation and the next pattern up)
    trunc = np.array([x], dtype=np.float32).view(np.uint32)[0] >> 16
    bits = np.array([(int(trunc) + d) % 2**16 for d in (-1, 0, 1)], dtype=np.uint16)
    values = (bits.astype(np.uint32) << 16).view(np.float32)
    assert got == _nearest_even(x, values, bits)


@settings(max_examples=300, deadline=None)
@given(finite_in_range)
def test_f16_encoding_is_correctly_rounded(x):
    got = np.frombuffer(encode_array(np.array([x]), "F16"), dtype="<u2")[0]
    approx = np.array([x], dtype=np.float16).view(np.uint16)[0]
    bits = np.array([(int(approx) + d) % 2**16 for d in (-1, 0, 1)], dtype=np.uint16)
    values = bits.view(np.float16).astype(np.float64)
    assert got == _nearest_even(x, values, bits)


def test_bf16_matches_reference_codec():
    x = np.random.default_rng(3).standard_normal(10_000).astype(np.float32)
    ours = np.frombuffer(encode_array(x, "BF16"), dtype="<u2")
    ref = x.astype(ml_dtypes.bfloat16).view(np.uint16)
    np.testing.assert_array_equal(ours, ref)
    np.testing.assert_array_equal(decode_bytes(ours.tobytes(), "BF16", (10_000,)),
                                  ref.view(ml_dtypes.bfloat16).astype(np.float32))


def test_16bit_patterns_round_trip_bitwise():
    bits = np.arange(2**16, dtype=np.uint16)
    finite16 = bits[np.isfinite(bits.view(np.float16))]
    f16 = decode_bytes(finite16.tobytes(), "F16", finite16.shape)
    assert np.array_equal(np.frombuffer(encode_array(f16, "F16"), "<u2"), finite16)
    finite_bf = bits[np.isfinite((bits.astype(np.uint32) << 16).view(np.float32))]
    bf = decode_bytes(finite_bf.tobytes(), "BF16", finite_bf.shape)
    assert np.array_equal(np.frombuffer(encode_array(bf, "BF16"), "<u2"), finite_bf)


# -- compatibility ------------------------------------------------------------------


def _ckpt(**arrays):
    return Checkpoint.from_arrays(arrays)


def test_validate_identical_structures():
    a = _ckpt(w=np.ones((2, 2)), b=np.ones(2), t=np.ones((2, 2, 2)))
    manifest = validate_compat([a, _ckpt(w=np.zeros((2, 2)), b=np.zeros(2), t=np.zeros((2, 2, 2)))])
    assert manifest.names == ["b", "t", "w"]
    assert {e.name: e.mergeable for e in manifest} == {"b": True, "t": False, "w": True}


def test_validate_missing_tensor():
    with pytest.raises(MissingTensor) as info:
        validate_compat([_ckpt(w=np.ones((2, 2)), b=np.ones(2)), _ckpt(b=np.ones(2))])
    assert info.value.layer == "w"


def test_validate_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        validate_compat([_ckpt(w=np.ones((2, 2))), _ckpt(w=np.ones((2, 3)))])


def test_validate_dtype_mismatch():
    a = Checkpoint.from_arrays({"w": np.ones(2)}, dtype="F32")
    b = Checkpoint.from_arrays({"w": np.ones(2)}, dtype="BF16")
    with pytest.raises(DtypeMismatch):
        validate_compat([a, b])


def test_validate_needs_two():
    with pytest.raises(ValueError):
        validate_compat([_ckpt(w=np.ones(2))])


# -- lazy reading --------------------------------------------------------------------


def test_lazy_reader_holds_one_tensor_at_a_time(tmp_path):
    n_tensors, size = 40, 64 * 1024  # 40 x 256 KiB = 10 MiB file
    p = tmp_path / "big.st"
    write_checkpoint(p, Checkpoint.from_arrays(
        {f"t{i:02d}": np.full(size, i, dtype=np.float32) for i in range(n_tensors)}))
    tensor_bytes = size * 4
    tracemalloc.start()
    try:
        with CheckpointReader(p) as reader:
            total = 0.0
            for name in reader:
                total += float(reader.record(name).to_float32()[0])
            _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert total == sum(range(n_tensors))
    # raw bytes + decoded copy of a single tensor, far below the file size
    assert peak < 3 * tensor_bytes
    assert peak < p.stat().st_size / 4


def test_concurrent_lazy_loads(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {f"t{i}": rng.standard_normal((32, 16)).astype(np.float32) for i in range(16)}
    p = tmp_path / "c.st"
    write_checkpoint(p, Checkpoint.from_arrays(arrays))
    errors = []
    with CheckpointReader(p) as reader:
        def worker(names):
            for _ in range(20):
                for n in names:
                    if not np.array_equal(reader.record(n).to_float32(), arrays[n]):
                        errors.append(n)

        threads = [threading.Thread(target=worker, args=(list(arrays)[i::4],)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert not errors


def test_serialize_matches_written_file(tmp_path):
    ckpt = _ckpt(a=np.ones(3))
    write_checkpoint(tmp_path / "a", ckpt)
    assert serialize(ckpt) == (tmp_path / "a").read_bytes()
