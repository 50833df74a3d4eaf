# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Checkpoint files
#
# Checkpoints use the safetensors container: an 8-byte header length, a JSON
# header and a raw little-endian blob. Tensors are F32, F16 or BF16 and are
# decoded to float32 or float64 on demand.

import tempfile
from pathlib import Path

import numpy as np

from resm_merge import Checkpoint, CheckpointReader, read_checkpoint, write_checkpoint

workdir = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)

# Build a checkpoint from plain arrays. Names are stored in sorted order, so
# the bytes do not depend on dictionary order.

ckpt = Checkpoint.from_arrays(
    {
        "layer.0.weight": rng.standard_normal((4, 3)),
        "layer.0.bias": rng.standard_normal(4),
        "scale": np.float32(0.5),
    },
    dtype="BF16",
    metadata={"note": "demo"},
)
path = workdir / "demo.safetensors"
write_checkpoint(path, ckpt)
print(path.stat().st_size, "bytes")
print({name: (rec.dtype, rec.shape) for name, rec in ckpt.items()})

# Reading back and writing again gives the same bytes.

again = workdir / "again.safetensors"
write_checkpoint(again, read_checkpoint(path))
print(path.read_bytes() == again.read_bytes())

# BF16 keeps the float32 exponent range with an 8-bit significand, so values
# are rounded to about three significant digits.

w = rng.standard_normal((4, 3))
stored = Checkpoint.from_arrays({"w": w}, dtype="BF16")["w"].to_float32()
print(np.abs(stored - w).max() / np.abs(w).max())

# Large files are read lazily: the reader only parses the header and fetches
# a tensor's bytes when asked for it.

with CheckpointReader(path) as reader:
    print(reader.infos)
    print(reader.load("layer.0.bias"))
