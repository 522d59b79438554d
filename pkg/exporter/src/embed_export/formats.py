"""Writers for the binary embedding format and the plain-text label format.

Deliberately write-only: this tool produces files for the ufd package to
consume, and keeping an independent implementation of the byte layout means
the cross-package round-trip in the tests actually checks something.

Embedding files: 20-byte header — magic ``UFDE``, u32 version (1), u64 row
count, u32 dimension, all little-endian — followed by the row-major float64
payload. Label files: one decimal integer per line.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UFDE"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def write_embeddings(path, matrix) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"embedding payload must be 2-D, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("refusing to serialize non-finite values")
    rows, dim = matrix.shape
    header = _HEADER.pack(MAGIC, VERSION, rows, dim)
    Path(path).write_bytes(header + matrix.astype("<f8", copy=False).tobytes(order="C"))


def write_labels(path, labels) -> None:
    """Write one label per line, preserving the input text exactly.

    Each entry must already look like a decimal integer; the original string
    is written untouched so values pass through verbatim.
    """
    for v in labels:
        int(v)  # validate only; never reformat
    Path(path).write_text("".join(f"{v}\n" for v in labels))
