"""Binary tensor container used by feature caches, EEG stores, and checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"NSFC"
    version u32
    level   u8       0=low 1=high 2=final 3=text 4=eeg 5=params
    dtype   u8       0=float32 1=float64
    n_rows  u64
    dim     u64
    payload n_rows * dim elements, row-major
    crc     u32      CRC32 of the payload bytes

A sidecar UTF-8 JSON file maps string ids to row numbers where rows are
addressable by id (feature levels, EEG trials).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ShapeMismatchError, VersionError, CacheError

MAGIC = b"NSFC"
VERSION = 1
HEADER = struct.Struct("<4sIBBQQ")

LEVEL_CODES = {"low": 0, "high": 1, "final": 2, "text": 3, "eeg": 4, "params": 5}
LEVEL_NAMES = {v: k for k, v in LEVEL_CODES.items()}
DTYPE_CODES = {"float32": 0, "float64": 1}
DTYPE_NAMES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_array(path: str | Path, array: np.ndarray, level: str) -> None:
    """Write a 2-d array as one container file (atomically, via rename)."""
    if array.ndim != 2:
        raise ShapeMismatchError(f"container payload must be 2-d, got shape {array.shape}")
    if level not in LEVEL_CODES:
        raise CacheError(f"unknown level {level!r}")
    dtype_name = np.dtype(array.dtype).name
    if dtype_name not in DTYPE_CODES:
        raise CacheError(f"unsupported dtype {dtype_name}; use float32 or float64")
    le_dtype = np.dtype(f"<f{np.dtype(array.dtype).itemsize}")
    payload = np.ascontiguousarray(array, dtype=le_dtype).tobytes(order="C")
    header = HEADER.pack(MAGIC, VERSION, LEVEL_CODES[level], DTYPE_CODES[dtype_name],
                         array.shape[0], array.shape[1])
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(crc)
    tmp.replace(path)


def read_array(path: str | Path, expect_level: str | None = None,
               expect_dim: int | None = None) -> tuple[np.ndarray, str]:
    """Read a container file, validating geometry and the payload CRC.

    Size disagreements between the header and the actual payload raise
    ShapeMismatchError; byte corruption with intact size raises ChecksumError.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER.size + 4:
        raise ChecksumError(f"{path}: file shorter than header, cannot validate")
    magic, version, level_code, dtype_code, n_rows, dim = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CacheError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported container version {version}")
    if level_code not in LEVEL_NAMES:
        raise CacheError(f"{path}: unknown level code {level_code}")
    if dtype_code not in DTYPE_NAMES:
        raise CacheError(f"{path}: unknown dtype code {dtype_code}")
    dtype = DTYPE_NAMES[dtype_code]
    expected_payload = n_rows * dim * dtype.itemsize
    actual_payload = len(blob) - HEADER.size - 4
    if actual_payload != expected_payload:
        raise ShapeMismatchError(
            f"{path}: header declares {n_rows}x{dim} {dtype.name} "
            f"({expected_payload} bytes) but payload has {actual_payload} bytes")
    payload = blob[HEADER.size:HEADER.size + expected_payload]
    (crc_stored,) = struct.unpack_from("<I", blob, HEADER.size + expected_payload)
    crc_actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise ChecksumError(f"{path}: payload CRC mismatch "
                            f"(stored {crc_stored:#010x}, actual {crc_actual:#010x})")
    level = LEVEL_NAMES[level_code]
    if expect_level is not None and level != expect_level:
        raise CacheError(f"{path}: expected level {expect_level!r}, found {level!r}")
    if expect_dim is not None and dim != expect_dim:
        raise ShapeMismatchError(f"{path}: expected row dim {expect_dim}, header declares {dim}")
    array = np.frombuffer(payload, dtype=dtype).reshape(n_rows, dim)
    return array.copy(), level


def write_index(path: str | Path, ids: list[str]) -> None:
    """Sidecar id -> row-number map."""
    mapping = {str(i): row for row, i in enumerate(ids)}
    Path(path).write_text(json.dumps(mapping, indent=0, sort_keys=True), encoding="utf-8")


def read_index(path: str | Path) -> dict[str, int]:
    return {str(k): int(v) for k, v in json.loads(Path(path).read_text(encoding="utf-8")).items()}
