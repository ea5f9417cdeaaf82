"""Tensor blob and JSON-lines manifest formats.

Blob record layout (little-endian)::

    b"SAUT" | version u32 | dtype u8 | rank u32 | dims u64 * rank | payload

dtype 0 is float32 (datasets); dtype 1 is float64 (checkpoints). A dataset is a
manifest ``name.jsonl`` next to a blob ``name.bin``; each manifest line is one
JSON object with ``id, label, is_synthetic, quality, offset``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .data import Sample

MAGIC = b"SAUT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
MANIFEST_FIELDS = ("id", "label", "is_synthetic", "quality", "offset")


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, arr: np.ndarray, dtype_code: int = 0) -> int:
    """Append one record; returns its byte offset."""
    offset = fh.tell()
    dt = DTYPES[dtype_code]
    a = np.ascontiguousarray(arr, dtype=dt)
    fh.write(MAGIC)
    fh.write(struct.pack("<IBI", VERSION, dtype_code, a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes(order="C"))
    return offset


def read_tensor(buf: bytes | memoryview, offset: int) -> tuple[np.ndarray, int]:
    """Parse the record at ``offset``; returns (array, offset past the record)."""
    header = 4 + 9
    if offset + header > len(buf):
        raise FormatError(f"dimension mismatch: blob truncated in header at offset {offset}")
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError(f"bad magic at offset {offset}")
    version, code, rank = struct.unpack_from("<IBI", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported blob version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + header
    if pos + 8 * rank > len(buf):
        raise FormatError(f"dimension mismatch: blob truncated in dims at offset {offset}")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if pos + nbytes > len(buf):
        raise FormatError(
            f"dimension mismatch: record at offset {offset} declares {dims} "
            f"but only {len(buf) - pos} payload bytes remain")
    arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims)
    return arr.copy(), pos + nbytes


def blob_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def write_dataset(samples: Iterable[Sample], manifest_path: str | Path) -> Path:
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(blob_path(manifest_path), "wb") as blob, open(manifest_path, "w") as man:
        for s in samples:
            off = write_tensor(blob, s.features, 0)
            rec = {"id": int(s.id), "label": int(s.label), "is_synthetic": bool(s.is_synthetic),
                   "quality": float(s.quality), "offset": off}
            man.write(json.dumps(rec) + "\n")
    return manifest_path


def read_dataset(manifest_path: str | Path) -> list[Sample]:
    manifest_path = Path(manifest_path)
    lines = manifest_path.read_text().splitlines()
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path}:{lineno}: malformed manifest line ({exc.msg})") from None
        if not isinstance(rec, dict) or any(k not in rec for k in MANIFEST_FIELDS):
            raise FormatError(f"{manifest_path}:{lineno}: malformed manifest line (need {MANIFEST_FIELDS})")
        records.append((lineno, rec))
    if not records:
        return []
    buf = blob_path(manifest_path).read_bytes()
    out = []
    for lineno, rec in records:
        try:
            arr, _ = read_tensor(buf, int(rec["offset"]))
        except FormatError as exc:
            raise FormatError(f"{manifest_path}:{lineno}: {exc}") from None
        out.append(Sample(features=arr.astype(np.float64), label=int(rec["label"]),
                          is_synthetic=bool(rec["is_synthetic"]), quality=float(rec["quality"]),
                          id=int(rec["id"])))
    return out
