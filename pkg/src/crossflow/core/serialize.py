"""Binary tensor records shared by every checkpoint format.

Layout (all integers little-endian)::

    b"CFT1"
    repeated until EOF:
        u32 name_length, name bytes (UTF-8)
        u32 rank
        u64 dims[rank]
        f32 values[prod(dims)]   (row-major)

``write_records``/``read_records`` work on open binary streams so other
formats (model checkpoints, adapter files) can embed the record layout.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from crossflow.errors import ValidationError

MAGIC = b"CFT1"


def write_record(stream: BinaryIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    stream.write(struct.pack("<I", len(encoded)))
    stream.write(encoded)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(arr.tobytes())


def read_record(stream: BinaryIO) -> tuple[str, np.ndarray] | None:
    head = stream.read(4)
    if not head:
        return None
    if len(head) < 4:
        raise ValidationError("truncated tensor record")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(stream, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    values = np.frombuffer(_read_exact(stream, 4 * count), dtype="<f4")
    return name, values.reshape(dims).astype(np.float32)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ValidationError(f"truncated tensor record: wanted {n} bytes, got {len(data)}")
    return data


def write_records(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    stream.write(MAGIC)
    for name, array in tensors.items():
        write_record(stream, name, array)


def read_records(stream: BinaryIO, count: int | None = None) -> dict[str, np.ndarray]:
    """Read the magic and then ``count`` records (all remaining if None)."""
    magic = stream.read(4)
    if magic != MAGIC:
        raise ValidationError(f"bad tensor magic {magic!r}")
    out: dict[str, np.ndarray] = {}
    while count is None or len(out) < count:
        rec = read_record(stream)
        if rec is None:
            if count is not None:
                raise ValidationError(f"expected {count} tensor records, found {len(out)}")
            break
        out[rec[0]] = rec[1]
    return out


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_records(buf, tensors)
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    return read_records(io.BytesIO(data))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(tensors))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_records(fh)


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
