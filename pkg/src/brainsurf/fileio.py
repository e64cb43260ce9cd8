"""Binary tensor files: one JSON header line followed by a float64 payload.

All multi-dimensional arrays written to disk by this package use the same
framing so that external tools can read them with a dozen lines of code:
the first line of the file is a JSON object with at least a ``shape`` key,
terminated by ``\\n``; the rest of the file is the row-major array data as
little-endian float64.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f8"})
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + b"\n")
        f.write(arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("ascii"))
        payload = f.read()
    shape = tuple(header["shape"])
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ValueError(f"{path}: payload holds {arr.size} values, header promises {expected}")
    return arr.reshape(shape)


def git_blob_sha1(data: bytes) -> str:
    """Content hash of a byte string, computed the way git hashes blobs."""
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def hash_file(path: str | Path) -> str:
    return git_blob_sha1(Path(path).read_bytes())
