"""Content-addressed parameter store.

Chains only ever carry SHA-256 digests; the bytes live here. Two backends
share one interface: an in-memory map and a directory laid out as
``objects/<first-2-hex>/<digest-hex>``.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import CorruptionError, NotFoundError, ValidationError

_VEC_MAGIC = b"PV01"
_DS_MAGIC = b"DS01"
_HEADER = struct.Struct("<Q")


def digest(data: bytes) -> str:
    """Lowercase hex SHA-256 of ``data``."""
    return hashlib.sha256(data).hexdigest()


def serialize_params(w) -> bytes:
    """Canonical blob: magic, little-endian u64 dimension, then f64 values."""
    arr = np.ascontiguousarray(np.asarray(w, dtype="<f8").reshape(-1))
    return _VEC_MAGIC + _HEADER.pack(arr.shape[0]) + arr.tobytes()


def deserialize_params(blob: bytes) -> np.ndarray:
    if blob[:4] != _VEC_MAGIC or len(blob) < 12:
        raise ValidationError("not a parameter-vector blob")
    (dim,) = _HEADER.unpack_from(blob, 4)
    body = blob[12:]
    if len(body) != 8 * dim:
        raise ValidationError(f"blob declares dim {dim} but carries {len(body)} bytes")
    arr = np.frombuffer(body, dtype="<f8").astype(np.float64)
    arr.flags.writeable = False
    return arr


def serialize_dataset(ds) -> bytes:
    """Canonical dataset snapshot: shape header, f64 features, typed labels."""
    X = np.ascontiguousarray(np.asarray(ds.X, dtype="<f8"))
    n, d = X.shape
    if ds.y.dtype.kind == "i":
        tag, y = b"i", np.ascontiguousarray(np.asarray(ds.y, dtype="<i8"))
    else:
        tag, y = b"f", np.ascontiguousarray(np.asarray(ds.y, dtype="<f8"))
    return _DS_MAGIC + tag + struct.pack("<QQ", n, d) + X.tobytes() + y.tobytes()


def deserialize_dataset(blob: bytes):
    from .model_math import LabeledDataset

    if blob[:4] != _DS_MAGIC:
        raise ValidationError("not a dataset blob")
    tag = blob[4:5]
    n, d = struct.unpack_from("<QQ", blob, 5)
    off = 21
    X = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    off += 8 * n * d
    y = np.frombuffer(blob, dtype="<i8" if tag == b"i" else "<f8", count=n, offset=off)
    return LabeledDataset(X.astype(np.float64), y.astype(np.int64 if tag == b"i" else np.float64))


class MemoryStore:
    """Dict-backed store. ``verify`` re-hashes on every read."""

    def __init__(self, verify: bool = False):
        self._objects: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self.verify = verify

    def put(self, blob: bytes) -> str:
        blob = bytes(blob)
        key = digest(blob)
        with self._lock:
            self._objects.setdefault(key, blob)
        return key

    def get(self, key: str) -> bytes:
        try:
            blob = self._objects[key]
        except KeyError:
            raise NotFoundError(key) from None
        if self.verify and digest(blob) != key:
            raise CorruptionError(f"digest mismatch for {key}")
        return blob

    def __contains__(self, key) -> bool:
        return key in self._objects

    def __len__(self) -> int:
        return len(self._objects)

    # helpers used throughout the protocol code
    def put_params(self, w) -> str:
        return self.put(serialize_params(w))

    def get_params(self, key: str) -> np.ndarray:
        return deserialize_params(self.get(key))

    def put_dataset(self, ds) -> str:
        return self.put(serialize_dataset(ds))

    def get_dataset(self, key: str):
        return deserialize_dataset(self.get(key))


class FileStore(MemoryStore):
    """Append-only directory backend.

    Objects are written once to a temporary name and renamed into place, so a
    reader never observes a partial file.
    """

    def __init__(self, root, verify: bool = True):
        super().__init__(verify=verify)
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / "objects" / key[:2] / key

    def put(self, blob: bytes) -> str:
        blob = bytes(blob)
        key = digest(blob)
        path = self._path(key)
        with self._lock:
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(f".tmp{os.getpid()}")
                tmp.write_bytes(blob)
                os.replace(tmp, path)
        return key

    def get(self, key: str) -> bytes:
        path = self._path(key)
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(key) from None
        if self.verify and digest(blob) != key:
            raise CorruptionError(f"digest mismatch for {key}")
        return blob

    def __contains__(self, key) -> bool:
        return self._path(key).exists()

    def __len__(self) -> int:
        return sum(1 for p in (self.root / "objects").glob("*/*") if ".tmp" not in p.name)
