"""Named-tensor checkpoint archive.

Layout::

    b"SMRTCKPT" | uint32 format version | uint64 manifest length | manifest JSON | payload

The manifest lists every tensor (name, dtype, shape, byte offset into the
payload, byte count), a free-form ``meta`` object and the SHA-256 of the
payload. Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError

MAGIC = b"SMRTCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def save_tensors(path, tensors: dict, meta: dict | None = None):
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries,
                "payload_bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()}
    blob = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
            f.write(blob)
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path) -> dict:
    return _read(path)[0]


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: truncated before header")
    magic, version, mlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version > FORMAT_VERSION:
        raise CorruptCheckpointError(f"{path}: format version {version} is newer than {FORMAT_VERSION}")
    start = _PREFIX.size + mlen
    if len(data) < start:
        raise CorruptCheckpointError(f"{path}: truncated inside manifest")
    try:
        manifest = json.loads(data[_PREFIX.size:start])
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: manifest is not valid JSON") from exc
    payload = data[start:]
    if len(payload) != manifest["payload_bytes"]:
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    return manifest, payload


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; nothing is returned unless the whole file verifies."""
    manifest, payload = _read(path)
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
    return tensors, manifest["meta"]
