"""Versioned checkpoint container for named float64 arrays.

Layout: the magic line ``planval-ckpt v1``, one line of JSON describing the
metadata and each array (name, shape, byte offset), then the raw
little-endian float64 payload. Values round-trip bit for bit.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict

import numpy as np

MAGIC = b"planval-ckpt v1\n"
REQUIRED_META = ("seed", "step", "config_digest")


class CheckpointError(ValueError):
    pass


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(path, arrays, metadata):
    """Write ``arrays`` (name -> array) and a JSON-able ``metadata`` dict."""
    missing = [k for k in REQUIRED_META if k not in metadata]
    if missing:
        raise CheckpointError(f"metadata lacks {missing}")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.nbytes
    header = json.dumps({"metadata": metadata, "arrays": entries}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for c in chunks:
            fh.write(c)


def load_checkpoint(path):
    """Returns (OrderedDict of arrays, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a planval-ckpt v1 file")
    nl = blob.index(b"\n", len(MAGIC))
    header = json.loads(blob[len(MAGIC):nl].decode("utf-8"))
    payload = memoryview(blob)[nl + 1:]
    arrays = OrderedDict()
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        arrays[e["name"]] = a.astype(np.float64).reshape(e["shape"])
    return arrays, header["metadata"]


def store_arrays(store, prefix):
    """Flatten a ParamStore into checkpoint entries under ``prefix``."""
    return OrderedDict((f"{prefix}/{k}", v) for k, v in store.items())


def restore_store(store, arrays, prefix):
    for k in store.names():
        store.assign(k, arrays[f"{prefix}/{k}"])
    return store
