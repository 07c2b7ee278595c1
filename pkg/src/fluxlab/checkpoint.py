"""Checkpoint container.

A checkpoint is canonical JSON: scalars and lists as-is, float arrays as
base64 little-endian 64-bit floats with an explicit shape.  Canonical
encoding makes file hashes stable, so stage checkpoints can reference
each other by sha256.
"""

from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "checkpoint_hash", "canonical_json"]

FORMAT = "fluxlab-checkpoint-v1"


def _encode(value):
    if isinstance(value, np.ndarray):
        arr = np.ascontiguousarray(value, dtype="<f8")
        return {
            "__array__": True,
            "shape": list(arr.shape),
            "dtype": "<f8",
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    return value


def _decode(value):
    if isinstance(value, dict):
        if value.get("__array__"):
            raw = base64.b64decode(value["data"])
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            return arr.reshape(value["shape"])
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def canonical_json(payload) -> bytes:
    return json.dumps(_encode(payload), sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, kind, payload):
    """Write the checkpoint and return its sha256 hex digest."""
    doc = {"format": FORMAT, "kind": kind, "payload": payload}
    data = canonical_json(doc)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    doc = json.loads(data.decode("utf-8"))
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    return doc["kind"], _decode(doc["payload"]), hashlib.sha256(data).hexdigest()


def checkpoint_hash(payload, kind):
    return hashlib.sha256(canonical_json({"format": FORMAT, "kind": kind, "payload": payload})).hexdigest()
