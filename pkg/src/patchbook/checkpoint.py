"""Checkpoint container.

Layout (version 2)::

    b"PATCHBOOK-CKPT 2\\n"
    <64 hex chars: sha256 of body> b"\\n"
    <body>

``body`` is an 8-byte little-endian header length, a UTF-8 JSON header, then the raw
bytes of every tensor back to back. The header has two keys: ``meta`` (the payload with
each tensor replaced by ``{"__tensor__": i}``) and ``tensors`` (dtype, shape, byte offset
and length of tensor ``i``). Tuples and dicts with non-string keys are tagged so they
round-trip exactly. The encoding is canonical: equal payloads give identical bytes.

The payload dict holds ``config``, ``ablation``, ``params`` (name -> tensor, prefixed
``model.``, ``codebook.``, ``predictor.``, ``backbone.``), ``optimizer``, ``epoch``,
``step``, ``phase``, ``steps_per_epoch`` and ``rng_state``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch

MAGIC = b"PATCHBOOK-CKPT"
VERSION = 2

_DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64", torch.int32: "int32",
           torch.uint8: "uint8", torch.bool: "bool"}
_DTYPES_BACK = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def _encode(obj, tensors: list):
    if torch.is_tensor(obj):
        tensors.append(obj.detach().cpu().contiguous())
        return {"__tensor__": len(tensors) - 1}
    if isinstance(obj, dict):
        # sorted traversal so tensor numbering ignores insertion order
        if all(isinstance(k, str) for k in obj):
            return {k: _encode(obj[k], tensors) for k in sorted(obj)}
        items = sorted(obj.items(), key=lambda kv: (type(kv[0]).__name__, kv[0]))
        return {"__items__": [[_encode(k, tensors), _encode(v, tensors)] for k, v in items]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, tensors) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, tensors) for v in obj]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise CheckpointError(f"cannot serialize {type(obj).__name__}")


def _decode(obj, tensors: list):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__tuple__" in obj:
            return tuple(_decode(v, tensors) for v in obj["__tuple__"])
        if "__items__" in obj:
            return {_decode(k, tensors): _decode(v, tensors) for k, v in obj["__items__"]}
        return {k: _decode(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, tensors) for v in obj]
    return obj


def encode_payload(payload: dict) -> bytes:
    tensors: list = []
    meta = _encode(payload, tensors)
    table, blobs, offset = [], [], 0
    for t in tensors:
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
        blob = t.numpy().tobytes()
        table.append({"dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode_payload(body: bytes) -> dict:
    (size,) = struct.unpack("<Q", body[:8])
    header = json.loads(body[8:8 + size])
    data = body[8 + size:]
    tensors = []
    for entry in header["tensors"]:
        chunk = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensors.append(torch.from_numpy(arr).to(_DTYPES_BACK[entry["dtype"]]))
    return _decode(header["meta"], tensors)


def write_checkpoint(payload: dict, path: Union[str, Path]) -> Path:
    body = encode_payload(payload)
    digest = hashlib.sha256(body).hexdigest().encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + b" %d\n" % VERSION + digest + b"\n" + body)
    tmp.replace(path)
    return path


def read_checkpoint(path: Union[str, Path]) -> dict:
    raw = Path(path).read_bytes()
    header, sep, rest = raw.partition(b"\n")
    if not sep or not header.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version = int(header[len(MAGIC):])
    except ValueError:
        raise CheckpointError(f"{path}: malformed header") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest, sep, body = rest.partition(b"\n")
    if not sep or hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    try:
        return decode_payload(body)
    except (ValueError, KeyError, struct.error) as exc:
        raise CheckpointError(f"{path}: malformed payload ({exc})") from None
