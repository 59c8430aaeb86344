"""Named-tensor archive used for checkpoints.

Byte layout (all integers little-endian)::

    8 bytes   magic b"ATFCKPT1"
    8 bytes   uint64 length M of the manifest
    M bytes   UTF-8 JSON manifest (sorted keys, no whitespace):
              {"version": "attnflow-ckpt-1",
               "meta": {...free-form JSON...},
               "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload   raw C-order little-endian tensor bytes; ``offset`` is relative
              to the start of the payload

Tensors are stored in sorted name order, so writing the same content twice
produces identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import SchemaError

MAGIC = b"ATFCKPT1"
VERSION = "attnflow-ckpt-1"


def _to_numpy(t):
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps(tensors, meta=None):
    """Serialise ``{name: tensor}`` plus JSON ``meta`` to bytes."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(blobs)


def loads(data):
    """Inverse of :func:`dumps`; returns ``(tensors, meta)``."""
    if data[:8] != MAGIC:
        raise SchemaError("not an attnflow checkpoint (bad magic)", field="magic")
    (m,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + m].decode())
    if manifest.get("version") != VERSION:
        raise SchemaError(f"unsupported checkpoint version {manifest.get('version')!r}", field="version")
    payload = memoryview(data)[16 + m :]
    tensors = {}
    for e in manifest["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=False))
    return tensors, manifest["meta"]


def save_checkpoint(path, tensors, meta=None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(tensors, meta))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())


def read_manifest(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:8] != MAGIC:
            raise SchemaError("not an attnflow checkpoint (bad magic)", field="magic")
        (m,) = struct.unpack("<Q", head[8:])
        return json.loads(fh.read(m).decode())
