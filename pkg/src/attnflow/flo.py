"""Middlebury ``.flo`` reader/writer.

Layout: float32 magic ``202021.25``, int32 width, int32 height, then
``height * width`` interleaved float32 ``(u, v)`` pairs in row-major order,
all little-endian.
"""

import numpy as np

from .errors import SchemaError

FLO_MAGIC = 202021.25


def write_flo(path, flow):
    """Write an ``(H, W, 2)`` array (horizontal, vertical offsets)."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise SchemaError(f"flow must have shape (H, W, 2), got {flow.shape}", field="shape")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        np.array([FLO_MAGIC], dtype="<f4").tofile(fh)
        np.array([w, h], dtype="<i4").tofile(fh)
        np.ascontiguousarray(flow).tofile(fh)


def read_flo(path):
    """Read a ``.flo`` file into a float32 ``(H, W, 2)`` array."""
    with open(path, "rb") as fh:
        magic = np.fromfile(fh, dtype="<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise SchemaError(f"{path}: bad .flo magic number", field="magic")
        dims = np.fromfile(fh, dtype="<i4", count=2)
        if dims.size != 2 or (dims <= 0).any():
            raise SchemaError(f"{path}: invalid dimensions", field="size")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(fh, dtype="<f4", count=h * w * 2)
    if data.size != h * w * 2:
        raise SchemaError(f"{path}: truncated payload", field="data")
    return data.reshape(h, w, 2).astype(np.float32)


def flow_to_hw2(flow):
    """Convert a ``(2, H, W)`` or ``(1, 2, H, W)`` tensor/array to ``(H, W, 2)`` numpy."""
    arr = flow.detach().cpu().numpy() if hasattr(flow, "detach") else np.asarray(flow)
    if arr.ndim == 4:
        arr = arr[0]
    return np.moveaxis(arr, 0, -1)
