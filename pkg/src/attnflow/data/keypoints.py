"""18-point keypoint sets, their JSON schema, and skeleton rasterisation.

JSON schema (one file per image)::

    {
      "width": 64,
      "height": 64,
      "keypoints": [
        {"name": "nose", "x": 31.5, "y": 9.0, "confidence": 1.0},
        ... exactly 18 entries, in KEYPOINT_NAMES order ...
      ]
    }

Coordinates are pixels of an image of the stated size with pixel centres at
integer positions. A confidence of 0 marks a missing keypoint.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import SchemaError

KEYPOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
KEYPOINT_INDEX = {name: i for i, name in enumerate(KEYPOINT_NAMES)}
NUM_KEYPOINTS = len(KEYPOINT_NAMES)
FACE_KEYPOINTS = ("nose", "r_eye", "l_eye", "r_ear", "l_ear")

LIMBS = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

# heatmap channels + one limb channel
SKELETON_CHANNELS = NUM_KEYPOINTS + 1
SIGMA = 1.5


@dataclass
class KeypointSet:
    """``points`` is an ``(18, 3)`` float array of ``(x, y, confidence)``."""

    points: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (NUM_KEYPOINTS, 3):
            raise SchemaError(f"expected {NUM_KEYPOINTS} keypoints, got array of shape {self.points.shape}",
                              field="keypoints")
        if not np.isfinite(self.points).all():
            raise SchemaError("keypoint coordinates must be finite", field="x")
        conf = self.points[:, 2]
        if (conf < 0).any() or (conf > 1).any():
            raise SchemaError("confidence must lie in [0, 1]", field="confidence")
        if int(self.width) < 1 or int(self.height) < 1:
            raise SchemaError("image size must be positive", field="width")
        self.width = int(self.width)
        self.height = int(self.height)

    def __len__(self):
        return NUM_KEYPOINTS

    @property
    def visible(self):
        return self.points[:, 2] > 0

    def scaled(self, width, height):
        """The same keypoints expressed on a ``width x height`` image."""
        sx = width / self.width
        sy = height / self.height
        pts = self.points.copy()
        # pixel centres: x' = (x + 0.5) * s - 0.5
        pts[:, 0] = (pts[:, 0] + 0.5) * sx - 0.5
        pts[:, 1] = (pts[:, 1] + 0.5) * sy - 0.5
        return KeypointSet(pts, width, height)

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "keypoints": [
                {"name": name, "x": float(x), "y": float(y), "confidence": float(c)}
                for name, (x, y, c) in zip(KEYPOINT_NAMES, self.points)
            ],
        }

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise SchemaError("top level must be an object", field="<root>")
        for key in ("width", "height"):
            if not isinstance(obj.get(key), int) or isinstance(obj.get(key), bool) or obj[key] < 1:
                raise SchemaError(f"'{key}' must be a positive integer", field=key)
        kps = obj.get("keypoints")
        if not isinstance(kps, list):
            raise SchemaError("'keypoints' must be a list", field="keypoints")
        if len(kps) != NUM_KEYPOINTS:
            raise SchemaError(f"'keypoints' must have {NUM_KEYPOINTS} entries, got {len(kps)}", field="keypoints")
        pts = np.zeros((NUM_KEYPOINTS, 3))
        for i, entry in enumerate(kps):
            if not isinstance(entry, dict):
                raise SchemaError(f"keypoints[{i}] must be an object", field=f"keypoints[{i}]")
            if entry.get("name") != KEYPOINT_NAMES[i]:
                raise SchemaError(
                    f"keypoints[{i}].name must be {KEYPOINT_NAMES[i]!r}, got {entry.get('name')!r}",
                    field="name",
                )
            for j, key in enumerate(("x", "y", "confidence")):
                val = entry.get(key)
                if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
                    raise SchemaError(f"keypoints[{i}].{key} must be a finite number", field=key)
                pts[i, j] = val
            if not 0.0 <= pts[i, 2] <= 1.0:
                raise SchemaError(f"keypoints[{i}].confidence = {pts[i, 2]} is outside [0, 1]",
                                  field="confidence")
        return cls(pts, obj["width"], obj["height"])


def load_keypoints(path):
    """Read and validate a keypoint JSON file.

    Raises ``FileNotFoundError`` for a missing file and :class:`SchemaError`
    (with ``field`` set) for schema violations.
    """
    path = Path(path)
    with path.open() as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})", field="<json>") from exc
    return KeypointSet.from_dict(obj)


def save_keypoints(path, kps):
    with Path(path).open("w") as fh:
        json.dump(kps.to_dict(), fh, indent=1)


def rasterize_skeleton(kps, height, width, sigma=SIGMA):
    """Render ``(19, H, W)`` float32 skeleton maps.

    Channels 0..17 are Gaussian heatmaps (peak value 1) for each keypoint and
    channel 18 draws every limb whose endpoints are both visible. ``sigma`` is
    in pixels of the keypoints' native resolution and is scaled with the
    output size. Missing keypoints give all-zero channels.
    """
    if height < 1 or width < 1:
        raise SchemaError("raster size must be positive", field="size")
    if (kps.width, kps.height) != (width, height):
        sig = sigma * height / kps.height
        kps = kps.scaled(width, height)
    else:
        sig = sigma
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    out = np.zeros((SKELETON_CHANNELS, height, width), dtype=np.float64)
    inv = 1.0 / (2.0 * sig * sig)
    for k, (kx, ky, conf) in enumerate(kps.points):
        if conf <= 0:
            continue
        out[k] = np.exp(-((xs - kx) ** 2 + (ys - ky) ** 2) * inv)
    limb = out[NUM_KEYPOINTS]
    for a, b in LIMBS:
        if kps.points[a, 2] <= 0 or kps.points[b, 2] <= 0:
            continue
        ax, ay = kps.points[a, :2]
        bx, by = kps.points[b, :2]
        dx, dy = bx - ax, by - ay
        seg2 = dx * dx + dy * dy
        if seg2 > 0:
            t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / seg2, 0.0, 1.0)
        else:
            t = np.zeros_like(xs + ys)
        d2 = (xs - ax - t * dx) ** 2 + (ys - ay - t * dy) ** 2
        np.maximum(limb, np.exp(-d2 * inv), out=limb)
    return out.astype(np.float32)
