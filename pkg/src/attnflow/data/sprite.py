"""Procedural articulated sprites with analytic ground-truth flow.

A figure is ten rigid capsules (torso, head, upper/lower arms, upper/lower
legs) each carrying a texture defined in its own local frame. The same figure
is rendered at a reference and a target pose. Since every part moves rigidly,
the backward flow from a target pixel to the reference image is exact:
``w(p) = T_ref(T_tgt^{-1}(p)) - p`` for the part visible at ``p``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .keypoints import KEYPOINT_INDEX, NUM_KEYPOINTS, KeypointSet

BASE_SIZE = 64

# name, parent joint, length, radius, texture kind
PARTS = (
    ("l_upper_leg", "l_hip", 11.0, 2.8, "stripes"),
    ("l_lower_leg", "l_knee", 10.0, 2.5, "stripes"),
    ("r_upper_leg", "r_hip", 11.0, 2.8, "stripes"),
    ("r_lower_leg", "r_knee", 10.0, 2.5, "stripes"),
    ("torso", "pelvis", 17.0, 6.5, "checker"),
    ("head", "neck", 9.0, 4.8, "checker"),
    ("l_upper_arm", "l_shoulder", 9.5, 2.2, "stripes"),
    ("l_lower_arm", "l_elbow", 8.5, 2.0, "stripes"),
    ("r_upper_arm", "r_shoulder", 9.5, 2.2, "stripes"),
    ("r_lower_arm", "r_elbow", 8.5, 2.0, "stripes"),
)
PART_NAMES = tuple(p[0] for p in PARTS)
TEXTURED_KINDS = ("stripes", "checker")


@dataclass
class SyntheticPair:
    """Images are float32 ``(3, H, W)`` in ``[-1, 1]``; ``w_gt`` is ``(2, H, W)``.

    ``mask`` marks target pixels whose reference correspondence is visible on
    the same part (all four bilinear neighbours), i.e. where ``w_gt`` is
    observable. ``target_mask`` is the full target silhouette and
    ``texture_mask`` the target pixels lying on high-frequency textured parts.
    """

    x_r: np.ndarray
    x_t: np.ndarray
    s_r: KeypointSet
    s_t: KeypointSet
    w_gt: np.ndarray
    mask: np.ndarray
    target_mask: np.ndarray
    texture_mask: np.ndarray
    seed: int


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _sample_appearance(rng):
    bg = rng.uniform(-0.7, -0.3) * np.ones(3) + rng.uniform(-0.1, 0.1, size=3)
    parts = {}
    for name, _, _, _, kind in PARTS:
        key = name.split("_", 1)[-1] if name.startswith(("l_", "r_")) else name
        if key in parts:
            continue
        # base + amp stays inside [-1, 1], so the texture never clips
        base = rng.uniform(-0.1, 0.6, size=3)
        parts[key] = {
            "kind": kind,
            "base": base,
            "amp": rng.uniform(0.25, 0.35),
            # periods of 14+ px keep bilinear resampling error below 0.02
            "period": rng.uniform(14.0, 18.0),
            "phase": rng.uniform(0, 2 * math.pi, size=2),
            "tint": rng.uniform(-1, 1, size=3),
        }
    logo = {
        "center": np.array([rng.uniform(6.0, 10.0), rng.uniform(-1.5, 1.5)]),
        "radius": rng.uniform(3.0, 4.0),
        # offset from the torso colour; bounded contrast keeps the soft edge
        # within bilinear resampling accuracy
        "color": np.clip(parts["torso"]["base"] + rng.uniform(-0.6, 0.6, size=3), -1.0, 1.0),
    }
    return {"background": bg, "parts": parts, "logo": logo}


def sample_pose(rng):
    """Joint angles (radians) and global offset; bounded ranges."""
    d = math.radians
    pose = {
        "offset": np.array([rng.uniform(-6.0, 6.0), rng.uniform(-2.5, 2.5)]),
        "torso": rng.uniform(d(-8), d(8)),
        "head": rng.uniform(d(-12), d(12)),
        "l_leg": rng.uniform(d(-4), d(22)),
        "r_leg": rng.uniform(d(-4), d(22)),
        "l_knee": rng.uniform(d(0), d(30)),
        "r_knee": rng.uniform(d(0), d(30)),
        "l_elbow": rng.uniform(d(0), d(70)),
        "r_elbow": rng.uniform(d(0), d(70)),
    }
    for side in ("l", "r"):
        # occasionally swing the arm across the torso
        if rng.random() < 0.2:
            pose[f"{side}_arm"] = rng.uniform(d(-40), d(-15))
        else:
            pose[f"{side}_arm"] = rng.uniform(d(5), d(95))
    return pose


def _part_frames(pose):
    """Origin and orientation of each part's local frame (64-px units).

    Local ``u`` runs along the part from its parent joint, ``v`` across it.
    Image axes: x to the right, y downwards. Left/right are the figure's own
    (viewer sees the figure from the front, so its left is on the image right).
    """
    down = math.pi / 2
    up = -math.pi / 2
    pelvis = np.array([32.0, 38.0]) + pose["offset"]
    t_ang = up + pose["torso"]
    t_dir = np.array([math.cos(t_ang), math.sin(t_ang)])
    t_perp = np.array([-t_dir[1], t_dir[0]])  # points to image right for upright torso
    neck = pelvis + 17.0 * t_dir
    joints = {"pelvis": pelvis, "neck": neck}
    frames = {"torso": (pelvis, t_ang)}
    h_ang = t_ang + pose["head"]
    frames["head"] = (neck + 1.5 * t_dir, h_ang)
    joints["head_base"] = frames["head"][0]
    for side, sign in (("l", 1.0), ("r", -1.0)):
        shoulder = neck - 2.0 * t_dir + sign * 5.5 * t_perp
        hip = pelvis + sign * 3.5 * t_perp
        joints[f"{side}_shoulder"] = shoulder
        joints[f"{side}_hip"] = hip
        a_ang = t_ang + math.pi - sign * pose[f"{side}_arm"]
        frames[f"{side}_upper_arm"] = (shoulder, a_ang)
        elbow = shoulder + 9.5 * np.array([math.cos(a_ang), math.sin(a_ang)])
        joints[f"{side}_elbow"] = elbow
        la_ang = a_ang - sign * pose[f"{side}_elbow"]
        frames[f"{side}_lower_arm"] = (elbow, la_ang)
        joints[f"{side}_wrist"] = elbow + 8.5 * np.array([math.cos(la_ang), math.sin(la_ang)])
        l_ang = down + pose["torso"] - sign * pose[f"{side}_leg"]
        frames[f"{side}_upper_leg"] = (hip, l_ang)
        knee = hip + 11.0 * np.array([math.cos(l_ang), math.sin(l_ang)])
        joints[f"{side}_knee"] = knee
        ll_ang = l_ang + sign * pose[f"{side}_knee"]
        frames[f"{side}_lower_leg"] = (knee, ll_ang)
        joints[f"{side}_ankle"] = knee + 10.0 * np.array([math.cos(ll_ang), math.sin(ll_ang)])
    return frames, joints


def _keypoints(frames, joints, scale, size):
    pts = np.zeros((NUM_KEYPOINTS, 3))
    head_o, head_ang = frames["head"]
    R = _rot(head_ang)
    # head frame: u along the head axis (upwards), v across
    face = {
        "nose": (4.5, 0.0),
        "r_eye": (6.0, -1.8),
        "l_eye": (6.0, 1.8),
        "r_ear": (5.0, -4.2),
        "l_ear": (5.0, 4.2),
    }
    named = {k: v for k, v in joints.items() if k in KEYPOINT_INDEX}
    for k, (u, v) in face.items():
        named[k] = head_o + R @ np.array([u, v])
    for name, xy in named.items():
        p = (np.asarray(xy) + 0.5) * scale - 0.5
        pts[KEYPOINT_INDEX[name]] = (p[0], p[1], 1.0)
    return KeypointSet(pts, size, size)


def _texture(app, part, u, v, kind):
    key = part.split("_", 1)[-1] if part.startswith(("l_", "r_")) else part
    p = app["parts"][key]
    base = p["base"][:, None]
    if kind == "flat":
        col = np.repeat(base, u.size, axis=1)
    elif kind == "stripes":
        s = np.sin(2 * math.pi * u / p["period"] + p["phase"][0])
        col = base + p["amp"] * p["tint"][:, None] * s[None]
    else:
        s = np.sin(2 * math.pi * u / p["period"] + p["phase"][0]) * np.sin(2 * math.pi * v / p["period"] + p["phase"][1])
        col = base + p["amp"] * p["tint"][:, None] * s[None]
    if part == "torso":
        logo = app["logo"]
        r2 = (u - logo["center"][0]) ** 2 + (v - logo["center"][1]) ** 2
        # soft-edged disc, ~3 px transition at the rim. Written in r^2 so the
        # profile has no cone-shaped kink at the centre.
        rad = logo["radius"]
        a = 1.0 / (1.0 + np.exp((r2 - rad * rad) / (2 * rad * 1.5)))
        col = col * (1 - a[None]) + logo["color"][:, None] * a[None]
    return np.clip(col, -1.0, 1.0)


def _part_local(frames, part, pts, scale):
    """Local part coordinates of image points (64-px units)."""
    origin, ang = frames[part]
    R = _rot(ang)
    q = (pts + 0.5) / scale - 0.5 - origin
    return q @ R  # rows: (u, v)


def _inside(local, length, radius):
    u = np.clip(local[:, 0], 0.0, length)
    return (local[:, 0] - u) ** 2 + local[:, 1] ** 2 <= radius * radius


def render(app, frames, size):
    """Render image ``(3, H, W)`` and part-id map (``-1`` for background)."""
    scale = size / BASE_SIZE
    ys, xs = np.mgrid[0:size, 0:size]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    img = np.repeat(app["background"][:, None], pts.shape[0], axis=1)
    part_id = np.full(pts.shape[0], -1, dtype=np.int64)
    for k, (name, _, length, radius, kind) in enumerate(PARTS):
        local = _part_local(frames, name, pts, scale)
        inside = _inside(local, length, radius)
        if not inside.any():
            continue
        img[:, inside] = _texture(app, name, local[inside, 0], local[inside, 1], kind)
        part_id[inside] = k
    return img.reshape(3, size, size), part_id.reshape(size, size)


def _backward_flow(frames_r, frames_t, part_t, size):
    scale = size / BASE_SIZE
    ys, xs = np.mgrid[0:size, 0:size]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    flow = np.zeros((pts.shape[0], 2))
    ids = part_t.ravel()
    for k, name in enumerate(PART_NAMES):
        sel = ids == k
        if not sel.any():
            continue
        local = _part_local(frames_t, name, pts[sel], scale)
        origin, ang = frames_r[name]
        q64 = origin + local @ _rot(ang).T
        q = (q64 + 0.5) * scale - 0.5
        flow[sel] = q - pts[sel]
    return flow.T.reshape(2, size, size)


def _correspondence_mask(w, part_r, part_t):
    """Target pixels whose 4 bilinear source neighbours lie on the same part."""
    size = part_t.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + w[0]
    py = ys + w[1]
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    ok = part_t >= 0
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < size) & (yi >= 0) & (yi < size)
            same = np.zeros_like(ok)
            same[inb] = part_r[yi[inb], xi[inb]] == part_t[inb]
            ok &= same
    return ok


def generate_sprite_pair(seed, size=BASE_SIZE, identity_prob=0.1):
    """Render one reference/target pair of the same figure at two poses.

    Deterministic in ``seed``. With probability ``identity_prob`` the target
    pose equals the reference pose.
    """
    rng = np.random.default_rng(seed)
    app = _sample_appearance(rng)
    pose_r = sample_pose(rng)
    pose_t = pose_r if rng.random() < identity_prob else sample_pose(rng)
    return _make_pair(app, pose_r, pose_t, size, seed)


def _make_pair(app, pose_r, pose_t, size, seed):
    scale = size / BASE_SIZE
    frames_r, joints_r = _part_frames(pose_r)
    frames_t, joints_t = _part_frames(pose_t)
    x_r, part_r = render(app, frames_r, size)
    x_t, part_t = render(app, frames_t, size)
    w = _backward_flow(frames_r, frames_t, part_t, size)
    mask = _correspondence_mask(w, part_r, part_t)
    textured = np.array([kind in TEXTURED_KINDS for *_, kind in PARTS])
    texture_mask = (part_t >= 0) & textured[np.clip(part_t, 0, None)]
    return SyntheticPair(
        x_r=x_r.astype(np.float32),
        x_t=x_t.astype(np.float32),
        s_r=_keypoints(frames_r, joints_r, scale, size),
        s_t=_keypoints(frames_t, joints_t, scale, size),
        w_gt=w.astype(np.float32),
        mask=mask,
        target_mask=part_t >= 0,
        texture_mask=texture_mask,
        seed=int(seed),
    )
