"""Image renderings of flows, combination maps and correlation matrices."""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .deform_net import DeformationSet


def make_colorwheel():
    """Middlebury colour wheel: ``(55, 3)`` RGB rows in [0, 255]."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[col:col + RY, 0] = 255
    wheel[col:col + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flow_to_color(flow, max_flow=None):
    """``(H, W, 2)`` flow to ``(H, W, 3)`` uint8. Zero motion renders white.

    Magnitudes are normalised by ``max_flow`` (default: the largest magnitude
    in the field); hue follows the standard Middlebury angle convention.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.sqrt(u ** 2 + v ** 2)
    norm = max_flow if max_flow is not None else rad.max()
    norm = max(norm, 1e-12)
    u, v, rad = u / norm, v / norm, rad / norm
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    # +pi and -pi are the same direction; pin pure +x motion to entry 0
    # whatever the sign of a zero vertical component.
    a = np.where(a >= 1.0, -1.0, a)
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] / 255.0 + f * wheel[k1] / 255.0
    r = rad[..., None]
    inside = r <= 1
    col = np.where(inside, 1 - r * (1 - col), col * 0.75)
    return np.floor(255 * col + 0.5).clip(0, 255).astype(np.uint8)


def combination_to_gray(m):
    """``(H, W)`` map in [0, 1] to uint8 grayscale (1 = white)."""
    return np.floor(np.clip(np.asarray(m, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def correlation_to_color(corr, h, w):
    """Colour each target pixel by the coordinates of its strongest source.

    Red encodes the source column, green the source row (both normalised to
    [0, 255]); blue is zero.
    """
    c = torch.as_tensor(corr)
    if c.dim() == 3:
        c = c[0]
    src = c.argmax(dim=0).cpu().numpy().reshape(h, w)
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[..., 0] = np.round(255 * (src % w) / max(w - 1, 1))
    img[..., 1] = np.round(255 * (src // w) / max(h - 1, 1))
    return img


def tensor_to_image(x):
    """``(3, H, W)`` tensor in [-1, 1] to uint8 RGB."""
    arr = torch.as_tensor(x).detach().cpu().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    return ((arr.transpose(1, 2, 0) + 1) * 127.5).round().clip(0, 255).astype(np.uint8)


def _save(img, path, display_size):
    im = Image.fromarray(img)
    if display_size:
        im = im.resize((display_size, display_size), Image.NEAREST)
    im.save(path)
    return Path(path)


def visualize(obj, out_dir, prefix="", display_size=256, max_flow=None):
    """Write PNG renderings of a DeformationSet, flow field or combination map.

    Tensors are ``(N, C, H, W)`` or ``(C, H, W)``; only the first batch element
    is drawn. Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(obj, DeformationSet):
        for s in obj.scales:
            d = obj[s]
            if d.flow is not None:
                written += visualize(d.flow, out, f"{prefix}flow_{s}", display_size, max_flow)
            written += visualize(d.mask, out, f"{prefix}mask_{s}", display_size)
            if d.corr is not None:
                written.append(_save(correlation_to_color(d.corr, s, s), out / f"{prefix}corr_{s}.png",
                                     display_size))
        return written
    t = torch.as_tensor(obj).detach().cpu()
    if t.dim() == 4:
        t = t[0]
    if t.shape[0] == 2:
        img = flow_to_color(t.permute(1, 2, 0).numpy(), max_flow)
    elif t.shape[0] == 1:
        img = combination_to_gray(t[0].numpy())
    else:
        img = tensor_to_image(t)
    written.append(_save(img, out / f"{prefix or 'image'}.png", display_size))
    return written
