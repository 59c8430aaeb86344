"""Evaluation metrics: SSIM and flow end-point error."""

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError


def _as_nchw(x):
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).double()
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    if t.dim() != 4:
        raise DimensionError(f"expected a 2-, 3- or 4-d image, got {tuple(t.shape)}")
    return t


def gaussian_window(size=11, sigma=1.5):
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(x, y, data_range=2.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity over channels (and batch).

    Gaussian-weighted local statistics (population covariance) computed over
    the valid region only. ``data_range`` defaults to 2 for images in [-1, 1].
    """
    a = _as_nchw(x)
    b = _as_nchw(y)
    if a.shape != b.shape:
        raise DimensionError(f"ssim inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    n, c, h, w = a.shape
    if h < win_size or w < win_size:
        raise DimensionError(f"images must be at least {win_size}x{win_size}")
    g = gaussian_window(win_size, sigma)
    kx = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    ky = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)

    def filt(t):
        return F.conv2d(F.conv2d(t, kx, groups=c), ky, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(s.mean())


def epe(flow, flow_gt, mask=None):
    """Mean Euclidean end-point error over masked pixels.

    ``flow``/``flow_gt``: ``(N, 2, H, W)`` or ``(2, H, W)``; ``mask`` broadcastable
    to ``(N, 1, H, W)``. Raises :class:`ValidationError` on an empty mask.
    """
    f = torch.as_tensor(flow).double()
    g = torch.as_tensor(flow_gt).double()
    if f.shape != g.shape:
        raise DimensionError(f"flow shapes differ: {tuple(f.shape)} vs {tuple(g.shape)}")
    if f.dim() == 3:
        f, g = f[None], g[None]
    err = torch.sqrt(((f - g) ** 2).sum(dim=1))  # (N, H, W)
    if mask is None:
        return float(err.mean())
    m = torch.as_tensor(mask).bool()
    while m.dim() < 4:
        m = m[None]
    m = m[:, 0].expand_as(err)
    if not m.any():
        raise ValidationError("epe mask is empty")
    return float(err[m].mean())


def masked_mean(values, mask):
    """Mean of ``values`` where ``mask`` is true; NaN for an empty mask."""
    m = mask.bool().expand_as(values)
    if not m.any():
        return math.nan
    return float(values[m].mean())
