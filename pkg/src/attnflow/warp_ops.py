"""Differentiable spatial-transformation kernels.

Tensor layout used throughout the package:

* feature map: ``(N, C, H, W)``
* correlation matrix: ``(N, H*W, H*W)`` indexed ``[n, source, target]``, with
  spatial positions flattened row-major (``i = row * W + col``)
* flow field: ``(N, 2, H, W)``; channel 0 is the horizontal offset, channel 1
  the vertical offset, both in pixels of the field's own resolution
* combination map: ``(N, 1, H, W)`` with values in ``[0, 1]``

Sampling convention: pixel centres sit at integer coordinates with the origin
at the top-left pixel. Output pixel ``(r, c)`` of :func:`flow_warp` samples the
source at ``(r + w_y, c + w_x)``.
"""

import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

DEFAULT_ALPHA = 100.0
BORDER_MODES = ("clamp", "zeros")


def _check_map(x, name, ndim=4):
    if not torch.is_tensor(x) or x.dim() != ndim:
        raise DimensionError(f"{name} must be a {ndim}-d tensor, got shape {tuple(getattr(x, 'shape', ()))}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise DimensionError(f"{name} has an empty spatial extent {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")


def attention_correlation(keys, queries, alpha=DEFAULT_ALPHA):
    """Column-normalised correlation matrix between reference keys and target queries.

    ``C[n, i, j] = softmax_i(alpha * <k_i, q_j>)``; every target column sums to one.
    Raw (unnormalised) dot products are used.
    """
    _check_map(keys, "keys")
    _check_map(queries, "queries")
    if keys.shape != queries.shape:
        raise DimensionError(f"keys {tuple(keys.shape)} and queries {tuple(queries.shape)} differ")
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    n, k, h, w = keys.shape
    beta = torch.bmm(keys.reshape(n, k, h * w).transpose(1, 2), queries.reshape(n, k, h * w))
    # torch.softmax subtracts the per-column max before exponentiating. Its float32
    # column sums drift past 1e-5 when a column has many equal logits (flat
    # backgrounds at 32x32), so the normalisation runs in float64.
    return torch.softmax(alpha * beta, dim=1, dtype=torch.float64).to(beta.dtype)


def attention_warp(x, corr):
    """Weighted sum of source features: ``o[:, :, j] = sum_i C[:, i, j] * x[:, :, i]``."""
    _check_map(x, "x")
    n, c, h, w = x.shape
    if corr.dim() != 3 or corr.shape != (n, h * w, h * w):
        raise DimensionError(
            f"correlation of shape {tuple(corr.shape)} does not match a {h}x{w} map with batch {n}"
        )
    return torch.bmm(x.reshape(n, c, h * w), corr).reshape(n, c, h, w)


def base_grid(h, w, dtype=torch.float32, device=None):
    """Integer pixel coordinates as a ``(2, H, W)`` tensor of (x, y)."""
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((xs, ys))


def flow_warp(x, flow, border_mode="clamp"):
    """Bilinearly sample ``x`` at ``grid + flow``.

    ``border_mode="clamp"`` replicates edge pixels for out-of-range neighbours,
    ``"zeros"`` treats them as zero. Differentiable in both ``x`` and ``flow``
    (except where a sampling coordinate is exactly an integer).
    """
    _check_map(x, "x")
    _check_map(flow, "flow")
    n, c, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise DimensionError(f"flow {tuple(flow.shape)} does not match feature map {tuple(x.shape)}")
    if border_mode not in BORDER_MODES:
        raise ValidationError(f"border_mode must be one of {BORDER_MODES}, got {border_mode!r}")

    # Split each offset into integer and fractional parts before adding the
    # pixel grid, so the interpolation weights keep full precision.
    grid = base_grid(h, w, dtype=torch.long, device=flow.device)
    ix = torch.floor(flow[:, 0])
    iy = torch.floor(flow[:, 1])
    fx = flow[:, 0] - ix
    fy = flow[:, 1] - iy
    x0 = grid[0] + ix.long()
    y0 = grid[1] + iy.long()

    flat = x.reshape(n, c, h * w)
    out = 0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            weight = wx * wy
            if border_mode == "zeros":
                inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                weight = weight * inside.to(weight.dtype)
            xi = xi.clamp(0, w - 1)
            yi = yi.clamp(0, h - 1)
            idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
            out = out + torch.gather(flat, 2, idx).reshape(n, c, h, w) * weight.unsqueeze(1).to(x.dtype)
    return out


def blend(a, f, m):
    """Convex combination ``m * a + (1 - m) * f``; ``m`` broadcasts over channels."""
    _check_map(a, "a")
    _check_map(f, "f")
    _check_map(m, "m")
    if a.shape != f.shape:
        raise DimensionError(f"blend inputs differ in shape: {tuple(a.shape)} vs {tuple(f.shape)}")
    if m.shape != (a.shape[0], 1) + tuple(a.shape[2:]):
        raise DimensionError(f"combination map {tuple(m.shape)} does not match {tuple(a.shape)}")
    if (m < 0).any() or (m > 1).any():
        raise ValidationError("combination map values must lie in [0, 1]")
    # lerp is exact at m = 0, m = 1 and when a == f
    return torch.lerp(f, a, m.to(a.dtype))


def resize(x, size):
    """Bilinear resampling to ``size = (H', W')``.

    Uses the half-pixel (``align_corners=False``) convention without
    antialiasing, so an exact 2x reduction averages each 2x2 block. Resizing to
    the current size returns the input unchanged.
    """
    h2, w2 = (int(s) for s in size)
    if h2 < 1 or w2 < 1:
        raise ValidationError(f"target size must be positive, got {size}")
    if x.dim() != 4:
        raise DimensionError(f"expected a 4-d tensor, got shape {tuple(x.shape)}")
    if tuple(x.shape[-2:]) == (h2, w2):
        return x
    return F.interpolate(x, size=(h2, w2), mode="bilinear", align_corners=False)


def resize_flow(flow, size):
    """Resample a flow field and rescale its offsets to the new pixel grid."""
    h, w = flow.shape[-2:]
    h2, w2 = (int(s) for s in size)
    out = resize(flow, (h2, w2))
    if (h2, w2) == (h, w):
        return out
    scale = flow.new_tensor([w2 / w, h2 / h]).view(1, 2, 1, 1)
    return out * scale


def identity_correlation(n, h, w, dtype=torch.float32, device=None):
    """Correlation matrices that make :func:`attention_warp` the identity."""
    eye = torch.eye(h * w, dtype=dtype, device=device)
    return eye.unsqueeze(0).expand(n, -1, -1).clone()
