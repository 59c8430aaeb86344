"""Deformation estimators: key/query encoders, flow auto-encoder, combination maps."""

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .data.keypoints import SKELETON_CHANNELS
from .errors import DimensionError, ValidationError
from .warp_ops import DEFAULT_ALPHA, attention_correlation, attention_warp, flow_warp, resize, resize_flow


def conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def act():
    return nn.LeakyReLU(0.2)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(conv(ch, ch), act(), conv(ch, ch))
        self.out = act()

    def forward(self, x):
        return self.out(x + self.body(x))


def _levels(image_size, scale):
    d = math.log2(image_size / scale)
    if d < 0 or d != int(d):
        raise ValidationError(f"scale {scale} must be image_size / 2^k (image_size={image_size})")
    return int(d)


class PyramidEncoder(nn.Module):
    """Strided conv stack with 1x1 output taps at the requested resolutions."""

    def __init__(self, in_ch, image_size, scales, out_channels, width=32, max_width=128):
        super().__init__()
        self.in_ch = in_ch
        self.image_size = image_size
        self.scales = tuple(sorted(scales))
        depth = max(_levels(image_size, s) for s in self.scales)
        self.stem = nn.Sequential(conv(in_ch, width), act())
        self.down = nn.ModuleList()
        self.tap_at = {}
        ch = width
        for i in range(depth):
            nxt = min(ch * 2, max_width)
            self.down.append(nn.Sequential(conv(ch, nxt, stride=2), act(), conv(nxt, nxt), act()))
            ch = nxt
            res = image_size // 2 ** (i + 1)
            if res in self.scales:
                self.tap_at[i] = res
        self.widths = {res: min(width * 2 ** (i + 1), max_width) for i, res in self.tap_at.items()}
        self.taps = nn.ModuleDict(
            {str(res): nn.Conv2d(self.widths[res], out_channels[res], 1) for res in self.scales}
        )

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_ch:
            raise ValidationError(f"expected {self.in_ch} input channels, got shape {tuple(x.shape)}")
        if tuple(x.shape[-2:]) != (self.image_size, self.image_size):
            raise DimensionError(f"expected {self.image_size}x{self.image_size} input, got {tuple(x.shape[-2:])}")
        h = self.stem(x)
        out = {}
        for i, block in enumerate(self.down):
            h = block(h)
            if i in self.tap_at:
                res = self.tap_at[i]
                out[res] = self.taps[str(res)](h)
        return out


class FlowEstimator(nn.Module):
    """U-shaped auto-encoder mapping ``(s_t, s_r, x_r)`` to one flow per scale.

    Flow heads are zero-initialised so that training starts from identity warps.
    Output units are pixels of each head's own resolution. With ``refine`` each
    finer head predicts a residual added to the upsampled coarser flow.
    """

    def __init__(self, image_size, scales, skel_ch=SKELETON_CHANNELS, width=16, max_width=128, bottleneck=4,
                 refine=False):
        super().__init__()
        self.image_size = image_size
        self.refine = refine
        self.scales = tuple(sorted(scales))
        depth = _levels(image_size, bottleneck)
        in_ch = 2 * skel_ch + 3
        chans = [min(width * 2 ** i, max_width) for i in range(depth + 1)]
        self.stem = nn.Sequential(conv(in_ch, chans[0]), act())
        self.enc = nn.ModuleList(
            nn.Sequential(conv(chans[i], chans[i + 1], stride=2), act(), conv(chans[i + 1], chans[i + 1]), act())
            for i in range(depth)
        )
        self.mid = ResBlock(chans[-1])
        self.dec = nn.ModuleList()
        self.heads = nn.ModuleDict()
        finest = _levels(image_size, self.scales[-1])
        # decoders run from the bottleneck up to the finest flow scale
        for i in range(depth, finest, -1):
            self.dec.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                conv(chans[i], chans[i - 1]), act(),
            ))
            self.dec.append(nn.Sequential(conv(2 * chans[i - 1], chans[i - 1]), act()))
        for s in self.scales:
            head = conv(chans[_levels(image_size, s)], 2)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.heads[str(s)] = head
        self.depth = depth

    def forward(self, s_t, s_r, x_r):
        shapes = {tuple(t.shape[-2:]) for t in (s_t, s_r, x_r)}
        if len(shapes) != 1 or s_t.shape[0] != s_r.shape[0] or s_t.shape[0] != x_r.shape[0]:
            raise DimensionError("flow estimator inputs must share batch size and resolution")
        if shapes.pop() != (self.image_size, self.image_size):
            raise DimensionError(f"flow estimator expects {self.image_size}x{self.image_size} inputs")
        h = self.stem(torch.cat([s_t, s_r, x_r], dim=1))
        skips = [h]
        for block in self.enc:
            h = block(h)
            skips.append(h)
        h = self.mid(h)
        flows = {}
        level = self.depth
        res = self.image_size // 2 ** level
        prev = None
        if res in self.scales:
            flows[res] = prev = self.heads[str(res)](h)
        for k in range(0, len(self.dec), 2):
            h = self.dec[k](h)
            level -= 1
            h = self.dec[k + 1](torch.cat([h, skips[level]], dim=1))
            res = self.image_size // 2 ** level
            if res in self.scales:
                flow = self.heads[str(res)](h)
                if self.refine and prev is not None:
                    flow = flow + resize_flow(prev, (res, res))
                flows[res] = prev = flow
        return flows


class CombinationMapGenerator(nn.Module):
    """Residual blocks over the two warped downsampled references; sigmoid output."""

    def __init__(self, width=16, blocks=3, in_ch=3):
        super().__init__()
        self.in_ch = in_ch
        self.body = nn.Sequential(
            conv(2 * in_ch, width), act(),
            *[ResBlock(width) for _ in range(blocks)],
            conv(width, 1),
        )

    def forward(self, warped_attn, warped_flow):
        if warped_attn.shape != warped_flow.shape or warped_attn.shape[1] != self.in_ch:
            raise DimensionError(
                f"combination inputs must match and have {self.in_ch} channels: "
                f"{tuple(warped_attn.shape)} vs {tuple(warped_flow.shape)}"
            )
        return torch.sigmoid(self.body(torch.cat([warped_attn, warped_flow], dim=1)))


@dataclass
class Deformation:
    """Deformations at one scale. ``corr``/``flow`` are ``None`` when the branch is disabled."""

    corr: torch.Tensor = None
    flow: torch.Tensor = None
    mask: torch.Tensor = None


@dataclass
class DeformationSet:
    scales: tuple
    per_scale: dict = field(default_factory=dict)

    def __getitem__(self, scale):
        if scale not in self.per_scale:
            raise ValidationError(f"deformation set has no scale {scale}; available: {self.scales}")
        return self.per_scale[scale]

    def check(self, tol=1e-5):
        """Assert every member's type invariants."""
        for s in self.scales:
            d = self[s]
            if d.corr is not None:
                if not torch.isfinite(d.corr).all() or (d.corr < 0).any():
                    raise ValidationError(f"correlation at scale {s} is negative or non-finite")
                colsum = d.corr.sum(dim=1)
                if (colsum - 1).abs().max() > tol:
                    raise ValidationError(f"correlation columns at scale {s} do not sum to 1")
            if d.flow is not None and not torch.isfinite(d.flow).all():
                raise ValidationError(f"flow at scale {s} is non-finite")
            if not torch.isfinite(d.mask).all() or (d.mask < 0).any() or (d.mask > 1).any():
                raise ValidationError(f"combination map at scale {s} outside [0, 1]")
        return True


class DeformationEstimator(nn.Module):
    """Estimates ``{C, w, m}`` per scale from ``(x_r, s_r, s_t)``.

    ``branches`` selects the ablation: ``"both"`` (full model), ``"attn"``
    (no flow estimator, m = 1) or ``"flow"`` (no correlation estimator, m = 0).
    """

    def __init__(self, image_size=64, scales=(16, 32), key_channels=None, enc_width=32, flow_width=16,
                 mask_width=16, mask_blocks=3, alpha=DEFAULT_ALPHA, branches="both", border_mode="clamp",
                 flow_refine=False):
        super().__init__()
        if branches not in ("both", "attn", "flow"):
            raise ValidationError(f"unknown branches {branches!r}")
        self.image_size = image_size
        self.scales = tuple(sorted(scales))
        self.alpha = alpha
        self.branches = branches
        self.border_mode = border_mode
        key_channels = key_channels or {s: 32 for s in self.scales}
        self.use_attention = branches in ("both", "attn")
        self.use_flow = branches in ("both", "flow")
        if self.use_attention:
            self.key_encoder = PyramidEncoder(3, image_size, self.scales, key_channels, width=enc_width)
            self.query_encoder = PyramidEncoder(SKELETON_CHANNELS, image_size, self.scales, key_channels,
                                                width=enc_width)
        if self.use_flow:
            self.flow_estimator = FlowEstimator(image_size, self.scales, width=flow_width, refine=flow_refine)
        if branches == "both":
            self.mask_generators = nn.ModuleDict(
                {str(s): CombinationMapGenerator(mask_width, mask_blocks) for s in self.scales}
            )

    def encode_reference(self, x_r):
        return self.key_encoder(x_r)

    def encode_skeleton(self, s_t):
        return self.query_encoder(s_t)

    def estimate_flow(self, s_t, s_r, x_r):
        return self.flow_estimator(s_t, s_r, x_r)

    def generate_combination_map(self, scale, warped_attn, warped_flow):
        return self.mask_generators[str(scale)](warped_attn, warped_flow)

    def forward(self, x_r, s_r, s_t):
        n = x_r.shape[0]
        keys = self.encode_reference(x_r) if self.use_attention else None
        queries = self.encode_skeleton(s_t) if self.use_attention else None
        flows = self.estimate_flow(s_t, s_r, x_r) if self.use_flow else None
        out = DeformationSet(self.scales)
        for s in self.scales:
            corr = attention_correlation(keys[s], queries[s], self.alpha) if keys is not None else None
            flow = flows[s] if flows is not None else None
            if self.branches == "both":
                x_small = resize(x_r, (s, s))
                warped_a = attention_warp(x_small, corr)
                warped_f = flow_warp(x_small, flow, self.border_mode)
                m = self.generate_combination_map(s, warped_a, warped_f)
            else:
                m = x_r.new_full((n, 1, s, s), 1.0 if self.branches == "attn" else 0.0)
            out.per_scale[s] = Deformation(corr, flow, m)
        return out
