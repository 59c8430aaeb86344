"""Image synthesis generator and patch discriminator."""

from dataclasses import dataclass, field

import torch
from torch import nn

from .data.keypoints import SKELETON_CHANNELS
from .deform_net import PyramidEncoder, ResBlock, _levels, act, conv
from .errors import ValidationError
from .warp_ops import attention_warp, blend, flow_warp


@dataclass
class GeneratorOutput:
    image: torch.Tensor
    f_r: dict = field(default_factory=dict)
    f_t: dict = field(default_factory=dict)
    f_a: dict = field(default_factory=dict)
    f_o: dict = field(default_factory=dict)


def warp_block(f_r, d, scale, border_mode="clamp"):
    """Aligned features ``m * W_a(f_r, C) + (1 - m) * W_f(f_r, w)`` at one scale.

    A disabled branch (``None`` deformation) is only allowed when the
    combination map gives it zero weight everywhere.
    """
    if scale not in d.per_scale:
        raise ValidationError(f"deformation set has no scale {scale}; available: {tuple(d.per_scale)}")
    dd = d.per_scale[scale]
    m = dd.mask
    if dd.corr is None and dd.flow is None:
        raise ValidationError("deformation has neither a correlation matrix nor a flow field")
    if dd.corr is None:
        if (m != 0).any():
            raise ValidationError("attention branch disabled but combination map is non-zero")
        return flow_warp(f_r, dd.flow, border_mode)
    if dd.flow is None:
        if (m != 1).any():
            raise ValidationError("flow branch disabled but combination map is not one")
        return attention_warp(f_r, dd.corr)
    return blend(attention_warp(f_r, dd.corr), flow_warp(f_r, dd.flow, border_mode), m)


class Generator(nn.Module):
    """Skeleton encoder + warp-block injection + upsampling residual decoder.

    The decoder starts at the coarsest warp scale. At each warp scale ``s`` the
    current decoder state plus a skeleton skip feature forms ``f_t``; warped
    reference features ``f_a`` are added to give ``f_o = f_t + f_a``. After the
    finest scale the decoder upsamples to the image resolution and ends in tanh.

    With ``warp=False`` the model is the no-warp baseline auto-encoder: the
    reference image is concatenated to the skeleton as encoder input.
    """

    def __init__(self, image_size=64, scales=(16, 32), width=32, max_width=128, warp=True, border_mode="clamp"):
        super().__init__()
        self.image_size = image_size
        self.scales = tuple(sorted(scales))
        self.warp = warp
        self.border_mode = border_mode
        coarse = self.scales[0]
        levels = _levels(image_size, coarse)
        self.chans = {image_size // 2 ** i: min(width * 2 ** i, max_width) for i in range(levels + 1)}
        in_ch = SKELETON_CHANNELS + (0 if warp else 3)
        self.skeleton_encoder = PyramidEncoder(in_ch, image_size, self.scales,
                                               {s: self.chans[s] for s in self.scales}, width=width,
                                               max_width=max_width)
        self.coarse_block = ResBlock(self.chans[coarse])
        if warp:
            self.reference_encoder = PyramidEncoder(3, image_size, self.scales,
                                                    {s: self.chans[s] for s in self.scales}, width=width,
                                                    max_width=max_width)
        self.inject_blocks = nn.ModuleDict({str(s): ResBlock(self.chans[s]) for s in self.scales})
        self.up = nn.ModuleDict()
        res = coarse
        while res < image_size:
            self.up[str(res * 2)] = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"), conv(self.chans[res], self.chans[res * 2]), act()
            )
            res *= 2
        self.final = nn.Sequential(ResBlock(self.chans[image_size]), conv(self.chans[image_size], 3), nn.Tanh())

    def extract_reference_features(self, x_r):
        return self.reference_encoder(x_r)

    def forward(self, x_r, s_t, d=None):
        """Synthesize the target image. ``d=None`` forces ``f_a = 0``."""
        if self.warp:
            f_r = self.extract_reference_features(x_r) if d is not None else {}
            skel = self.skeleton_encoder(s_t)
        else:
            f_r = {}
            skel = self.skeleton_encoder(torch.cat([x_r, s_t], dim=1))
        out = GeneratorOutput(image=None, f_r=f_r)
        res = self.scales[0]
        h = self.coarse_block(skel[res])
        while True:
            if res in self.scales:
                f_t = h if res == self.scales[0] else h + skel[res]
                out.f_t[res] = f_t
                if self.warp and d is not None:
                    f_a = warp_block(f_r[res], d, res, self.border_mode)
                    out.f_a[res] = f_a
                    f_o = f_t + f_a
                else:
                    f_o = f_t
                out.f_o[res] = f_o
                h = self.inject_blocks[str(res)](f_o)
            if res == self.image_size:
                break
            res *= 2
            h = self.up[str(res)](h)
        out.image = self.final(h)
        return out


class PatchDiscriminator(nn.Module):
    """Unconditional patch discriminator; scores at 1/8 of the input resolution."""

    def __init__(self, image_size=64, width=32, in_ch=3):
        super().__init__()
        self.image_size = image_size
        self.in_ch = in_ch
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, width, 4, 2, 1), act(),
            nn.Conv2d(width, width * 2, 4, 2, 1), act(),
            nn.Conv2d(width * 2, width * 4, 4, 2, 1), act(),
            nn.Conv2d(width * 4, 1, 3, 1, 1),
        )

    @property
    def score_size(self):
        return self.image_size // 8

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_ch or tuple(x.shape[-2:]) != (self.image_size,) * 2:
            raise ValidationError(f"discriminator expects (N, {self.in_ch}, {self.image_size}, {self.image_size}), "
                                  f"got {tuple(x.shape)}")
        return self.body(x)
