"""Training objective: deformation losses and image-realism losses."""

import functools
import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .data.keypoints import FACE_KEYPOINTS, KEYPOINT_INDEX
from .errors import DegeneracyError, DimensionError, ValidationError
from .warp_ops import attention_warp, flow_warp, resize

COS_EPS = 1e-3
RIDGE = 1e-6
FACE_PATCH = 64
LOSS_NAMES = ("attn", "flow", "regu", "perc", "face", "style", "adv")


# ---------------------------------------------------------------------------
# feature extractor


CALIBRATION_SEEDS = range(900_000, 900_016)


@functools.lru_cache(maxsize=None)
def _calibration_images(size=64):
    # fixed sprite references, disjoint from training and validation seeds
    from .data.sprite import generate_sprite_pair

    return torch.stack([torch.from_numpy(generate_sprite_pair(s, size).x_r) for s in CALIBRATION_SEEDS]).float()


class FeatureExtractor(nn.Module):
    """Fixed conv feature pyramid with named taps ``relu1`` .. ``relu4``.

    Taps sit at strides 1, 2, 4 and 8. Weights are either deterministic
    seeded random (the default, works offline) or taken from a local
    torchvision VGG-19 state dict via :meth:`from_vgg19`. Random pyramids
    are bias-calibrated on fixed sprite images unless ``calibrate=False``.
    Parameters never require gradients.
    """

    TAPS = ("relu1", "relu2", "relu3", "relu4")

    def __init__(self, widths=(16, 32, 64, 64), seed=1234, in_ch=3, calibrate=True):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.widths = tuple(widths)
        self.normalize = None
        blocks = []
        cin = in_ch
        for i, cout in enumerate(self.widths):
            layers = [] if i == 0 else [nn.AvgPool2d(2)]
            c1 = nn.Conv2d(cin, cout, 3, padding=1)
            c2 = nn.Conv2d(cout, cout, 3, padding=1)
            for c in (c1, c2):
                std = math.sqrt(2.0 / (c.in_channels * 9))
                with torch.no_grad():
                    c.weight.copy_(torch.randn(c.weight.shape, generator=gen) * std)
                    c.bias.copy_(torch.randn(c.bias.shape, generator=gen) * 0.1)
            layers += [c1, nn.ReLU(), c2, nn.ReLU()]
            blocks.append(nn.Sequential(*layers))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        if calibrate and in_ch == 3:
            self.calibrate(_calibration_images())
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def calibrate(self, images, active=0.5):
        """Shift every conv bias so its unit fires on ``active`` of the calibration pixels.

        With purely random biases most units respond almost uniformly and the
        cosine between any two feature vectors sits near one, which leaves the
        cosine-based flow loss with little to distinguish. Centring each
        pre-activation on the calibration images gives sparser,
        contrast-sensitive features. Layers are calibrated in order, each on
        the already calibrated output of the previous one.
        """
        h = images
        for block in self.blocks:
            for layer in block:
                if isinstance(layer, nn.Conv2d):
                    layer.bias.zero_()
                    pre = layer(h).transpose(0, 1).reshape(layer.out_channels, -1)
                    layer.bias.copy_(-torch.quantile(pre, 1.0 - active, dim=1))
                h = layer(h)
        return self

    @classmethod
    def from_vgg19(cls, path):
        """Wrap torchvision's VGG-19 with weights loaded from a local file.

        Taps are relu1_1, relu2_1, relu3_1 and relu4_1; inputs in ``[-1, 1]``
        are mapped to ImageNet normalisation.
        """
        from torchvision.models import vgg19

        net = vgg19()
        net.load_state_dict(torch.load(path, map_location="cpu"))
        feats = net.features
        obj = cls.__new__(cls)
        nn.Module.__init__(obj)
        cuts = [2, 7, 12, 21]
        start = 0
        blocks = []
        for c in cuts:
            blocks.append(nn.Sequential(*[feats[i] for i in range(start, c)]))
            start = c
        obj.blocks = nn.ModuleList(blocks)
        obj.widths = (64, 128, 256, 512)
        obj.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        obj.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        obj.normalize = True
        obj.requires_grad_(False)
        obj.eval()
        return obj

    def train(self, mode=True):
        # always stays in eval mode
        return super().train(False)

    def forward(self, x, taps=None):
        """Return ``{tap_name: activation}`` for the requested taps (default all)."""
        taps = self.TAPS if taps is None else tuple(taps)
        unknown = set(taps) - set(self.TAPS)
        if unknown:
            raise ValidationError(f"unknown feature taps {sorted(unknown)}")
        if self.normalize:
            x = ((x + 1) / 2 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        last = max(self.TAPS.index(t) for t in taps)
        out = {}
        h = x
        for i, block in enumerate(self.blocks[: last + 1]):
            h = block(h)
            if self.TAPS[i] in taps:
                out[self.TAPS[i]] = h
        return out

    def tap_for_resolution(self, image_size, resolution):
        """Name of the tap whose spatial size is ``resolution`` for ``image_size`` inputs."""
        for i, name in enumerate(self.TAPS):
            if image_size // 2 ** i == resolution:
                return name
        raise DimensionError(f"no feature tap at resolution {resolution} for {image_size}px inputs")


# ---------------------------------------------------------------------------
# weights


@dataclass
class LossWeights:
    attn: float = 5.0
    flow: float = 2.0
    regu: float = 0.001
    perc: float = 0.5
    face: float = 1.0
    style: float = 500.0
    adv: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def total_loss(components, weights):
    """Weighted sum ``sum_k lambda_k * L_k`` over the components present."""
    if isinstance(weights, dict):
        weights = LossWeights(**weights)
    else:
        weights.__post_init__()
    w = weights.as_dict()
    total = 0.0
    for name, value in components.items():
        if name not in w:
            raise ValidationError(f"unknown loss component {name!r}")
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise ValidationError(f"loss component {name} is not finite")
        total = total + w[name] * value
    return total


# ---------------------------------------------------------------------------
# deformation losses


def attention_loss(corr, x_r_down, x_t_down):
    """Mean L1 between the attention-warped reference and the target."""
    if x_r_down.shape != x_t_down.shape:
        raise DimensionError(f"{tuple(x_r_down.shape)} vs {tuple(x_t_down.shape)}")
    return (attention_warp(x_r_down, corr) - x_t_down).abs().mean()


def cosine_similarity(a, b, dim=1, eps=1e-8):
    num = (a * b).sum(dim)
    den = (a.norm(dim=dim) * b.norm(dim=dim)).clamp_min(eps)
    return num / den


def sampling_correctness_from_features(flow, v_r, v_t, border_mode="clamp", eps=COS_EPS):
    """Sampling-correctness loss on precomputed feature maps.

    For each target position ``l`` the cosine similarity between the warped
    reference feature and ``v_t^l`` is divided by the best similarity any
    single reference position achieves; both are clamped below at ``eps``.
    The ratio may exceed one (interpolated features can beat every source).
    """
    if v_r.shape != v_t.shape:
        raise DimensionError(f"feature shapes differ: {tuple(v_r.shape)} vs {tuple(v_t.shape)}")
    if not (torch.isfinite(v_r).all() and torch.isfinite(v_t).all()):
        raise ValidationError("features contain non-finite values")
    n, c, h, w = v_r.shape
    warped = flow_warp(v_r, flow, border_mode)
    num = cosine_similarity(warped, v_t).clamp_min(eps)
    a = v_r.reshape(n, c, h * w)
    b = v_t.reshape(n, c, h * w)
    a = a / a.norm(dim=1, keepdim=True).clamp_min(1e-8)
    b = b / b.norm(dim=1, keepdim=True).clamp_min(1e-8)
    best = torch.bmm(a.transpose(1, 2), b).amax(dim=1).reshape(n, h, w)
    den = best.clamp_min(eps)
    return torch.exp(-num / den).mean()


def sampling_correctness_loss(flow, x_r, x_t, fx, border_mode="clamp"):
    """Sampling-correctness loss using the extractor tap at the flow's resolution."""
    if x_r.shape != x_t.shape:
        raise DimensionError(f"{tuple(x_r.shape)} vs {tuple(x_t.shape)}")
    tap = fx.tap_for_resolution(x_r.shape[-1], flow.shape[-1])
    with torch.no_grad():
        v_r = fx(x_r, [tap])[tap]
        v_t = fx(x_t, [tap])[tap]
    return sampling_correctness_from_features(flow, v_r, v_t, border_mode)


def least_squares_affine(R, S, eps=RIDGE, check=True):
    """Ridge least-squares ``A = R S^T (S S^T + eps I)^{-1}`` for ``R ~ A S``.

    ``R`` and ``S`` are ``(..., 3, P)`` homogeneous coordinates. With
    ``check=True`` raises :class:`DegeneracyError` when ``S`` is numerically
    rank deficient (smallest singular value below ``1e-9`` of the largest).
    """
    if R.shape != S.shape or R.shape[-2] != 3:
        raise DimensionError(f"R and S must both be (..., 3, P); got {tuple(R.shape)} and {tuple(S.shape)}")
    if R.shape[-1] < 3:
        raise DimensionError("need at least 3 points")
    if check:
        sv = torch.linalg.svdvals(S.detach().double())
        if (sv[..., -1] <= 1e-9 * sv[..., 0]).any():
            raise DegeneracyError("sampling points are degenerate (rank-deficient S)")
    eye = torch.eye(3, dtype=S.dtype, device=S.device)
    gram = S @ S.transpose(-1, -2) + eps * eye
    # gram is symmetric: A^T = gram^{-1} S R^T
    return torch.linalg.solve(gram, S @ R.transpose(-1, -2)).transpose(-1, -2)


def patch_coordinates(n, dtype=torch.float32, device=None):
    """Homogeneous ``(3, n*n)`` coordinates of an n x n patch centred at the origin."""
    r = torch.arange(n, dtype=dtype, device=device) - (n - 1) / 2
    ys, xs = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1), torch.ones(n * n, dtype=dtype, device=device)])


def regularization_loss(flow, n=3, eps=RIDGE):
    """Local-affinity penalty averaged over all n x n patches (stride 1).

    Patch coordinates are taken relative to the patch centre; the affine fit
    residual is invariant to that translation.
    """
    if n < 1 or n % 2 == 0:
        raise ValidationError(f"patch size must be odd and positive, got {n}")
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise DimensionError(f"flow must be (N, 2, H, W), got {tuple(flow.shape)}")
    N, _, h, w = flow.shape
    if h < n or w < n:
        raise ValidationError(f"flow {h}x{w} is smaller than the {n}x{n} patch")
    patches = F.unfold(flow, n)  # (N, 2*n*n, L)
    L = patches.shape[-1]
    patches = patches.reshape(N, 2, n * n, L).permute(0, 3, 1, 2)  # (N, L, 2, n*n)
    R = patch_coordinates(n, flow.dtype, flow.device).expand(N, L, 3, n * n)
    zeros = torch.zeros(N, L, 1, n * n, dtype=flow.dtype, device=flow.device)
    S = R + torch.cat([patches, zeros], dim=2)
    A = least_squares_affine(R, S, eps, check=False)
    resid = R - A @ S
    return (resid ** 2).sum(dim=(-1, -2)).mean()


# ---------------------------------------------------------------------------
# image losses


def _target_and_pred(x_t, x_hat, fx, taps, target_feats, pred_feats):
    if x_t is not None and x_t.shape != x_hat.shape:
        raise DimensionError(f"{tuple(x_t.shape)} vs {tuple(x_hat.shape)}")
    taps = fx.TAPS if taps is None else tuple(taps)
    if target_feats is None:
        target_feats = fx(x_t, taps)
    if pred_feats is None:
        pred_feats = fx(x_hat, taps)
    return {k: target_feats[k] for k in taps}, {k: pred_feats[k] for k in taps}


def perceptual_loss(x_t, x_hat, fx, taps=None, target_feats=None, pred_feats=None):
    """Sum over taps of the mean absolute activation difference.

    ``target_feats``/``pred_feats`` may carry precomputed activations.
    """
    a, b = _target_and_pred(x_t, x_hat, fx, taps, target_feats, pred_feats)
    return sum((a[k] - b[k]).abs().mean() for k in a)


@dataclass
class FaceRegion:
    """Box in full-resolution pixels; ``valid=False`` means no face was found."""

    top: int = 0
    left: int = 0
    height: int = 0
    width: int = 0
    valid: bool = False

    def check(self, image_h, image_w):
        if not self.valid:
            return
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"face box has non-positive size: {self}")
        if self.top < 0 or self.left < 0 or self.top + self.height > image_h or self.left + self.width > image_w:
            raise ValidationError(f"face box {self} exceeds a {image_h}x{image_w} image")


def face_region_from_keypoints(kps, margin=1.5, min_points=2):
    """Square box around the visible face keypoints, enlarged by ``margin``, clipped to the image."""
    idx = [KEYPOINT_INDEX[k] for k in FACE_KEYPOINTS]
    pts = kps.points[idx]
    pts = pts[pts[:, 2] > 0]
    if len(pts) < min_points:
        return FaceRegion()
    x0, y0 = pts[:, 0].min(), pts[:, 1].min()
    x1, y1 = pts[:, 0].max(), pts[:, 1].max()
    side = max(x1 - x0, y1 - y0, 1.0) * margin
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    left = int(math.floor(cx - side / 2 + 0.5))
    top = int(math.floor(cy - side / 2 + 0.5))
    right = int(math.floor(cx + side / 2 + 0.5)) + 1
    bottom = int(math.floor(cy + side / 2 + 0.5)) + 1
    left, top = max(left, 0), max(top, 0)
    right, bottom = min(right, kps.width), min(bottom, kps.height)
    if right - left < 2 or bottom - top < 2:
        return FaceRegion()
    return FaceRegion(top, left, bottom - top, right - left, True)


def crop_faces(x, faces, size=FACE_PATCH):
    """Crop each valid box and resize it to ``size x size``; returns (crops, indices)."""
    crops, idx = [], []
    for i, face in enumerate(faces):
        face.check(x.shape[-2], x.shape[-1])
        if not face.valid:
            continue
        patch = x[i : i + 1, :, face.top : face.top + face.height, face.left : face.left + face.width]
        crops.append(resize(patch, (size, size)))
        idx.append(i)
    if not crops:
        return None, idx
    return torch.cat(crops), idx


def face_loss(x_t, x_hat, faces, fx, taps=None):
    """Perceptual loss on cropped faces. Returns ``(loss, skipped)``.

    ``faces`` holds one :class:`FaceRegion` per batch element (a single region
    is accepted for batch size 1). When no region is valid the loss is 0 and
    ``skipped`` is True.
    """
    if x_t.shape != x_hat.shape:
        raise DimensionError(f"{tuple(x_t.shape)} vs {tuple(x_hat.shape)}")
    if isinstance(faces, FaceRegion):
        faces = [faces]
    if len(faces) != x_t.shape[0]:
        raise DimensionError(f"{len(faces)} face regions for a batch of {x_t.shape[0]}")
    a, idx = crop_faces(x_t, faces)
    if a is None:
        return x_hat.new_zeros(()), True
    b, _ = crop_faces(x_hat, faces)
    return perceptual_loss(a, b, fx, taps) * (len(idx) / len(faces)), False


def gram_matrix(phi):
    """Channel Gram matrix normalised by the number of spatial positions."""
    n, c, h, w = phi.shape
    f = phi.reshape(n, c, h * w)
    return torch.bmm(f, f.transpose(1, 2)) / (h * w)


def style_loss(x_t, x_hat, fx, taps=None, target_feats=None, pred_feats=None):
    """Sum over taps of the mean absolute Gram-matrix difference."""
    a, b = _target_and_pred(x_t, x_hat, fx, taps, target_feats, pred_feats)
    return sum((gram_matrix(a[k]) - gram_matrix(b[k])).abs().mean() for k in a)


def adversarial_losses(d_real, d_fake):
    """Hinge losses ``(g_loss, d_loss)``.

    ``d_loss = mean(relu(1 - D(x_t))) + mean(relu(1 + D(x_hat)))`` and
    ``g_loss = -mean(D(x_hat))``.
    """
    for name, t in (("d_real", d_real), ("d_fake", d_fake)):
        if not torch.isfinite(t).all():
            raise ValidationError(f"{name} contains non-finite scores")
    d_loss = F.relu(1 - d_real).mean() + F.relu(1 + d_fake).mean()
    g_loss = -d_fake.mean()
    return g_loss, d_loss
