"""Paired-sample datasets and the deterministic batch iterator.

Directory layout (one sub-directory per pair, visited in sorted name order)::

    root/
      0000/
        reference.png       RGB reference image
        target.png          RGB target image
        reference.json      keypoints of the reference (see keypoints.py)
        target.json         keypoints of the target
        flow.flo            optional ground-truth backward flow (target -> reference)
        mask.png            optional validity mask for flow.flo (non-zero = valid)
      0001/
        ...
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..errors import ConfigError
from ..flo import read_flo, write_flo
from .keypoints import load_keypoints, rasterize_skeleton, save_keypoints
from .sprite import SyntheticPair, generate_sprite_pair

VALIDATION_SEED_OFFSET = 1_000_000


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    num_samples: int = 4000
    seed: int = 0
    shuffle: bool = True
    shuffle_seed: int = 0
    batch_size: int = 8
    image_size: int = 64
    identity_prob: float = 0.1


class SyntheticDataset:
    def __init__(self, num_samples, seed=0, image_size=64, identity_prob=0.1):
        if num_samples < 1:
            raise ConfigError("synthetic source needs num_samples >= 1")
        self.num_samples = num_samples
        self.seed = seed
        self.image_size = image_size
        self.identity_prob = identity_prob

    def __len__(self):
        return self.num_samples

    def __getitem__(self, i):
        if not 0 <= i < self.num_samples:
            raise IndexError(i)
        return generate_sprite_pair(self.seed + i, self.image_size, self.identity_prob)


def _load_image(path, size):
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0


class DirectoryDataset:
    def __init__(self, root, image_size=64):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigError(f"data directory {self.root} does not exist")
        self.pairs = sorted(p for p in self.root.iterdir() if p.is_dir() and (p / "reference.png").exists())
        if not self.pairs:
            raise ConfigError(f"no pairs found under {self.root}")
        self.image_size = image_size

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        d = self.pairs[i]
        size = self.image_size
        x_r = _load_image(d / "reference.png", size)
        x_t = _load_image(d / "target.png", size)
        s_r = load_keypoints(d / "reference.json").scaled(size, size)
        s_t = load_keypoints(d / "target.json").scaled(size, size)
        if (d / "flow.flo").exists():
            flow = torch.from_numpy(read_flo(d / "flow.flo")).permute(2, 0, 1)[None]
            if flow.shape[-1] != size or flow.shape[-2] != size:
                from ..warp_ops import resize_flow

                flow = resize_flow(flow, (size, size))
            w_gt = flow[0].numpy()
            if (d / "mask.png").exists():
                m = Image.open(d / "mask.png").convert("L").resize((size, size), Image.NEAREST)
                mask = np.asarray(m) > 0
            else:
                mask = np.ones((size, size), dtype=bool)
        else:
            w_gt = np.zeros((2, size, size), dtype=np.float32)
            mask = np.zeros((size, size), dtype=bool)
        empty = np.zeros((size, size), dtype=bool)
        return SyntheticPair(x_r, x_t, s_r, s_t, w_gt.astype(np.float32), mask, empty, empty, seed=i)


def _to_png(img):
    return Image.fromarray(((img.transpose(1, 2, 0) + 1.0) * 127.5).round().clip(0, 255).astype(np.uint8))


def save_pair(pair, directory):
    """Write one pair in the directory layout above."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _to_png(pair.x_r).save(d / "reference.png")
    _to_png(pair.x_t).save(d / "target.png")
    save_keypoints(d / "reference.json", pair.s_r)
    save_keypoints(d / "target.json", pair.s_t)
    write_flo(d / "flow.flo", np.moveaxis(pair.w_gt, 0, -1))
    Image.fromarray(pair.mask.astype(np.uint8) * 255).save(d / "mask.png")


def make_dataset(cfg):
    if cfg.source == "synthetic":
        return SyntheticDataset(cfg.num_samples, cfg.seed, cfg.image_size, cfg.identity_prob)
    if cfg.source == "directory":
        if not cfg.path:
            raise ConfigError("directory source needs a path")
        return DirectoryDataset(cfg.path, cfg.image_size)
    raise ConfigError(f"unknown data source {cfg.source!r}")


def collate(pairs):
    """Stack pairs into a batch dict of tensors (plus keypoint lists)."""
    from ..losses import face_region_from_keypoints

    size = pairs[0].x_r.shape[-1]
    t = lambda arrs: torch.from_numpy(np.stack(arrs))
    return {
        "x_r": t([p.x_r for p in pairs]),
        "x_t": t([p.x_t for p in pairs]),
        "s_r": t([rasterize_skeleton(p.s_r, size, size) for p in pairs]),
        "s_t": t([rasterize_skeleton(p.s_t, size, size) for p in pairs]),
        "w_gt": t([p.w_gt for p in pairs]),
        "mask": t([p.mask[None] for p in pairs]),
        "target_mask": t([p.target_mask[None] for p in pairs]),
        "texture_mask": t([p.texture_mask[None] for p in pairs]),
        "kp_r": [p.s_r for p in pairs],
        "kp_t": [p.s_t for p in pairs],
        "faces": [face_region_from_keypoints(p.s_t) for p in pairs],
        "seeds": [p.seed for p in pairs],
    }


def epoch_order(n, cfg, epoch):
    if not cfg.shuffle:
        return np.arange(n)
    return np.random.default_rng([cfg.shuffle_seed, epoch]).permutation(n)


def make_batch_iterator(cfg, epoch=0, dataset=None):
    """Yield the batches of one epoch; the last batch may be short."""
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    ds = dataset if dataset is not None else make_dataset(cfg)
    if len(ds) == 0:
        raise ConfigError("data source is empty")
    order = epoch_order(len(ds), cfg, epoch)
    for start in range(0, len(order), cfg.batch_size):
        yield collate([ds[int(i)] for i in order[start : start + cfg.batch_size]])


def batch_at(step, cfg, dataset):
    """The batch consumed at global training ``step`` (full batches only, epochs wrap)."""
    per_epoch = len(dataset) // cfg.batch_size
    if per_epoch == 0:
        raise ConfigError(f"dataset of {len(dataset)} pairs is smaller than one batch of {cfg.batch_size}")
    epoch, k = divmod(step, per_epoch)
    order = epoch_order(len(dataset), cfg, epoch)
    idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
    return collate([dataset[int(i)] for i in idx])


def validation_dataset(cfg, num_pairs=64):
    """Held-out synthetic pairs with seeds disjoint from the training range."""
    return SyntheticDataset(num_pairs, cfg.seed + VALIDATION_SEED_OFFSET, cfg.image_size, cfg.identity_prob)
