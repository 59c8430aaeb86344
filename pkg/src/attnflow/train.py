"""Staged training, historical parameter averaging and validation.

Training log format (``losses.tsv`` in the run directory): one line per
scalar, ``<step>\\t<stage>/<name>\\t<value>`` where ``value`` is the Python
``repr`` of the float. Stages are ``pretrain``, ``full`` and ``val``.
"""

import copy
import logging
import math
from pathlib import Path

import torch
import torch.nn.functional as F

from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, parse_config
from .data.keypoints import SKELETON_CHANNELS
from .data.loader import DataConfig, batch_at, collate, make_dataset, validation_dataset
from .deform_net import DeformationEstimator
from .errors import ConfigError, NonFiniteLossError, ValidationError
from .metrics import masked_mean, ssim
from .synthesis_net import Generator, PatchDiscriminator
from .warp_ops import resize, resize_flow

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# historical averaging


class AveragedParameters:
    """Exponential moving average of a named parameter set.

    With ``warmup`` the effective decay is ``min(decay, (1 + k) / (10 + k))``
    after ``k`` previous updates, so early averages are not dominated by the
    initial weights.
    """

    def __init__(self, params, decay=0.999, warmup=True, count=0):
        if not 0 <= decay < 1:
            raise ValidationError(f"decay must lie in [0, 1), got {decay}")
        self.params = {k: v.detach().clone() for k, v in params.items()}
        self.decay = decay
        self.warmup = warmup
        self.count = count

    def effective_decay(self):
        if self.warmup:
            return min(self.decay, (1 + self.count) / (10 + self.count))
        return self.decay

    @torch.no_grad()
    def update(self, current):
        if set(current) != set(self.params):
            raise ValidationError("parameter names differ from the averaged set")
        d = self.effective_decay()
        for k, v in current.items():
            avg = self.params[k]
            if avg.shape != v.shape:
                raise ValidationError(f"shape mismatch for {k}: {tuple(avg.shape)} vs {tuple(v.shape)}")
            avg.mul_(d).add_(v.detach(), alpha=1 - d)
        self.count += 1
        return self


def update_average(avg, current):
    return avg.update(current)


# ---------------------------------------------------------------------------
# model construction


def build_models(cfg):
    """Deformation estimator (or ``None`` for the baseline), generator, discriminator."""
    torch.manual_seed(cfg.init_seed)
    deform = None
    if cfg.variant != "baseline":
        branches = {"attn": "attn", "flow": "flow"}.get(cfg.variant, "both")
        deform = DeformationEstimator(
            image_size=cfg.image_size, scales=cfg.scales,
            key_channels=dict(zip(cfg.scales, cfg.key_channels)),
            enc_width=cfg.enc_width, flow_width=cfg.flow_width, mask_width=cfg.mask_width,
            mask_blocks=cfg.mask_blocks, alpha=cfg.alpha, branches=branches, border_mode=cfg.border_mode,
            flow_refine=cfg.flow_refine,
        )
    gen = Generator(cfg.image_size, cfg.scales, width=cfg.gen_width, warp=cfg.variant != "baseline",
                    border_mode=cfg.border_mode)
    disc_in = 3 + (SKELETON_CHANNELS if cfg.disc_conditional else 0)
    disc = PatchDiscriminator(cfg.image_size, cfg.disc_width, in_ch=disc_in)
    return deform, gen, disc


def build_extractor(cfg):
    if cfg.extractor == "random":
        return L.FeatureExtractor(seed=cfg.extractor_seed, calibrate=cfg.extractor_calibrate)
    return L.FeatureExtractor.from_vgg19(cfg.extractor)


def data_config(cfg):
    return DataConfig(source=cfg.data_source, path=cfg.data_path, num_samples=cfg.num_samples,
                      seed=cfg.data_seed, shuffle=True, shuffle_seed=cfg.shuffle_seed,
                      batch_size=cfg.batch_size, image_size=cfg.image_size, identity_prob=cfg.identity_prob)


def named_params(deform, gen):
    out = {}
    if deform is not None:
        out.update({f"deform.{k}": v for k, v in deform.named_parameters()})
    out.update({f"gen.{k}": v for k, v in gen.named_parameters()})
    return out


def run_generator(deform, gen, batch):
    defs = deform(batch["x_r"], batch["s_r"], batch["s_t"]) if deform is not None else None
    return defs, gen(batch["x_r"], batch["s_t"], defs)


def deformation_losses(defs, batch, fx, feats, reg_patch=3, border_mode="clamp"):
    """``attn``/``flow``/``regu`` summed over scales (only for active branches)."""
    comps = {}
    size = batch["x_r"].shape[-1]
    for s in defs.scales:
        d = defs[s]
        if d.corr is not None:
            v = L.attention_loss(d.corr, resize(batch["x_r"], (s, s)), resize(batch["x_t"], (s, s)))
            comps["attn"] = comps.get("attn", 0) + v
        if d.flow is not None:
            tap = fx.tap_for_resolution(size, s)
            v = L.sampling_correctness_from_features(d.flow, feats["r"][tap], feats["t"][tap], border_mode)
            comps["flow"] = comps.get("flow", 0) + v
            comps["regu"] = comps.get("regu", 0) + L.regularization_loss(d.flow, reg_patch)
    return comps


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns models, optimisers, averaged parameters and the schedule position."""

    def __init__(self, cfg=None, out_dir=None):
        self.cfg = cfg or TrainConfig()
        if self.cfg.num_threads > 0:
            torch.set_num_threads(self.cfg.num_threads)
        self.out_dir = Path(out_dir or self.cfg.out_dir)
        self.deform, self.gen, self.disc = build_models(self.cfg)
        self.fx = build_extractor(self.cfg)
        self.weights = self.cfg.loss_weights()
        self.data_cfg = data_config(self.cfg)
        self.dataset = make_dataset(self.data_cfg)
        if self.cfg.data_source == "synthetic":
            self.dataset = _Cached(self.dataset)
        self.val_set = validation_dataset(self.data_cfg, self.cfg.val_pairs)
        betas = (self.cfg.beta1, self.cfg.beta2)
        self.opt_pre = (torch.optim.Adam(self.deform.parameters(), self.cfg.lr_g, betas=betas)
                        if self.deform is not None else None)
        self.opt_g = torch.optim.Adam(named_params(self.deform, self.gen).values(), self.cfg.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), self.cfg.lr_d, betas=betas)
        self.avg = AveragedParameters(named_params(self.deform, self.gen), self.cfg.avg_decay, self.cfg.avg_warmup)
        self.pretrain_done = 0
        self.full_done = 0
        self.history = []
        self._log_fh = None

    # -- logging -----------------------------------------------------------

    @property
    def global_step(self):
        return self.pretrain_done + self.full_done

    def _log(self, step, name, value):
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        self.history.append((step, name, value))
        if self._log_fh is None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "losses.tsv", "a")
        self._log_fh.write(f"{step}\t{name}\t{value!r}\n")
        self._log_fh.flush()

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    # -- steps -------------------------------------------------------------

    def _features(self, batch):
        with torch.no_grad():
            return {"r": self.fx(batch["x_r"]), "t": self.fx(batch["x_t"])}

    def _check_finite(self, comps, batch, stage, step):
        total = sum(float(v.detach()) for v in comps.values())
        if not math.isfinite(total):
            dump = self.out_dir / f"nonfinite_{stage}_{step}.ckpt"
            save_checkpoint(dump, {k: v for k, v in batch.items() if torch.is_tensor(v)},
                            {"stage": stage, "step": step, "seeds": batch["seeds"],
                             "components": {k: repr(float(v.detach())) for k, v in comps.items()}})
            raise NonFiniteLossError(f"non-finite {stage} loss at step {step}; batch saved to {dump}", dump)

    def pretrain_step(self):
        step = self.global_step
        batch = batch_at(step, self.data_cfg, self.dataset)
        feats = self._features(batch)
        defs = self.deform(batch["x_r"], batch["s_r"], batch["s_t"])
        comps = deformation_losses(defs, batch, self.fx, feats, self.cfg.regu_patch, self.cfg.border_mode)
        self._check_finite(comps, batch, "pretrain", step)
        loss = L.total_loss(comps, self.weights)
        self.opt_pre.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_pre.step()
        for k in sorted(comps):
            self._log(step, f"pretrain/{k}", comps[k])
        self._log(step, "pretrain/total", loss)
        self.pretrain_done += 1
        return comps

    def _disc_input(self, img, batch):
        if self.cfg.disc_conditional:
            return torch.cat([img, batch["s_t"]], dim=1)
        return img

    def full_step(self):
        step = self.global_step
        batch = batch_at(step, self.data_cfg, self.dataset)
        feats = self._features(batch)
        defs, out = run_generator(self.deform, self.gen, batch)
        comps = {}
        if defs is not None:
            comps.update(deformation_losses(defs, batch, self.fx, feats, self.cfg.regu_patch, self.cfg.border_mode))
        taps = sorted(set(self.cfg.perc_taps) | set(self.cfg.style_taps))
        pred = self.fx(out.image, taps)
        comps["perc"] = L.perceptual_loss(None, out.image, self.fx, self.cfg.perc_taps, feats["t"], pred)
        comps["style"] = L.style_loss(None, out.image, self.fx, self.cfg.style_taps, feats["t"], pred)
        if self.weights.face > 0:
            faces = [L.face_region_from_keypoints(k, self.cfg.face_margin) for k in batch["kp_t"]]
            face, skipped = L.face_loss(batch["x_t"], out.image, faces, self.fx, self.cfg.perc_taps)
            if not skipped:
                comps["face"] = face
        d_fake = self.disc(self._disc_input(out.image, batch))
        comps["adv"] = -d_fake.mean()
        self._check_finite(comps, batch, "full", step)
        loss = L.total_loss(comps, self.weights)
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_g.step()

        d_real = self.disc(self._disc_input(batch["x_t"], batch))
        d_fake = self.disc(self._disc_input(out.image.detach(), batch))
        _, d_loss = L.adversarial_losses(d_real, d_fake)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()
        self.avg.update(named_params(self.deform, self.gen))

        for k in sorted(comps):
            self._log(step, f"full/{k}", comps[k])
        self._log(step, "full/total", loss)
        self._log(step, "full/d_loss", d_loss)
        self.full_done += 1
        return comps

    # -- schedule ----------------------------------------------------------

    def _maybe_checkpoint(self, force=False):
        every = self.cfg.checkpoint_every
        if force or (every and self.global_step % every == 0):
            self.check_deformations()
            self.save(self.out_dir / f"step_{self.global_step:07d}.ckpt")
            self.save(self.out_dir / "last.ckpt")

    def pretrain(self, steps=None):
        """Optimise the deformation losses only. Returns ``self``."""
        steps = self.cfg.pretrain_steps if steps is None else steps
        if self.deform is None:
            log.info("baseline variant has no deformation module; skipping pretraining")
            self.pretrain_done = max(self.pretrain_done, 0)
            return self
        target = steps
        while self.pretrain_done < target:
            self.pretrain_step()
            self._maybe_checkpoint()
        return self

    def train_full(self, steps=None):
        """Alternating generator/discriminator training on the total loss."""
        steps = self.cfg.full_steps if steps is None else steps
        while self.full_done < steps:
            self.full_step()
            if self.cfg.validate_every and self.full_done % self.cfg.validate_every == 0:
                for k, v in self.validate().items():
                    self._log(self.global_step, f"val/{k}", v)
            self._maybe_checkpoint()
        return self

    def run(self, stage="all"):
        if stage not in ("pretrain", "full", "all"):
            raise ConfigError(f"unknown stage {stage!r}")
        if stage in ("pretrain", "all"):
            self.pretrain()
        if stage in ("full", "all"):
            self.train_full()
        self._maybe_checkpoint(force=True)
        return self

    # -- evaluation ----------------------------------------------------------

    def eval_models(self, averaged=True):
        """Snapshot copies of the deformation estimator and generator.

        With ``averaged=True`` (and at least one averaging update) the copies
        hold the historical average; otherwise the current parameters.
        """
        deform = copy.deepcopy(self.deform) if self.deform is not None else None
        gen = copy.deepcopy(self.gen)
        if averaged and self.avg.count > 0:
            params = named_params(deform, gen)
            with torch.no_grad():
                for k, p in params.items():
                    p.copy_(self.avg.params[k])
        return deform, gen

    @torch.no_grad()
    def validate(self, averaged=True, batch_size=16):
        deform, gen = self.eval_models(averaged)
        return evaluate(deform, gen, self.val_set, self.fx, batch_size)

    @torch.no_grad()
    def check_deformations(self):
        if self.deform is None:
            return True
        batch = collate([self.val_set[i] for i in range(min(4, len(self.val_set)))])
        return self.deform(batch["x_r"], batch["s_r"], batch["s_t"]).check()

    # -- checkpoints -------------------------------------------------------

    def state_tensors(self):
        tensors = {}
        for k, v in named_params(self.deform, self.gen).items():
            tensors[k] = v
        for k, v in self.disc.named_parameters():
            tensors[f"disc.{k}"] = v
        for k, v in self.avg.params.items():
            tensors[f"avg.{k}"] = v
        optims = {"pre": self.opt_pre, "g": self.opt_g, "d": self.opt_d}
        names = self._optim_param_names()
        for tag, opt in optims.items():
            if opt is None:
                continue
            for p, name in zip(_opt_params(opt), names[tag]):
                for key, val in opt.state.get(p, {}).items():
                    tensors[f"optim.{tag}.{name}.{key}"] = torch.as_tensor(val)
        return tensors

    def _optim_param_names(self):
        ids = {id(p): k for k, p in named_params(self.deform, self.gen).items()}
        ids.update({id(p): f"disc.{k}" for k, p in self.disc.named_parameters()})
        out = {}
        for tag, opt in (("pre", self.opt_pre), ("g", self.opt_g), ("d", self.opt_d)):
            if opt is not None:
                out[tag] = [ids[id(p)] for p in _opt_params(opt)]
        return out

    def save(self, path):
        meta = {
            "config": self.cfg.to_text(),
            "pretrain_done": self.pretrain_done,
            "full_done": self.full_done,
            "avg_count": self.avg.count,
        }
        save_checkpoint(path, self.state_tensors(), meta)

    def load(self, path):
        tensors, meta = load_checkpoint(path)
        self.load_state(tensors, meta)
        return self

    def load_state(self, tensors, meta):
        with torch.no_grad():
            for k, p in named_params(self.deform, self.gen).items():
                p.copy_(tensors[k])
            for k, p in self.disc.named_parameters():
                p.copy_(tensors[f"disc.{k}"])
            for k in self.avg.params:
                self.avg.params[k].copy_(tensors[f"avg.{k}"])
        self.avg.count = int(meta["avg_count"])
        names = self._optim_param_names()
        for tag, opt in (("pre", self.opt_pre), ("g", self.opt_g), ("d", self.opt_d)):
            if opt is None:
                continue
            state = {}
            for i, name in enumerate(names[tag]):
                prefix = f"optim.{tag}.{name}."
                entry = {k[len(prefix):]: v.clone() for k, v in tensors.items() if k.startswith(prefix)}
                if entry:
                    state[i] = entry
            sd = opt.state_dict()
            sd["state"] = state
            opt.load_state_dict(sd)
        self.pretrain_done = int(meta["pretrain_done"])
        self.full_done = int(meta["full_done"])

    @classmethod
    def from_checkpoint(cls, path, out_dir=None, **overrides):
        tensors, meta = load_checkpoint(path)
        cfg = parse_config(meta["config"])
        if overrides:
            cfg = cfg.replace(**overrides)
        trainer = cls(cfg, out_dir)
        trainer.load_state(tensors, meta)
        return trainer


def load_models(path, averaged=True):
    """``(cfg, deform, gen)`` from a checkpoint, without optimisers or data.

    ``averaged`` selects the historical-average weights when the checkpoint
    has any averaging updates recorded.
    """
    tensors, meta = load_checkpoint(path)
    cfg = parse_config(meta["config"])
    deform, gen, _ = build_models(cfg)
    use_avg = averaged and int(meta.get("avg_count", 0)) > 0
    with torch.no_grad():
        for k, p in named_params(deform, gen).items():
            p.copy_(tensors[f"avg.{k}" if use_avg else k])
    if deform is not None:
        deform.eval()
    gen.eval()
    return cfg, deform, gen


class _Cached:
    """Memoises generated pairs (synthetic generation is deterministic)."""

    def __init__(self, ds):
        self.ds = ds
        self.cache = {}

    def __len__(self):
        return len(self.ds)

    def __getitem__(self, i):
        if i not in self.cache:
            self.cache[i] = self.ds[i]
        return self.cache[i]


def _opt_params(opt):
    return [p for group in opt.param_groups for p in group["params"]]


def _region_masks(batch, scale):
    """Textured-sprite and flat-background masks at a warp scale."""
    k = batch["x_r"].shape[-1] // scale
    tex = F.avg_pool2d(batch["texture_mask"].float(), k) >= 0.75
    bg = F.avg_pool2d(batch["target_mask"].float(), k) == 0
    return tex, bg


@torch.no_grad()
def evaluate(deform, gen, dataset, fx, batch_size=16, return_counts=False):
    """Validation metrics over a dataset of pairs.

    ``perc``: perceptual loss of the synthesized target; ``ssim``; ``epe`` of
    the finest flow (upsampled to image resolution) inside ``mask``;
    ``m_texture`` / ``m_flat``: mean combination map at the finest scale over
    textured sprite pixels and over flat background. With ``return_counts``
    also returns how many pairs (or pixels, for the masked metrics) each
    mean is taken over.
    """
    sums = {}
    counts = {}

    def add(name, value, n):
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return
        sums[name] = sums.get(name, 0.0) + value * n
        counts[name] = counts.get(name, 0) + n

    for start in range(0, len(dataset), batch_size):
        batch = collate([dataset[i] for i in range(start, min(start + batch_size, len(dataset)))])
        n = batch["x_r"].shape[0]
        defs, out = run_generator(deform, gen, batch)
        add("perc", float(L.perceptual_loss(batch["x_t"], out.image, fx)), n)
        add("ssim", ssim(out.image, batch["x_t"]), n)
        add("l1", float((out.image - batch["x_t"]).abs().mean()), n)
        if defs is None:
            continue
        finest = defs.scales[-1]
        d = defs[finest]
        if d.flow is not None and batch["mask"].any():
            size = batch["x_r"].shape[-1]
            full = resize_flow(d.flow, (size, size))
            m = batch["mask"]
            err = torch.sqrt(((full - batch["w_gt"]) ** 2).sum(1, keepdim=True))
            add("epe", float(err[m].mean()), int(m.sum()))
            add("epe_zero", float(torch.sqrt((batch["w_gt"] ** 2).sum(1, keepdim=True))[m].mean()), int(m.sum()))
        if d.corr is not None and d.flow is not None:
            tex, bg = _region_masks(batch, finest)
            add("m_texture", masked_mean(d.mask, tex), int(tex.sum()))
            add("m_flat", masked_mean(d.mask, bg), int(bg.sum()))
    means = {k: sums[k] / counts[k] for k in sorted(sums) if counts[k] > 0}
    if return_counts:
        return means, {k: counts[k] for k in means}
    return means
