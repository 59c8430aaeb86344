"""Command-line entry point: ``attnflow {train,infer,eval,visualize,ablate}``."""

import argparse
import csv
import logging
import sys
from pathlib import Path

import torch
from PIL import Image

from .config import VARIANTS, TrainConfig, load_config
from .data.keypoints import load_keypoints, rasterize_skeleton
from .data.loader import DirectoryDataset, _load_image, collate, save_pair, validation_dataset
from .data.sprite import generate_sprite_pair
from .errors import AttnFlowError
from .train import Trainer, build_extractor, data_config, evaluate, load_models, run_generator
from .visualize import tensor_to_image, visualize

log = logging.getLogger("attnflow")

METRICS = ("ssim", "epe", "perc", "l1", "epe_zero", "m_texture", "m_flat")


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "out_dir", None):
        cfg = cfg.replace(out_dir=args.out_dir)
    return cfg


def cmd_train(args):
    if args.resume:
        overrides = {"out_dir": args.out_dir} if args.out_dir else {}
        trainer = Trainer.from_checkpoint(args.resume, **overrides)
        if args.config:
            log.info("--resume given: the checkpoint's own config is used, %s is ignored", args.config)
    else:
        trainer = Trainer(_config(args))
    trainer.run(args.stage)
    trainer.close()
    print(trainer.out_dir / "last.ckpt")
    return 0


def _pair_batch(reference, ref_kps, tgt_kps, size):
    x_r = torch.from_numpy(_load_image(reference, size))[None]
    s_r = load_keypoints(ref_kps).scaled(size, size)
    s_t = load_keypoints(tgt_kps).scaled(size, size)
    sk_r = torch.from_numpy(rasterize_skeleton(s_r, size, size))[None]
    sk_t = torch.from_numpy(rasterize_skeleton(s_t, size, size))[None]
    return {"x_r": x_r, "s_r": sk_r, "s_t": sk_t}


@torch.no_grad()
def cmd_infer(args):
    cfg, deform, gen = load_models(args.checkpoint)
    batch = _pair_batch(args.reference, args.ref_keypoints, args.target_keypoints, cfg.image_size)
    _, out = run_generator(deform, gen, batch)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tensor_to_image(out.image[0])).save(args.out)
    print(args.out)
    return 0


def _eval_dataset(spec, cfg):
    if spec == "synthetic":
        return validation_dataset(data_config(cfg), cfg.val_pairs)
    return DirectoryDataset(spec, cfg.image_size)


def write_report(path, values, counts):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "n"])
        for k, v in values.items():
            w.writerow([k, repr(float(v)), counts[k]])


@torch.no_grad()
def cmd_eval(args):
    cfg, deform, gen = load_models(args.checkpoint)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in wanted if m not in METRICS]
    if bad:
        raise AttnFlowError(f"unknown metrics {bad}; choose from {', '.join(METRICS)}")
    ds = _eval_dataset(args.data, cfg)
    means, counts = evaluate(deform, gen, ds, build_extractor(cfg), return_counts=True)
    values = {m: means[m] for m in wanted if m in means}
    for m in wanted:
        if m not in means:
            log.warning("metric %s unavailable for this model/data (no flow or no ground truth)", m)
    if args.report:
        write_report(args.report, values, {m: counts[m] for m in values})
    for m, v in values.items():
        print(f"{m},{v!r},{counts[m]}")
    return 0


@torch.no_grad()
def cmd_visualize(args):
    cfg, deform, gen = load_models(args.checkpoint)
    out_dir = Path(args.out_dir)
    if args.pair.startswith("synthetic:"):
        pair = generate_sprite_pair(int(args.pair.split(":", 1)[1]), cfg.image_size)
    else:
        pair = DirectoryDataset(Path(args.pair).parent, cfg.image_size)
        pair = pair[pair.pairs.index(Path(args.pair))]
    batch = collate([pair])
    defs, out = run_generator(deform, gen, batch)
    written = visualize(out.image, out_dir, "synthesized")
    written += visualize(batch["x_r"], out_dir, "reference")
    written += visualize(batch["x_t"], out_dir, "target")
    if defs is not None:
        written += visualize(defs, out_dir)
    for p in written:
        print(p)
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    base_out = Path(cfg.out_dir)
    cfg = cfg.replace(variant=args.variant, out_dir=str(base_out / args.variant))
    trainer = Trainer(cfg)
    trainer.run("all")
    means, counts = evaluate(*trainer.eval_models(), trainer.val_set, trainer.fx, return_counts=True)
    trainer.close()
    report = args.report or Path(cfg.out_dir) / "report.csv"
    write_report(report, means, counts)
    print(report)
    return 0


def cmd_export_pair(args):
    save_pair(generate_sprite_pair(args.seed, args.size), args.out_dir)
    print(args.out_dir)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="attnflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--config", help="key = value config file (defaults: desk preset)")
    t.add_argument("--stage", choices=("pretrain", "full", "all"), default="all")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    t.add_argument("--out-dir", help="override out_dir from the config")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="synthesize a target-pose image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--reference", required=True, help="reference PNG")
    i.add_argument("--ref-keypoints", required=True, help="reference keypoint JSON")
    i.add_argument("--target-keypoints", required=True, help="target keypoint JSON")
    i.add_argument("--out", required=True, help="output PNG")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="metrics over a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default="synthetic", help="pair directory, or 'synthetic' for the held-out set")
    e.add_argument("--metrics", default="ssim,epe", help=f"comma list from {','.join(METRICS)}")
    e.add_argument("--report", help="CSV report path (metric,value,n)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="render deformations for one pair")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--pair", required=True, help="pair directory, or synthetic:SEED")
    v.add_argument("--out-dir", required=True)
    v.set_defaults(func=cmd_visualize)

    a = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    a.add_argument("--variant", choices=VARIANTS, required=True)
    a.add_argument("--config")
    a.add_argument("--out-dir")
    a.add_argument("--report")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-pair", help="write a synthetic pair in the directory layout")
    x.add_argument("--seed", type=int, required=True)
    x.add_argument("--size", type=int, default=64)
    x.add_argument("--out-dir", required=True)
    x.set_defaults(func=cmd_export_pair)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (AttnFlowError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
