# A complete, deliberately tiny training run.
#
# The desk preset (64 px, 500 + 2000 steps) takes about an hour on one CPU;
# this demo shrinks everything so the whole pipeline finishes in about a minute.
# The same steps from a shell:
#
#   attnflow train --config tiny.txt --out-dir runs/tiny
#   attnflow eval --checkpoint runs/tiny/last.ckpt --metrics ssim,epe,epe_zero --report report.csv
#   attnflow visualize --checkpoint runs/tiny/last.ckpt --pair synthetic:5 --out-dir maps

import sys
from pathlib import Path

from attnflow.cli import main
from attnflow.config import TrainConfig
from attnflow.train import Trainer

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "training"

cfg = TrainConfig(image_size=32, scales=(8, 16), key_channels=(8, 8), enc_width=8, flow_width=8,
                  mask_width=8, gen_width=16, disc_width=8, batch_size=4, num_samples=64, val_pairs=16,
                  pretrain_steps=40, full_steps=40, validate_every=20, out_dir=str(out / "run"))

# configs are plain `key = value` text
out.mkdir(parents=True, exist_ok=True)
(out / "tiny.txt").write_text(cfg.to_text())

trainer = Trainer(cfg)
before = trainer.validate()
trainer.run()
after = trainer.validate()
trainer.close()

# the two-stage schedule: deformation pretraining, then everything jointly
for stage in ("pretrain", "full"):
    names = sorted({name for _, name, _ in trainer.history if name.startswith(stage + "/")})
    print(stage, "components:", ", ".join(n.split("/")[1] for n in names))

print("%-10s %8s %8s" % ("metric", "init", "trained"))
for key in ("perc", "ssim", "epe", "epe_zero"):
    print("%-10s %8.3f %8.3f" % (key, before[key], after[key]))

# losses.tsv: step, component, value (already multiplied by its weight)
print((out / "run" / "losses.tsv").read_text().splitlines()[0])

# the command-line front end works on the saved checkpoint
ckpt = str(out / "run" / "last.ckpt")
main(["eval", "--checkpoint", ckpt, "--metrics", "ssim,epe,epe_zero", "--report", str(out / "report.csv")])
main(["visualize", "--checkpoint", ckpt, "--pair", "synthetic:5", "--out-dir", str(out / "maps")])
