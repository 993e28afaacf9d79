"""Train the toy model end to end and compare against ablations.

Generates 40 train / 10 val sequences at 64 px, trains for a few hundred
steps and prints the evaluation table. Takes about five minutes per run on
one core. Pass a step count to shorten it: python demos/03_toy_training.py 20
"""
import sys
import tempfile
from pathlib import Path

from rgbd_vsod import data
from rgbd_vsod.config import RunConfig
from rgbd_vsod.training import AblationRow, format_ablation, run_variant

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
root = Path(tempfile.mkdtemp())
data.generate_suite(root / "train", 40, 8, 64, seed=7, prefix="train")
data.generate_suite(root / "val", 10, 8, 64, seed=1007, prefix="val")
base = RunConfig(steps=steps, seed=7, log_every=20, train_root=str(root / "train"), val_root=str(root / "val"))

# %% Main run: actual depth, memory with gated fusion.
trainer, main = run_variant(base, log=print)
print(main.table())

# %% Same budget with the depth replaced by a copy of the rgb frame.
_, copy = run_variant(base.replace(depth_mode="copy"))
print(format_ablation("pseudo-depth", [AblationRow("Pseudo (Copy)", "copy", copy.overall, float("nan")),
                                       AblationRow("Actual depth", "actual", main.overall, float("nan"))]))
