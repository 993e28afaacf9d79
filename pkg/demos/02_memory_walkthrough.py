"""Follow the temporal memory bank through a short synthetic clip.

Frame 0 has no prompt: its own coarse mask seeds a pseudo entry, which ages
out of the FIFO like any other entry.

Run: python demos/02_memory_walkthrough.py
"""
import tempfile

import numpy as np

from rgbd_vsod import data
from rgbd_vsod.config import RunConfig
from rgbd_vsod.model import process_clip
from rgbd_vsod.tensor import no_grad
from rgbd_vsod.training import audit_parameters, build_model

root = tempfile.mkdtemp()
data.generate_sequence(data.SceneSpec(), root, "demo", 6, 64, seed=0)
clip = data.load_clip(root, "demo", 0, 6)

cfg = RunConfig(clip_len=4)
model = build_model(cfg)
print(audit_parameters(model).summary())

# %% One pass over the clip; record what the bank holds after each write.
with no_grad():
    bundles = process_clip(model, clip)
for t, b in enumerate(bundles):
    attn = b.attention.data
    print(f"frame {t}: bank {b.bank_tags}, attention rows sum to {attn.sum(-1).mean():.6f}, "
          f"P mean {b.P.data.mean():.3f}")
print("evicted:", model.last_bank.evicted)

# %% An untrained model still produces bounded masks on every frame.
stack = np.stack([b.P.data[0, 0] for b in bundles])
print("P range", stack.min().round(3), stack.max().round(3))
