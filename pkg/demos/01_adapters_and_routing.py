"""Walk through the mixture-of-LoRA-experts adapter on a tiny encoder.

Run: python demos/01_adapters_and_routing.py
"""
import numpy as np

from rgbd_vsod.encoder import Encoder, EncoderConfig, encode_modality
from rgbd_vsod.moe_lora import DEPTH, RGB, GateStatistics, load_balance_loss, top_k_weights
from rgbd_vsod.tensor import Tensor, no_grad, precision

rng = np.random.default_rng(0)

# %% Top-k gating: the largest two logits keep their renormalized softmax mass.
w, mask = top_k_weights(Tensor([[0.0, np.log(2.0), np.log(4.0)]], dtype=np.float64), 2)
print("gate weights", np.round(w.data[0], 4), "selected", mask[0])

# %% Build a small encoder; only adapters and gates are trainable.
enc = Encoder(EncoderConfig(widths=(8, 16, 24, 32), heads=(1, 2, 2, 2), rank=2, depths=(1, 1, 1, 1)), rng)
n_adapters = len(enc.adapters())
print(f"{n_adapters} adapted projections:", [a.name for a in enc.adapters()][:4], "...")

# %% Freshly initialised adapters are exact no-ops (B = 0, experts start at zero).
img = Tensor(rng.uniform(size=(1, 3, 64, 64)))
with no_grad():
    a = encode_modality(enc, img, RGB)
    b = encode_modality(enc, img, RGB, bypass_adapters=True)
print("max diff vs frozen trunk:", max(np.abs(x.data - y.data).max() for x, y in zip(a.levels, b.levels)))

# %% Routing: rgb tokens only ever reach rgb experts, depth tokens only depth experts.
# (the counters also include the adapted rgb pass above)
stats = GateStatistics()
with no_grad():
    enc(img, RGB, stats)
    enc(img, RGB, stats)
    enc(img, DEPTH, stats)
layer = enc.adapters()[0]
print("group calls:", {g: grp.calls for g, grp in layer.groups.items()})

# %% The balance penalty is zero for uniform usage and grows with skew.
with precision(np.float64):
    for imp, load in (([4.0, 4, 4], [2.0, 2, 2]), ([1.0, 3.0], [2.0, 2.0])):
        print(imp, load, "->", float(load_balance_loss(GateStatistics.from_values(imp, load), 1e-2).data))
print("penalty on the recorded routing:", float(load_balance_loss(stats, 1e-2).data))
