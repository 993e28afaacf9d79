import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rgbd_vsod import functional as F
from rgbd_vsod.encoder import AttentionBlock
from rgbd_vsod.gradcheck import finite_difference_check
from rgbd_vsod.moe_lora import (DEPTH, FUSION, RGB, ExpertGroup, GateStatistics, LoraMoeLayer, cv_squared,
                                inject_into_attention, load_balance_loss, lora_forward, moe_lora_forward,
                                smooth_load, top_k_mask, top_k_weights)
from rgbd_vsod.tensor import Tensor, precision


def make_layer(rng, d=16, k=16, rank=4, top_k=2, mode="moe"):
    w0 = Tensor(rng.normal(0, 0.3, size=(d, k)))
    b0 = Tensor(rng.normal(0, 0.1, size=(d, 1)))
    return LoraMoeLayer(w0, b0, rank, top_k, rng, mode=mode)


def zero_experts(layer):
    for g in layer.groups.values():
        for ex in g.experts:
            for p in ex.parameters():
                p.data[...] = 0


def test_zero_b_gives_frozen_output(rng):
    layer = make_layer(rng)
    x = Tensor(rng.normal(size=(2, 16, 16)))
    expected = np.matmul(layer.W0.data, x.data) + layer.b0.data
    assert np.array_equal(lora_forward(layer, x).data, expected)
    assert np.array_equal(moe_lora_forward(layer, x, RGB, (4, 4)).data, expected)


def test_lora_hand_algebra():
    # d = k = 2, r limited by min(d,k)/4 in the layer, so check the algebra directly
    w0 = Tensor(np.eye(8))
    layer = LoraMoeLayer(w0, None, 2, 2, np.random.default_rng(0), mode="lora")
    layer.A.data[...] = np.eye(2, 8)
    layer.B.data[...] = np.eye(8, 2)
    x = Tensor(np.eye(8)[:, :1])
    out = lora_forward(layer, x).data[:, 0]
    np.testing.assert_array_equal(out, 2 * np.eye(8)[0])


def test_rank_limit_and_dim_errors(rng):
    with pytest.raises(ValueError):
        LoraMoeLayer(Tensor(np.zeros((8, 8))), None, 3, 2, rng)
    layer = make_layer(rng)
    with pytest.raises(ValueError):
        lora_forward(layer, Tensor(np.zeros((1, 12, 4))))
    with pytest.raises(ValueError):
        moe_lora_forward(layer, Tensor(np.zeros((1, 16, 15))), RGB, (4, 4))
    with pytest.raises(ValueError):
        moe_lora_forward(layer, Tensor(np.zeros((1, 16, 4))), RGB, (1, 4))


def test_lora_gradients(rng):
    with precision(np.float64):
        layer = make_layer(rng, mode="lora")
        layer.B.data[...] = rng.normal(size=layer.B.shape)
        x = Tensor(rng.normal(size=(2, 16, 6)))
        d = Tensor(rng.normal(size=(2, 16, 6)))
        assert finite_difference_check(lambda: F.sum(lora_forward(layer, x) * d), [layer.A, layer.B]) < 1e-4


def test_zero_experts_reduce_to_lora(rng):
    layer = make_layer(rng)
    layer.B.data[...] = rng.normal(size=layer.B.shape)
    zero_experts(layer)
    x = Tensor(rng.normal(size=(2, 16, 16)))
    np.testing.assert_allclose(moe_lora_forward(layer, x, DEPTH, (4, 4)).data, lora_forward(layer, x).data,
                               atol=1e-6)


def test_gate_arithmetic_hand_oracle():
    with precision(np.float64):
        w, mask = top_k_weights(Tensor([[0.0, np.log(2), np.log(4)]]), 2)
    assert mask.tolist() == [[False, True, True]]
    np.testing.assert_allclose(w.data[0], [0.0, 1 / 3, 2 / 3], atol=1e-12)


def test_top_k_ties_go_to_lowest_index():
    assert top_k_mask(np.zeros((1, 3)), 2).tolist() == [[True, True, False]]
    assert top_k_mask(np.array([[1.0, 2.0, 2.0]]), 1).tolist() == [[False, True, False]]


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.just(3)), elements=st.floats(-20, 20)),
       st.integers(1, 3))
def test_gate_sparsity(logits, k):
    w, mask = top_k_weights(Tensor(logits, dtype=np.float64), k)
    assert np.all((w.data > 0).sum(axis=1) <= k)
    assert np.all(mask.sum(axis=1) == k)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w.data[~mask] == 0)


def test_routing_counters(rng):
    layer = make_layer(rng)
    x = Tensor(rng.normal(size=(1, 16, 16)))
    moe_lora_forward(layer, x, RGB, (4, 4))
    assert layer.groups[DEPTH].calls == 0
    assert layer.groups[RGB].calls == 1 and layer.groups[FUSION].calls == 1
    moe_lora_forward(layer, x, DEPTH, (4, 4))
    assert layer.groups[RGB].calls == 1 and layer.groups[DEPTH].calls == 1 and layer.groups[FUSION].calls == 2
    with pytest.raises(ValueError):
        moe_lora_forward(layer, x, "fused", (4, 4))


def test_fusion_group_is_shared_between_modalities(rng):
    layer = make_layer(rng)
    layer.B.data[...] = rng.normal(size=layer.B.shape)
    x = Tensor(rng.normal(size=(1, 16, 16)))
    before = {m: moe_lora_forward(layer, x, m, (4, 4)).data.copy() for m in (RGB, DEPTH)}
    for ex in layer.groups[FUSION].experts:
        for p in ex.parameters():
            p.data += 0.5
    for m in (RGB, DEPTH):
        assert not np.allclose(moe_lora_forward(layer, x, m, (4, 4)).data, before[m])


def test_moe_layer_gradients(rng):
    with precision(np.float64):
        layer = make_layer(rng)
        layer.B.data[...] = rng.normal(size=layer.B.shape)
        x = Tensor(rng.normal(size=(2, 16, 16)))
        d = Tensor(rng.normal(size=(2, 16, 16)))
        err = finite_difference_check(lambda: F.sum(moe_lora_forward(layer, x, RGB, (4, 4)) * d),
                                      [x] + layer.adapter_parameters())
    assert err < 1e-4
    assert layer.W0.grad is None


def test_load_balance_examples():
    with precision(np.float64):
        assert load_balance_loss(GateStatistics.from_values([5.0, 5, 5], [5.0, 5, 5])).data == 0.0
        assert float(load_balance_loss(GateStatistics.from_values([2.0, 0, 0], [1.0, 1, 1])).data) > 0
        val = float(load_balance_loss(GateStatistics.from_values([1.0, 3.0], [2.0, 2.0]), 1e-2).data)
    assert abs(val - 2.5e-3) <= 1e-9


def test_load_balance_empty_errors():
    with pytest.raises(ValueError):
        load_balance_loss(GateStatistics())
    with pytest.raises(ValueError):
        cv_squared(Tensor([0.0, 0.0]))


@given(arrays(np.float64, 3, elements=st.floats(0.1, 10)), st.floats(0.01, 100))
def test_balance_loss_scale_invariant(imp, c):
    with precision(np.float64):
        a = float(load_balance_loss(GateStatistics.from_values(imp, [1.0, 2, 3])).data)
        b = float(load_balance_loss(GateStatistics.from_values(imp * c, [1.0, 2, 3])).data)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_smooth_load_tracks_hard_counts(rng):
    with precision(np.float64):
        logits = Tensor(rng.normal(size=(6, 3)) * 10)
        soft = smooth_load(logits, 2).data
    hard = top_k_mask(logits.data, 2).sum(axis=0)
    np.testing.assert_allclose(soft, hard, atol=0.5)
    np.testing.assert_allclose(soft.sum(), 12.0, atol=0.5)


def test_group_statistics_nonnegative(rng):
    group = ExpertGroup(4, 2, rng)
    stats = GateStatistics()
    group(Tensor(rng.normal(size=(3, 4, 4, 4))), stats, key="g")
    rec = stats.records["g"]
    assert np.all(rec.importance.data >= 0) and np.all(rec.load.data >= 0)
    assert rec.hard_load.sum() == 3 * 2
    merged = stats.merge(stats)
    assert merged.records["g"].hard_load.sum() == 12


def test_injected_block_equivalence_and_counts(rng):
    with precision(np.float64):
        block = AttentionBlock(16, 2, 2, rng)
        block.freeze()
        x = Tensor(rng.normal(size=(2, 16, 16)))
        before = block(x, (4, 4), RGB).data
        inject_into_attention(block, lambda w, b, attr: LoraMoeLayer(w, b, 4, 2, rng))
        after = block(x, (4, 4), RGB).data
    assert np.max(np.abs(after - before)) < 1e-12
    trainable = [p for p in block.parameters() if p.requires_grad]
    enumerated = sum(p.data.size for p in trainable)
    closed_form = block.q_proj.count_adapter_parameters() + block.v_proj.count_adapter_parameters()
    assert enumerated == closed_form
    adapter_ids = {id(p) for layer in (block.q_proj, block.v_proj) for p in layer.adapter_parameters()}
    assert {id(p) for p in trainable} == adapter_ids
    assert not block.k_proj.weight.requires_grad and not isinstance(block.k_proj, LoraMoeLayer)
