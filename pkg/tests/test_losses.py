import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import ref_aux, ref_bce, ref_sobel, ref_structure, ref_weights
from rgbd_vsod import functional as F
from rgbd_vsod.decoder import DecoderOutputs
from rgbd_vsod.losses import (aux_loss, aux_loss_terms, clip_loss, downsample_mask, sobel_edges, structure_loss,
                              structure_weights, total_loss)
from rgbd_vsod.moe_lora import GateStatistics
from rgbd_vsod.tensor import Tensor, precision

GT_4 = np.array([[0, 0, 1, 1], [0, 1, 1, 1], [0, 1, 1, 0], [0, 0, 0, 0]], dtype=np.float64)
LOGITS_4 = np.array([[-1.5, 0.2, 2.0, 0.7], [-0.3, 1.1, 3.0, -0.4], [0.5, 0.9, 1.7, -2.2], [-1.0, 0.0, -0.6, -3.0]])


def test_structure_loss_matches_scalar_reference():
    with precision(np.float64):
        got = float(structure_loss(Tensor(LOGITS_4[None, None]), GT_4[None, None]).data)
    assert abs(got - ref_structure(LOGITS_4, GT_4)) <= 1e-6


def test_structure_weights_reference_and_range(rng):
    np.testing.assert_allclose(structure_weights(GT_4[None, None])[0, 0], ref_weights(GT_4), atol=1e-12)
    gt = (rng.uniform(size=(2, 1, 20, 20)) > 0.5).astype(float)
    w = structure_weights(gt)
    assert w.min() >= 1 and w.max() <= 6


def test_uniform_background_reduces_to_plain_terms(rng):
    gt = np.zeros((1, 1, 6, 6))
    assert np.all(structure_weights(gt) == 1)
    logits = rng.normal(size=(1, 1, 6, 6))
    with precision(np.float64):
        got = float(structure_loss(Tensor(logits), gt).data)
    p = 1 / (1 + np.exp(-logits))
    plain = np.mean([ref_bce(x, 0.0) for x in logits.ravel()]) + 1 - 1 / (p.sum() + 1)
    assert abs(got - plain) < 1e-9


def test_structure_loss_perfect_fit_limit():
    with precision(np.float64):
        val = float(structure_loss(Tensor((GT_4 * 2 - 1)[None, None] * 40), GT_4[None, None]).data)
    assert 0 <= val < 1e-12


def test_structure_loss_errors():
    with pytest.raises(ValueError):
        structure_loss(Tensor(np.zeros((1, 1, 4, 4))), np.full((1, 1, 4, 4), 0.5))
    with pytest.raises(ValueError):
        structure_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))


def test_sobel_examples():
    assert np.all(sobel_edges(np.ones((5, 5))) == 0)
    half = np.zeros((4, 4))
    half[:, :2] = 1
    edges = sobel_edges(half)
    np.testing.assert_array_equal(edges, ref_sobel(half))
    np.testing.assert_array_equal(edges, np.array([[0, 1, 1, 0]] * 4))


@given(arrays(np.float64, (6, 6), elements=st.sampled_from([0.0, 1.0])))
def test_sobel_properties(gt):
    edges = sobel_edges(gt)
    np.testing.assert_array_equal(edges, ref_sobel(gt))
    np.testing.assert_array_equal(edges, sobel_edges(1 - gt))
    # edges only where the 3x3 neighbourhood is not constant
    pad = np.pad(gt, 1, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(pad, (3, 3))
    varying = windows.max(axis=(-2, -1)) != windows.min(axis=(-2, -1))
    assert np.all(edges[~varying] == 0)


def test_downsample_mask():
    gt = np.zeros((4, 4))
    gt[:2, :2] = 1
    gt[2, 2] = 1
    np.testing.assert_array_equal(downsample_mask(gt, (2, 2)), [[1, 0], [0, 0]])
    with pytest.raises(ValueError):
        downsample_mask(gt, (3, 3))


def handcrafted_decoder(rng):
    coarse = [rng.normal(size=(s, s)) for s in (4, 2, 1)]
    edges = [rng.normal(size=(s, s)) for s in (4, 2, 1)]
    dec = DecoderOutputs([], [Tensor(c[None, None]) for c in coarse], [Tensor(e[None, None]) for e in edges])
    return dec, coarse, edges


def test_aux_loss_matches_scalar_reference(rng):
    with precision(np.float64):
        dec, coarse, edges = handcrafted_decoder(rng)
        got = float(aux_loss(dec, GT_4[None, None]).data)
        terms = aux_loss_terms(dec, GT_4[None, None])
    assert abs(got - ref_aux(coarse, edges, GT_4)) <= 1e-6
    assert len(terms.terms) == 6
    assert abs(sum(float(t.data) for t in terms.terms) - got) <= 1e-6
    assert all(float(t.data) >= 0 for t in terms.terms)


def test_aux_loss_perfect_limit():
    gt = np.zeros((1, 1, 8, 8))
    gt[..., 2:6, 2:6] = 1
    coarse, edges = [], []
    for s in (8, 4, 2):
        gi = downsample_mask(gt, (s, s))
        coarse.append(Tensor((gi * 2 - 1) * 40))
        edges.append(Tensor((sobel_edges(gi) * 2 - 1) * 40))
    with precision(np.float64):
        assert float(aux_loss(DecoderOutputs([], coarse, edges), gt).data) < 1e-12


def test_total_loss_breakdown(rng):
    with precision(np.float64):
        dec, _, _ = handcrafted_decoder(rng)
        gt = GT_4[None, None]
        stats = GateStatistics.from_values([1.0, 3.0], [2.0, 2.0])
        out = total_loss(Tensor(LOGITS_4[None, None]), dec, gt, stats, 1e-2)
        vals = out.values()
    assert abs(vals["L_total"] - vals["L_pred"] - vals["L_aux"] - vals["L_moe"]) <= 1e-6
    assert abs(vals["L_moe"] - 2.5e-3) < 1e-12
    assert abs(vals["L_aux"] - sum(float(t.data) for t in out.aux_coarse + out.aux_edge)) <= 1e-6


def test_total_loss_isolates_aux_residual(rng):
    with precision(np.float64):
        dec, _, _ = handcrafted_decoder(rng)
        gt = GT_4[None, None]
        balanced = GateStatistics.from_values([2.0, 2.0], [2.0, 2.0])
        out = total_loss(Tensor((gt * 2 - 1) * 40), dec, gt, balanced)
    assert float(out.pred.data) < 1e-12 and float(out.moe.data) == 0
    assert abs(float(out.total.data) - float(out.aux.data)) < 1e-12


def test_clip_loss_averages_frames(rng):
    from rgbd_vsod.model import PredictionBundle
    with precision(np.float64):
        bundles, frames = [], []
        for _ in range(3):
            dec, _, _ = handcrafted_decoder(rng)
            bundles.append(PredictionBundle(Tensor(rng.normal(size=(1, 1, 4, 4))), dec))
            frames.append(GT_4[None])
        gt = np.stack(frames)[None]
        out = clip_loss(bundles, gt, None)
        per = [total_loss(b.logits, b.decoder, gt[:, i], None) for i, b in enumerate(bundles)]
    assert abs(float(out.total.data) - np.mean([float(p.total.data) for p in per])) < 1e-9
    assert float(out.moe.data) == 0
