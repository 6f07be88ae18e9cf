import numpy as np
import pytest
import torch

from remerec.encoders import FusedFeatures
from remerec.model import ReMeREC, predict, predict_batch
from remerec.query_engine import BoxHead, QueryBuilder, QueryDecoder, build_queries, decode_queries, regress_boxes

from conftest import fd_max_rel_error, tiny_config


def _masks(spans, length):
    m = torch.zeros(1, len(spans), length, dtype=torch.bool)
    for i, (s, e) in enumerate(spans):
        m[0, i, s : e + 1] = True
    return m


def test_single_token_mask_selects_that_token():
    cfg = tiny_config()
    qb = QueryBuilder(cfg)
    text = torch.randn(1, 6, cfg.hidden)
    ctx = qb.context(text, _masks([(3, 3), (0, 0)], 6))
    torch.testing.assert_close(ctx[0, 0], text[0, 3], rtol=0, atol=0)
    torch.testing.assert_close(ctx[0, 1], text[0, 0], rtol=0, atol=0)
    assert build_queries(qb, text, _masks([(3, 3), (0, 0)], 6), torch.randn(1, 2, cfg.hidden)).shape == (1, 2, cfg.hidden)


def test_outside_mask_is_ignored():
    cfg = tiny_config()
    qb = QueryBuilder(cfg)
    text = torch.randn(1, 7, cfg.hidden)
    masks = _masks([(1, 3)], 7)
    q = torch.randn(1, 1, cfg.hidden)
    zeroed = text * masks[0, 0][None, :, None]
    torch.testing.assert_close(qb(text, masks, q), qb(zeroed, masks, q), rtol=0, atol=0)


def test_empty_mask_rejected():
    cfg = tiny_config()
    qb = QueryBuilder(cfg)
    with pytest.raises(ValueError):
        qb(torch.randn(1, 4, cfg.hidden), torch.zeros(1, 1, 4, dtype=torch.bool), torch.randn(1, 1, cfg.hidden))


def test_decoder_shape_and_single_query():
    cfg = tiny_config()
    dec = QueryDecoder(cfg).eval()
    fused = FusedFeatures(torch.randn(2, 16, cfg.hidden), torch.randn(2, 5, cfg.hidden))
    assert decode_queries(dec, torch.randn(2, 3, cfg.hidden), fused).shape == (2, 3, cfg.hidden)
    # one query: self-attention weight is exactly 1
    _, w = dec.graph_attn(*(torch.randn(1, 1, cfg.hidden),) * 3, return_weights=True)
    assert torch.all(w == 1)


def test_cross_attention_constant_values():
    cfg = tiny_config()
    dec = QueryDecoder(cfg).eval()
    token = torch.randn(cfg.hidden)
    fused = FusedFeatures(torch.randn(1, 4, cfg.hidden), token.expand(1, 3, cfg.hidden).clone())
    vis_pad = torch.ones(1, 4, dtype=torch.bool)
    out_a = dec(torch.randn(1, 2, cfg.hidden), fused, visual_pad=vis_pad)
    # the cross-attention output is the same for any query, so it equals the projected value
    memory = torch.cat([fused.visual_tokens, fused.text_tokens], 1)
    pad = torch.cat([vis_pad, torch.zeros(1, 3, dtype=torch.bool)], 1)
    a = dec.cross_attn(torch.randn(1, 2, cfg.hidden), memory, memory, pad)
    b = dec.cross_attn(torch.randn(1, 2, cfg.hidden), memory, memory, pad)
    torch.testing.assert_close(a, b)
    torch.testing.assert_close(a[0, 0], a[0, 1])
    assert torch.isfinite(out_a).all()


def test_box_head_range_and_zero_layer():
    cfg = tiny_config()
    head = BoxHead(cfg)
    out = regress_boxes(head, torch.randn(5, 3, cfg.hidden))
    assert ((out > 0) & (out < 1)).all()
    # huge activations saturate in float32 but never leave the unit interval
    out = head(torch.randn(5, 3, cfg.hidden) * 1e4)
    assert ((out >= 0) & (out <= 1)).all()
    torch.nn.init.zeros_(head.fc3.weight)
    torch.nn.init.zeros_(head.fc3.bias)
    assert torch.all(head(torch.randn(2, cfg.hidden)) == 0.5)


@pytest.mark.parametrize("which", ["builder", "decoder", "head"])
def test_query_engine_gradients(which):
    torch.manual_seed(0)
    cfg = tiny_config()
    d = cfg.hidden
    if which == "builder":
        mod = QueryBuilder(cfg).double()
        text = torch.randn(1, 6, d, dtype=torch.float64)
        masks = _masks([(0, 2), (4, 5)], 6)
        q = torch.randn(1, 2, d, dtype=torch.float64)
        r = torch.randn(1, 2, d, dtype=torch.float64)
        fn = lambda: (mod(text, masks, q) * r).sum()
    elif which == "decoder":
        mod = QueryDecoder(cfg).double().eval()
        fused = FusedFeatures(torch.randn(2, 16, d, dtype=torch.float64), torch.randn(2, 5, d, dtype=torch.float64))
        q = torch.randn(2, 3, d, dtype=torch.float64)
        r = torch.randn(2, 3, d, dtype=torch.float64)
        text_pad = torch.tensor([[False] * 5, [False] * 3 + [True] * 2])
        fn = lambda: (mod(q, fused, text_pad) * r).sum()
    else:
        mod = BoxHead(cfg).double()
        x = torch.randn(4, d, dtype=torch.float64)
        fn = lambda: (mod(x) * torch.tensor([1.0, -1.0, 2.0, 0.5], dtype=torch.float64)).sum()
    assert sum(p.numel() for p in mod.parameters()) <= 5000
    assert fd_max_rel_error(fn, mod.parameters()) <= 1e-3


def _pipeline_config(**kw):
    return tiny_config(image_size=64, patch_size=16, **kw)


def test_predict_is_deterministic(synth_samples):
    torch.manual_seed(0)
    model = ReMeREC(_pipeline_config())
    a = predict(synth_samples[0], model)
    b = predict(synth_samples[0], model)
    assert np.array_equal(a.boxes, b.boxes)
    assert a.relations == b.relations and a.aligned_spans == b.aligned_spans
    assert 1 <= a.entity_count <= model.cfg.n_max


def test_pipeline_finite_over_random_draws(synth_samples):
    for draw in range(100):
        torch.manual_seed(draw)
        model = ReMeREC(_pipeline_config())
        for p in predict_batch(model, synth_samples[:2]):
            assert np.isfinite(p.boxes).all()
            assert ((p.boxes >= 0) & (p.boxes <= 1)).all()


@pytest.mark.parametrize("flags", [dict(use_tmp=False), dict(use_eir=False), dict(use_tmp=False, use_eir=False)])
def test_ablations_still_predict(synth_samples, flags):
    torch.manual_seed(0)
    model = ReMeREC(_pipeline_config(**flags))
    for p, s in zip(predict_batch(model, synth_samples[:4]), synth_samples[:4]):
        assert p.boxes.shape == (p.entity_count, 4)
        assert all(i != j and 0 <= i < p.entity_count and 0 <= j < p.entity_count for i, j in p.relations)
        out = p.to_json(64, 64)
        assert len(out["boxes"]) == len(out["spans"]) == p.entity_count
