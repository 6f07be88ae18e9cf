import numpy as np
import pytest
import torch

from remerec.config import ModelConfig
from remerec.encoders import FusionEncoder, ImageEncoder, TextEncoder, TextFeatures, padding_mask

from conftest import fd_max_rel_error, tiny_config


def _ids(cfg, lengths, seq_len, seed=0):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(2, cfg.vocab_size, (len(lengths), seq_len), generator=g)
    for i, n in enumerate(lengths):
        ids[i, n:] = 0
    return ids, torch.tensor(lengths)


def test_text_shapes():
    cfg = tiny_config()
    enc = TextEncoder(cfg).eval()
    ids, lengths = _ids(cfg, [5, 3], 7)
    out = enc(ids, lengths)
    assert out.features.shape == (2, 7, cfg.hidden)
    assert out.padding_mask[1].tolist() == [False] * 3 + [True] * 4
    assert torch.all(out.features[1, 3:] == 0)


def test_text_padding_content_is_irrelevant():
    cfg = tiny_config()
    enc = TextEncoder(cfg).eval()
    ids, lengths = _ids(cfg, [4], 9)
    other = ids.clone()
    other[0, 4:] = torch.tensor([5, 3, 7, 2, 6])
    a = enc(ids, lengths).features[0, :4]
    b = enc(other, lengths).features[0, :4]
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_text_too_long():
    cfg = tiny_config(max_text_len=6)
    enc = TextEncoder(cfg)
    ids, lengths = _ids(cfg, [7], 7)
    with pytest.raises(ValueError):
        enc(ids, lengths)


def test_image_shapes_and_divisibility():
    cfg = ModelConfig(hidden=16, heads=2)
    enc = ImageEncoder(cfg)
    assert enc(torch.rand(2, 3, 64, 64)).shape == (2, 64, 16)
    with pytest.raises(ValueError):
        enc.patchify(torch.rand(1, 3, 60, 64))


def test_zero_image_zero_projection():
    cfg = tiny_config(patch_bias=False)
    enc = ImageEncoder(cfg)
    torch.nn.init.zeros_(enc.proj.weight)
    out = enc(torch.zeros(1, 3, 16, 16))
    g = cfg.image_size // cfg.patch_size
    torch.testing.assert_close(out[0], enc.position_code(g, g))
    assert torch.all(enc.proj(enc.patchify(torch.zeros(1, 3, 16, 16))) == 0)


def _text(cfg, lengths, seq_len, seed=1):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(len(lengths), seq_len, cfg.hidden, generator=g)
    lengths = torch.tensor(lengths)
    pad = padding_mask(lengths, seq_len)
    return TextFeatures(feats * (~pad)[..., None], lengths, pad)


def test_fusion_shapes_and_mismatch():
    cfg = tiny_config()
    fusion = FusionEncoder(cfg).eval()
    text = _text(cfg, [3, 5], 5)
    out = fusion(torch.randn(2, 16, cfg.hidden), text)
    assert out.visual_tokens.shape == (2, 16, cfg.hidden)
    assert out.text_tokens.shape == (2, 5, cfg.hidden)
    with pytest.raises(ValueError):
        fusion(torch.randn(2, 16, cfg.hidden + 1), text)


def test_fusion_padded_text_gets_no_attention():
    cfg = tiny_config()
    fusion = FusionEncoder(cfg).eval()
    text = _text(cfg, [3], 6)
    x = torch.randn(1, 10, cfg.hidden)
    pad = torch.cat([torch.zeros(1, 4, dtype=torch.bool), text.padding_mask], dim=1)
    _, w = fusion.layers[0].attn(x, x, x, pad, return_weights=True)
    assert torch.all(w[..., 7:] == 0)
    # and changing padded features leaves the valid outputs untouched
    v = torch.randn(1, 4, cfg.hidden)
    a = fusion(v, text)
    noisy = TextFeatures(text.features + text.padding_mask[..., None] * 5.0, text.valid_length, text.padding_mask)
    b = fusion(v, noisy)
    torch.testing.assert_close(a.visual_tokens, b.visual_tokens, rtol=0, atol=0)
    torch.testing.assert_close(a.text_tokens[:, :3], b.text_tokens[:, :3], rtol=0, atol=0)


def test_fusion_zero_layers_is_type_embedding():
    cfg = tiny_config(fusion_layers=0)
    fusion = FusionEncoder(cfg)
    text = _text(cfg, [4], 4)
    v = torch.randn(1, 16, cfg.hidden)
    out = fusion(v, text)
    torch.testing.assert_close(out.visual_tokens, v + fusion.type_embed[0])
    torch.testing.assert_close(out.text_tokens, text.features + fusion.type_embed[1])


def test_encoders_finite_over_random_draws():
    rng = np.random.default_rng(0)
    cfg = tiny_config(hidden=4, heads=1, dropout=0.0, max_text_len=8, image_size=8, patch_size=4)
    for draw in range(1000):
        torch.manual_seed(draw)
        text_enc, img_enc, fusion = TextEncoder(cfg).eval(), ImageEncoder(cfg).eval(), FusionEncoder(cfg).eval()
        n = int(rng.integers(1, 9))
        ids = torch.from_numpy(rng.integers(0, cfg.vocab_size, (1, 8)))
        img = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)) * 3).float()
        with torch.no_grad():
            t = text_enc(ids, torch.tensor([n]))
            f = fusion(img_enc(img), t)
        assert torch.isfinite(f.visual_tokens).all() and torch.isfinite(f.text_tokens).all()


def test_xavier_variance_band():
    torch.manual_seed(0)
    cfg = ModelConfig(hidden=64)
    fusion = FusionEncoder(cfg)
    for m in fusion.modules():
        if isinstance(m, torch.nn.Linear):
            x = torch.randn(4096, m.in_features)
            with torch.no_grad():
                y = m(x)
            ratio = float(y.var() / x.var())
            assert 1 / 3 <= ratio <= 3, ratio


def test_eval_passes_bit_identical():
    cfg = tiny_config(dropout=0.3)
    enc = TextEncoder(cfg).eval()
    ids, lengths = _ids(cfg, [5], 6)
    assert torch.equal(enc(ids, lengths).features, enc(ids, lengths).features)


@pytest.mark.parametrize("which", ["text", "image", "fusion"])
def test_encoder_gradients(which):
    torch.manual_seed(0)
    cfg = tiny_config()
    if which == "text":
        mod = TextEncoder(cfg).double().eval()
        ids, lengths = _ids(cfg, [5, 3], 6)
        r = torch.randn(2, 6, cfg.hidden, dtype=torch.float64)
        fn = lambda: (mod(ids, lengths).features * r).sum()
    elif which == "image":
        mod = ImageEncoder(cfg).double().eval()
        img = torch.rand(2, 3, 16, 16, dtype=torch.float64)
        fn = lambda: torch.tanh(mod(img)).sum()
    else:
        mod = FusionEncoder(cfg).double().eval()
        text = _text(cfg, [3, 4], 4)
        text = TextFeatures(text.features.double(), text.valid_length, text.padding_mask)
        v = torch.randn(2, 16, cfg.hidden, dtype=torch.float64)
        rv = torch.randn(2, 16, cfg.hidden, dtype=torch.float64)
        rt = torch.randn(2, 4, cfg.hidden, dtype=torch.float64)

        def fn():
            out = mod(v, text)
            return (out.visual_tokens * rv).sum() + (out.text_tokens * rt).sum()
    assert sum(p.numel() for p in mod.parameters()) <= 5000
    assert fd_max_rel_error(fn, mod.parameters()) <= 1e-3
