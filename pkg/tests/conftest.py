import numpy as np
import pytest
import torch

from remerec.config import ModelConfig
from remerec.data import generate_synthetic, synthetic_vocab


def tiny_config(**overrides) -> ModelConfig:
    """A configuration small enough for finite-difference checks."""
    base = dict(
        vocab_size=len(synthetic_vocab()),
        hidden=8,
        heads=2,
        ffn_mult=2,
        text_layers=1,
        fusion_layers=1,
        tmp_layers=1,
        dropout=0.0,
        max_text_len=16,
        image_size=16,
        patch_size=4,
        n_max=3,
        k_max=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def fd_max_rel_error(fn, params, eps=1e-4, floor=1e-6):
    """Largest elementwise relative error between autograd and central
    differences of the scalar ``fn()`` with respect to ``params``."""
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            if a is None:
                a = torch.zeros_like(p)
            flat = p.view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = fn().item()
                flat[i] = old - eps
                down = fn().item()
                flat[i] = old
                numeric[i] = (up - down) / (2 * eps)
            a = a.reshape(-1)
            denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.tensor(floor, dtype=a.dtype))
            worst = max(worst, float(((a - numeric).abs() / denom).max()))
    return worst


@pytest.fixture(scope="session")
def synth_pairs():
    return generate_synthetic(seed=3, n=24, max_entities=3)


@pytest.fixture(scope="session")
def synth_samples(synth_pairs):
    return [s for _, s in synth_pairs]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
