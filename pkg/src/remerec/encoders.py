"""Text, image and fusion encoders plus the attention blocks they share."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, query, key, value, key_padding_mask=None, return_weights=False):
        """``key_padding_mask`` is True at keys that must receive no weight."""
        b, nq, d = query.shape
        nk = key.shape[1]
        h = self.heads
        q = self.q(query).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(key).view(b, nk, h, d // h).transpose(1, 2)
        v = self.v(value).view(b, nk, h, d // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_padding_mask is not None:
            # finite fill: masked keys get exactly zero weight, and a fully
            # masked row degrades to uniform instead of NaN
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], torch.finfo(logits.dtype).min)
        weights = torch.softmax(logits, dim=-1)
        out = (self.drop(weights) @ v).transpose(1, 2).reshape(b, nq, d)
        out = self.o(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class Residual(nn.Module):
    """Residual wrapper with pre- or post-layer-norm placement."""

    def __init__(self, dim: int, pre_norm: bool, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pre_norm = pre_norm
        self.drop = nn.Dropout(dropout)

    def forward(self, x, fn):
        if self.pre_norm:
            return x + self.drop(fn(self.norm(x)))
        return self.norm(x + self.drop(fn(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(d, d * cfg.ffn_mult, cfg.dropout)
        self.res1 = Residual(d, cfg.pre_norm, cfg.dropout)
        self.res2 = Residual(d, cfg.pre_norm, cfg.dropout)

    def forward(self, x, pad_mask=None):
        x = self.res1(x, lambda y: self.attn(y, y, y, pad_mask))
        return self.res2(x, self.ffn)


class DecoderLayer(nn.Module):
    """Self-attention over queries, cross-attention to a memory, feedforward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.self_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(d, d * cfg.ffn_mult, cfg.dropout)
        self.res1 = Residual(d, cfg.pre_norm, cfg.dropout)
        self.res2 = Residual(d, cfg.pre_norm, cfg.dropout)
        self.res3 = Residual(d, cfg.pre_norm, cfg.dropout)

    def forward(self, q, memory, query_pad=None, memory_pad=None):
        q = self.res1(q, lambda y: self.self_attn(y, y, y, query_pad))
        q = self.res2(q, lambda y: self.cross_attn(y, memory, memory, memory_pad))
        return self.res3(q, self.ffn)


def xavier_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class TextFeatures:
    features: torch.Tensor  # B x L x d
    valid_length: torch.Tensor  # B
    padding_mask: torch.Tensor  # B x L, True at padding


@dataclass
class FusedFeatures:
    visual_tokens: torch.Tensor  # B x P x d
    text_tokens: torch.Tensor  # B x L x d


def padding_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] >= lengths[:, None]


class TextEncoder(nn.Module):
    """Token embedding, learned positions and a small self-attention stack."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.pos = nn.Embedding(cfg.max_text_len, cfg.hidden)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(cfg.hidden) if cfg.pre_norm and cfg.text_layers else nn.Identity()
        self.drop = nn.Dropout(cfg.dropout)
        nn.init.normal_(self.embed.weight, std=1.0)
        nn.init.normal_(self.pos.weight, std=1.0)
        xavier_init(self.layers)

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor) -> TextFeatures:
        b, length = token_ids.shape
        if length > self.cfg.max_text_len:
            raise ValueError(f"text length {length} exceeds max_text_len {self.cfg.max_text_len}")
        pad = padding_mask(lengths, length)
        x = self.embed(token_ids) + self.pos.weight[:length][None]
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x, pad)
        x = self.norm(x) * (~pad)[..., None]
        return TextFeatures(x, lengths, pad)


class ImageEncoder(nn.Module):
    """Non-overlapping patch embedding with a learned 2-D position code."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        g = cfg.image_size // p
        self.proj = nn.Linear(cfg.channels * p * p, cfg.hidden, bias=cfg.patch_bias)
        self.row = nn.Parameter(torch.randn(g, cfg.hidden) * 0.5)
        self.col = nn.Parameter(torch.randn(g, cfg.hidden) * 0.5)
        xavier_init(self)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, c, h, w = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
        x = images.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def position_code(self, gh: int, gw: int) -> torch.Tensor:
        return (self.row[:gh, None, :] + self.col[None, :gw, :]).reshape(gh * gw, -1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_size
        gh, gw = images.shape[2] // p, images.shape[3] // p
        return self.proj(self.patchify(images)) + self.position_code(gh, gw)[None]


class FusionEncoder(nn.Module):
    """Joint self-attention over the concatenated visual and text streams."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.type_embed = nn.Parameter(torch.randn(2, cfg.hidden) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.fusion_layers))
        self.norm = nn.LayerNorm(cfg.hidden) if cfg.pre_norm and cfg.fusion_layers else nn.Identity()
        xavier_init(self.layers)

    def forward(self, visual: torch.Tensor, text: TextFeatures) -> FusedFeatures:
        if visual.shape[-1] != text.features.shape[-1]:
            raise ValueError("visual and text hidden sizes differ")
        p = visual.shape[1]
        x = torch.cat([visual + self.type_embed[0], text.features + self.type_embed[1]], dim=1)
        pad = torch.cat([torch.zeros_like(text.padding_mask[:, :1]).expand(-1, p), text.padding_mask], dim=1)
        for layer in self.layers:
            x = layer(x, pad)
        x = self.norm(x)
        return FusedFeatures(x[:, :p], x[:, p:])


def encode_text(encoder: TextEncoder, token_ids, lengths) -> TextFeatures:
    return encoder(torch.as_tensor(token_ids), torch.as_tensor(lengths))


def encode_image(encoder: ImageEncoder, images) -> torch.Tensor:
    return encoder(torch.as_tensor(images))


def fuse(fusion: FusionEncoder, visual, text: TextFeatures) -> FusedFeatures:
    return fusion(visual, text)
