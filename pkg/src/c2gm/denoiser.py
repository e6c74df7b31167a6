"""Conditional U-Net noise predictor."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Attention, Conv2d, GroupNorm, Linear, Module, Tensor, as_tensor, concat, require
from .numerics import functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 12
    cascade_channels: int = 8
    base_channels: int = 32
    channel_multipliers: tuple[int, int, int] = (1, 2, 4)
    blocks_per_tier: int = 1
    attention_tiers: frozenset = field(default_factory=lambda: frozenset({1, 2}))
    embedding_dim: int = 128
    heads: int = 4
    mid_self_attention: bool = True

    def __post_init__(self):
        require(len(self.channel_multipliers) == 3, "denoiser has exactly three resolution tiers")
        require(self.blocks_per_tier >= 1, "blocks_per_tier must be >= 1")
        require(all(0 <= t < 3 for t in self.attention_tiers), "attention tiers must be in {0, 1, 2}")
        for c in self.tier_channels:
            require(c % self.heads == 0, f"tier width {c} not divisible by {self.heads} heads")

    @property
    def tier_channels(self) -> tuple[int, int, int]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.cascade_channels


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, rng):
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.emb_proj = Linear(emb_dim, cout, rng=rng)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)
        self.skip = Conv2d(cin, cout, 1, rng=rng) if cin != cout else None

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(self.norm1(x).silu())
        B, C = h.shape[:2]
        h = h + self.emb_proj(emb.silu()).reshape(B, C, 1, 1)
        h = self.conv2(self.norm2(h).silu())
        return (self.skip(x) if self.skip is not None else x) + h


class AttentionBlock(Module):
    """Pre-norm residual attention; cross-attention when a context is supplied."""

    def __init__(self, channels: int, context_dim: int | None, heads: int, rng):
        self.norm = GroupNorm(channels)
        self.attn = Attention(channels, context_dim, heads, rng=rng)
        self.cross = context_dim is not None

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        h = self.norm(x)
        return x + self.attn(h, context if self.cross else h)


class UNet(Module):
    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        D = cfg.embedding_dim
        ch = cfg.tier_channels
        self.emb_in = Linear(D, D, rng=rng)
        self.emb_out = Linear(D, D, rng=rng)
        self.conv_in = Conv2d(cfg.in_channels, ch[0], 3, rng=rng)

        self.enc_blocks, self.enc_attn, self.downs = [], [], []
        prev = ch[0]
        for i, c in enumerate(ch):
            blocks = []
            for _ in range(cfg.blocks_per_tier):
                blocks.append(ResBlock(prev, c, D, rng))
                prev = c
            self.enc_blocks.append(blocks)
            self.enc_attn.append(AttentionBlock(c, D, cfg.heads, rng) if i in cfg.attention_tiers else None)
            if i < 2:
                self.downs.append(Conv2d(c, c, 3, stride=2, rng=rng))

        self.mid1 = ResBlock(ch[2], ch[2], D, rng)
        self.mid_attn = AttentionBlock(ch[2], None, cfg.heads, rng) if cfg.mid_self_attention else None
        self.mid2 = ResBlock(ch[2], ch[2], D, rng)

        self.dec_blocks, self.dec_attn, self.ups = [], [], []
        for i in (2, 1, 0):
            c = ch[i]
            blocks = [ResBlock(c + c, c, D, rng)]
            blocks += [ResBlock(c, c, D, rng) for _ in range(cfg.blocks_per_tier - 1)]
            self.dec_blocks.append(blocks)
            self.dec_attn.append(AttentionBlock(c, D, cfg.heads, rng) if i in cfg.attention_tiers else None)
            if i > 0:
                self.ups.append(Conv2d(c, ch[i - 1], 3, rng=rng))
        self.norm_out = GroupNorm(ch[0])
        self.conv_out = Conv2d(ch[0], cfg.latent_channels, 3, rng=rng)

    def forward(self, z_fused, embedding, sf_features=None) -> Tensor:
        return predict_noise(self, z_fused, embedding, sf_features)


def _inject(h: Tensor, sf_features, tier: int, where: str) -> Tensor:
    if sf_features is None:
        return h
    feat = as_tensor(sf_features[tier])
    require(feat.shape == h.shape, f"{where} tier {tier}: SF feature {feat.shape} does not match {h.shape}")
    return h + feat


def predict_noise(net: UNet, z_fused, embedding, sf_features=None) -> Tensor:
    """Noise estimate with the latent's shape.

    ``embedding`` is the combined scale+time vector, one row per sample.
    ``sf_features`` are the three adapter maps (or ``None`` for the
    unconditional path); they are added to the encoder and decoder
    outputs of the matching tier.
    """
    cfg = net.cfg
    x = as_tensor(z_fused)
    emb = as_tensor(embedding)
    require(x.ndim == 4 and x.shape[1] == cfg.in_channels,
            f"input tier: expected {cfg.in_channels} channels (latent + cascade), got {x.shape}")
    require(x.shape[2] % 4 == 0 and x.shape[3] % 4 == 0, f"input tier: extents {x.shape[2:]} not divisible by 4")
    if emb.ndim == 1:
        emb = emb.reshape(1, -1)
    require(emb.shape == (x.shape[0], cfg.embedding_dim),
            f"embedding must be ({x.shape[0]}, {cfg.embedding_dim}), got {emb.shape}")
    if sf_features is not None:
        require(len(sf_features) == 3, "expected three SF feature maps")
    emb = net.emb_out(net.emb_in(emb).silu())
    context = emb.reshape(emb.shape[0], 1, emb.shape[1])

    h = net.conv_in(x)
    skips = []
    for i in range(3):
        for block in net.enc_blocks[i]:
            h = block(h, emb)
        if net.enc_attn[i] is not None:
            h = net.enc_attn[i](h, context)
        h = _inject(h, sf_features, i, "encoder")
        skips.append(h)
        if i < 2:
            h = net.downs[i](h)

    h = net.mid1(h, emb)
    if net.mid_attn is not None:
        h = net.mid_attn(h)
    h = net.mid2(h, emb)

    for j, i in enumerate((2, 1, 0)):
        h = concat([h, skips[i]], axis=1)
        for block in net.dec_blocks[j]:
            h = block(h, emb)
        if net.dec_attn[j] is not None:
            h = net.dec_attn[j](h, context)
        h = _inject(h, sf_features, i, "decoder")
        if i > 0:
            h = net.ups[j](F.upsample_nearest(h, 2))
    return net.conv_out(net.norm_out(h).silu())


# ---------------------------------------------------------------------------
# closed-form parameter count


def _conv(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + cout


def _lin(din: int, dout: int) -> int:
    return din * dout + dout


def _norm(c: int) -> int:
    return 2 * c


def _res(cin: int, cout: int, D: int) -> int:
    n = _norm(cin) + _conv(cin, cout, 3) + _lin(D, cout) + _norm(cout) + _conv(cout, cout, 3)
    return n + (_conv(cin, cout, 1) if cin != cout else 0)


def _attn(c: int, cdim: int) -> int:
    return _norm(c) + c * c + 2 * c * cdim + c * c + c


def count_parameters(cfg: DenoiserConfig) -> int:
    """Exact parameter count of ``UNet(cfg)`` without instantiating it."""
    D = cfg.embedding_dim
    ch = cfg.tier_channels
    n = 2 * _lin(D, D) + _conv(cfg.in_channels, ch[0], 3)
    prev = ch[0]
    for i, c in enumerate(ch):
        for _ in range(cfg.blocks_per_tier):
            n += _res(prev, c, D)
            prev = c
        if i in cfg.attention_tiers:
            n += _attn(c, D)
        if i < 2:
            n += _conv(c, c, 3)
    n += 2 * _res(ch[2], ch[2], D) + (_attn(ch[2], ch[2]) if cfg.mid_self_attention else 0)
    for i in (2, 1, 0):
        c = ch[i]
        n += _res(2 * c, c, D) + (cfg.blocks_per_tier - 1) * _res(c, c, D)
        if i in cfg.attention_tiers:
            n += _attn(c, D)
        if i > 0:
            n += _conv(c, ch[i - 1], 3)
    return n + _norm(ch[0]) + _conv(ch[0], cfg.latent_channels, 3)


def linear_parameter_names(net: UNet) -> list[str]:
    """Names of attention projections and embedding linears (the "paper" profile's trainable U-Net subset)."""
    out = []
    for name, _ in net.named_parameters():
        if ".attn." in name or name.startswith(("emb_in.", "emb_out.")) or ".emb_proj." in name:
            out.append(name)
    return out


__all__ = ["DenoiserConfig", "UNet", "count_parameters", "linear_parameter_names", "predict_noise"]
