"""Condition encoders: scale text, timestep, cascade reference and the RS/reference feature encoder."""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np

from .numerics import Conv2d, GroupNorm, Module, Tensor, as_tensor, concat, instance_norm, require
from .numerics import functional as F

TEXT_SEED = 0xC11F
_TOKEN = re.compile(r"\d+(?:\.\d+)?|[a-z]+")


def tokenize(prompt: str) -> list[str]:
    return _TOKEN.findall(prompt.lower())


class ScaleTextEncoder:
    """Frozen stand-in for a pretrained text encoder.

    Tokens map to fixed Gaussian vectors derived from a keyed hash of the
    token text; the mean token vector is projected to ``dim`` and
    L2-normalised. Only determinism, distinctness and the output
    dimension matter here, not semantics.
    """

    def __init__(self, dim: int = 256, token_dim: int = 64, seed: int = TEXT_SEED):
        self.dim = dim
        self.token_dim = token_dim
        self.seed = seed
        self.projection = np.random.default_rng(seed).standard_normal((token_dim, dim)) / math.sqrt(token_dim)
        self._cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                                     key=self.seed.to_bytes(8, "little")).digest()
            vec = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.token_dim)
            self._cache[token] = vec
        return vec

    def __call__(self, prompt: str) -> np.ndarray:
        tokens = tokenize(prompt)
        require(bool(tokens), "scale prompt must contain at least one token")
        pooled = np.mean([self.token_vector(t) for t in tokens], axis=0)
        out = pooled @ self.projection
        return out / np.linalg.norm(out)


_DEFAULT_TEXT: dict[int, ScaleTextEncoder] = {}


def encode_scale_text(prompt: str, dim: int = 256) -> np.ndarray:
    enc = _DEFAULT_TEXT.get(dim)
    if enc is None:
        enc = _DEFAULT_TEXT[dim] = ScaleTextEncoder(dim)
    return enc(prompt)


def encode_time(t, dim: int) -> np.ndarray:
    """Sinusoidal timestep code; slots ``2i``/``2i+1`` hold sin/cos of ``t / 10000**(2i/dim)``.

    Scalar ``t`` gives a ``(dim,)`` vector, an array of timesteps a ``(B, dim)`` matrix.
    """
    require(dim >= 2 and dim % 2 == 0, "time encoding needs an even dimension")
    t_arr = np.asarray(t, dtype=np.float64)
    require(np.all(t_arr >= 0), "timesteps must be >= 0")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = t_arr[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def combine_embeddings(e_s, e_t) -> np.ndarray:
    e_s, e_t = np.asarray(e_s), np.asarray(e_t)
    require(e_s.shape[-1] == e_t.shape[-1], f"embedding dims differ: {e_s.shape[-1]} vs {e_t.shape[-1]}")
    return e_s + e_t


# ---------------------------------------------------------------------------
# image-side condition networks


class CascadeFuser(Module):
    """Encode the cascade reference (E_lr), align it to the latent grid (f_up) and concatenate."""

    def __init__(self, factor: int, out_channels: int = 8, width: int = 16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.factor = factor
        self.out_channels = out_channels
        self.enc_in = Conv2d(3 * factor * factor, width, 3, rng=rng)
        self.enc_out = Conv2d(width, width, 3, rng=rng)
        self.up_conv = Conv2d(width, out_channels, 3, rng=rng)

    def encode_reference(self, ref: Tensor) -> Tensor:
        """Features on the ``factor``-reduced grid, which is the latent grid for an aligned reference."""
        h = F.space_to_depth(as_tensor(ref), self.factor)
        return self.enc_out(self.enc_in(h).silu()).silu()

    def features(self, ref: Tensor, size: tuple[int, int]) -> Tensor:
        return self.up_conv(F.resample_bicubic(self.encode_reference(ref), *size))

    def forward(self, z_t: Tensor, ref: Tensor) -> Tensor:
        return fuse_cascade(z_t, ref, self)


def fuse_cascade(z_t, cascade_ref, fuser: CascadeFuser) -> Tensor:
    z_t, ref = as_tensor(z_t), as_tensor(cascade_ref)
    require(z_t.ndim == 4 and ref.ndim == 4 and ref.shape[1] == 3,
            f"fuse_cascade expects NCHW latent and RGB reference, got {z_t.shape}, {ref.shape}")
    require(z_t.shape[0] == ref.shape[0], "fuse_cascade: batch mismatch")
    require(ref.shape[2] == z_t.shape[2] * fuser.factor and ref.shape[3] == z_t.shape[3] * fuser.factor,
            f"reference {ref.shape[2:]} does not align with latent {z_t.shape[2:]} at factor {fuser.factor}")
    return concat([z_t, fuser.features(ref, z_t.shape[2:])], axis=1)


class SPADE(Module):
    """Spatially adaptive modulation of instance-normalised ``x`` by ``[ctx, x]``."""

    def __init__(self, channels: int, ctx_channels: int, hidden: int = 16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(2)
        self.shared = Conv2d(ctx_channels + channels, hidden, 3, rng=rng)
        self.gamma = Conv2d(hidden, channels, 3, rng=rng)
        self.beta = Conv2d(hidden, channels, 3, rng=rng)

    def forward(self, x: Tensor, ctx: Tensor) -> Tensor:
        return spade_fuse(x, ctx, self)


def spade_fuse(x, ctx, block: SPADE) -> Tensor:
    x, ctx = as_tensor(x), as_tensor(ctx)
    require(x.shape[0] == ctx.shape[0] and x.shape[2:] == ctx.shape[2:],
            f"spade_fuse: context {ctx.shape} does not match features {x.shape}")
    act = block.shared(concat([ctx, x], axis=1)).silu()
    return instance_norm(x) * (block.gamma(act) + 1.0) + block.beta(act)


class BasicBlock(Module):
    def __init__(self, channels: int, rng):
        self.norm1 = GroupNorm(channels)
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.norm2 = GroupNorm(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(self.norm1(x).silu())
        return x + self.conv2(self.norm2(h).silu())


class MFEncoder(Module):
    """Two-branch encoder: RS basic blocks fused with reference features by SPADE at three scales.

    Down-sampling happens after each fused scale until the latent factor is
    reached; any factor left after the third scale is removed by extra
    strided convolutions before the output projection.
    """

    SCALES = 3

    def __init__(self, factor: int, out_channels: int = 16, width: int = 16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(3)
        require(factor >= 1 and (factor & (factor - 1)) == 0, "MFEncoder factor must be a power of two")
        self.factor = factor
        self.out_channels = out_channels
        downs = int(math.log2(factor))
        self.n_fused_downs = min(downs, self.SCALES)
        self.rs_stem = Conv2d(3, width, 3, rng=rng)
        self.ref_stem = Conv2d(3, width, 3, rng=rng)
        self.rs_blocks = [BasicBlock(width, rng) for _ in range(self.SCALES)]
        self.ref_convs = [Conv2d(width, width, 3, rng=rng) for _ in range(self.SCALES)]
        self.spades = [SPADE(width, width, hidden=width, rng=rng) for _ in range(self.SCALES)]
        self.rs_downs = [Conv2d(width, width, 3, stride=2, rng=rng) for _ in range(self.n_fused_downs)]
        self.ref_downs = [Conv2d(width, width, 3, stride=2, rng=rng) for _ in range(self.n_fused_downs)]
        self.tail_downs = [Conv2d(width, width, 3, stride=2, rng=rng) for _ in range(downs - self.n_fused_downs)]
        self.out = Conv2d(width, out_channels, 3, rng=rng)

    def reference_parameters(self) -> list:
        mods = [self.ref_stem, *self.ref_convs, *self.ref_downs]
        return [p for m in mods for p in m.parameters()]

    def forward(self, rs_tile: Tensor, cascade_ref: Tensor) -> Tensor:
        return mfencoder_forward(rs_tile, cascade_ref, self)


def mfencoder_forward(rs_tile, cascade_ref, enc: MFEncoder) -> Tensor:
    rs, ref = as_tensor(rs_tile), as_tensor(cascade_ref)
    require(rs.ndim == 4 and rs.shape[1] == 3, f"rs tile must be (B, 3, H, W), got {rs.shape}")
    require(ref.shape == rs.shape, f"cascade reference {ref.shape} must match rs tile {rs.shape}")
    require(rs.shape[2] % enc.factor == 0 and rs.shape[3] % enc.factor == 0,
            f"tile extents {rs.shape[2:]} not divisible by {enc.factor}")
    h = enc.rs_stem(rs).silu()
    c = enc.ref_stem(ref).silu()
    for i in range(enc.SCALES):
        c = enc.ref_convs[i](c).silu()
        h = enc.spades[i](enc.rs_blocks[i](h), c)
        if i < enc.n_fused_downs:
            h = enc.rs_downs[i](h).silu()
            c = enc.ref_downs[i](c).silu()
    for conv in enc.tail_downs:
        h = conv(h).silu()
    return enc.out(h)


class AdapterResBlock(Module):
    def __init__(self, channels: int, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.conv1(x.silu()).silu())


class SFAdapter(Module):
    """Turns F_cond into three additive feature maps at halving resolutions."""

    def __init__(self, in_channels: int, tier_channels: tuple[int, int, int], rng=None):
        rng = rng if rng is not None else np.random.default_rng(4)
        require(len(tier_channels) == 3, "SFAdapter produces exactly three tiers")
        self.tier_channels = tuple(tier_channels)
        self.conv_in = Conv2d(in_channels, tier_channels[0], 3, rng=rng)
        self.blocks = [AdapterResBlock(c, rng) for c in tier_channels]
        self.downs = [Conv2d(tier_channels[i], tier_channels[i + 1], 3, stride=2, rng=rng) for i in range(2)]

    def forward(self, f_cond: Tensor) -> list[Tensor]:
        return sfadapter_forward(f_cond, self)


def sfadapter_forward(f_cond, adapter: SFAdapter) -> list[Tensor]:
    h = adapter.blocks[0](adapter.conv_in(as_tensor(f_cond)))
    feats = [h]
    for down, block in zip(adapter.downs, adapter.blocks[1:]):
        h = block(down(h))
        feats.append(h)
    return feats


@dataclass
class Condition:
    """Everything the denoiser sees besides the noisy latent itself."""

    embedding: np.ndarray  # (B, D): scale-text embedding + time encoding
    fused_latent: Tensor  # cat[z_t, f_up(E_lr(ref))]
    cond_feature: Tensor  # F_cond
    sf_features: list[Tensor]
