"""Image <-> latent codecs.

The exact codec folds ``f x f`` pixel blocks into channels and mixes them
with a fixed orthonormal matrix, so it is lossless and norm preserving.
The learned codec is a small convolutional autoencoder that stands in for
a pretrained VAE structurally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Conv2d, Module, Tensor, as_tensor, conv2d, depth_to_space, require, space_to_depth
from .numerics import functional as F
from .numerics.optim import AdamW

EXACT, LEARNED = "exact", "learned"
MIXING_SEED = 0x5EED_C0DE


@dataclass(frozen=True)
class LatentSpec:
    factor: int = 8
    latent_channels: int | None = None
    kind: str = EXACT

    def __post_init__(self):
        require(self.factor >= 1 and (self.factor & (self.factor - 1)) == 0, "codec factor must be a power of two")
        require(self.kind in (EXACT, LEARNED), f"unknown codec kind {self.kind!r}")
        if self.kind == EXACT:
            require(self.latent_channels in (None, self.channels),
                    f"exact codec has {self.channels} latent channels")

    @property
    def channels(self) -> int:
        if self.kind == EXACT or self.latent_channels is None:
            return 3 * self.factor**2
        return self.latent_channels

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        require(h % self.factor == 0 and w % self.factor == 0,
                f"image extents {h}x{w} not divisible by codec factor {self.factor}")
        return self.channels, h // self.factor, w // self.factor


def orthonormal_mixing(n: int, seed: int = MIXING_SEED) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
    return q * np.sign(np.diag(r))[None, :]


class ExactCodec:
    def __init__(self, spec: LatentSpec):
        require(spec.kind == EXACT, "ExactCodec needs an exact LatentSpec")
        self.spec = spec
        q = orthonormal_mixing(spec.channels)
        self._enc = Tensor(q[:, :, None, None])
        self._dec = Tensor(q.T.copy()[:, :, None, None])

    def encode(self, image) -> Tensor:
        x = as_tensor(image)
        require(x.ndim == 4 and x.shape[1] == 3, f"encode expects (B, 3, H, W), got {x.shape}")
        self.spec.latent_shape(*x.shape[2:])
        return conv2d(space_to_depth(x, self.spec.factor), self._enc.astype(x.dtype))

    def decode(self, latent) -> Tensor:
        z = as_tensor(latent)
        require(z.ndim == 4 and z.shape[1] == self.spec.channels,
                f"decode expects {self.spec.channels} latent channels, got {z.shape}")
        return depth_to_space(conv2d(z, self._dec.astype(z.dtype)), self.spec.factor)


class LearnedCodec(Module):
    def __init__(self, spec: LatentSpec, width: int = 16, seed: int = 0):
        require(spec.kind == LEARNED, "LearnedCodec needs a learned LatentSpec")
        self.spec = spec
        rng = np.random.default_rng(seed)
        downs = int(math.log2(spec.factor))
        self.enc_in = Conv2d(3, width, 3, rng=rng)
        self.enc_down = [Conv2d(width, width, 3, stride=2, rng=rng) for _ in range(downs)]
        self.enc_out = Conv2d(width, spec.channels, 3, rng=rng)
        self.dec_in = Conv2d(spec.channels, width, 3, rng=rng)
        self.dec_up = [Conv2d(width, width, 3, rng=rng) for _ in range(downs)]
        self.dec_out = Conv2d(width, 3, 3, rng=rng)
        self.assign_names("codec.")

    def encode(self, image) -> Tensor:
        x = as_tensor(image)
        require(x.ndim == 4 and x.shape[1] == 3, f"encode expects (B, 3, H, W), got {x.shape}")
        self.spec.latent_shape(*x.shape[2:])
        h = self.enc_in(x).silu()
        for conv in self.enc_down:
            h = conv(h).silu()
        return self.enc_out(h)

    def decode(self, latent) -> Tensor:
        z = as_tensor(latent)
        require(z.ndim == 4 and z.shape[1] == self.spec.channels,
                f"decode expects {self.spec.channels} latent channels, got {z.shape}")
        h = self.dec_in(z).silu()
        for conv in self.dec_up:
            h = conv(F.upsample_nearest(h, 2)).silu()
        return self.dec_out(h)


def make_codec(spec: LatentSpec, seed: int = 0):
    return ExactCodec(spec) if spec.kind == EXACT else LearnedCodec(spec, seed=seed)


def encode(image, spec: LatentSpec) -> Tensor:
    return ExactCodec(spec).encode(image)


def decode(latent, spec: LatentSpec) -> Tensor:
    return ExactCodec(spec).decode(latent)


def to_export_range(image: np.ndarray) -> np.ndarray:
    return np.clip(image, -1.0, 1.0)


def fit_learned_codec(codec: LearnedCodec, images: np.ndarray, steps: int = 500, lr: float = 3e-3,
                      log=None) -> list[float]:
    """Overfit the autoencoder to ``images`` by MSE; returns the loss curve."""
    opt = AdamW(codec.parameters(), lr=lr, weight_decay=0.0)
    x = Tensor(images)
    losses = []
    for step in range(steps):
        opt.zero_grad()
        loss = F.mse_loss(x, codec.decode(codec.encode(x)))
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log is not None:
            log(step, losses[-1])
    return losses
