"""Finite-difference checks for every differentiable layer, used by ``c2gm grad-check`` and the tests."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .codec import LatentSpec
from .conditioning import SPADE, CascadeFuser, MFEncoder, SFAdapter, mfencoder_forward, sfadapter_forward
from .denoiser import DenoiserConfig, ResBlock, UNet, predict_noise
from .numerics import Attention, GroupNorm, Module, Tensor, concat, grad_check, module_grad_check
from .numerics import functional as F

LAYER_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _t(rng, *shape, grad: bool = True) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def _conv(rng) -> float:
    x, w, b = _t(rng, 2, 3, 6, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    e1 = grad_check(lambda x, w, b: F.conv2d(x, w, b, 1, 1), [x, w, b], name="conv s1")
    e2 = grad_check(lambda x, w, b: F.conv2d(x, w, b, 2, 1), [x, w, b], name="conv s2")
    return max(e1, e2)


def _linear(rng) -> float:
    x, w, b = _t(rng, 3, 5, 6), _t(rng, 4, 6), _t(rng, 4)
    return grad_check(F.linear, [x, w, b], name="linear")


def _group_norm(rng) -> float:
    x, g, b = _t(rng, 2, 6, 4, 3), _t(rng, 6), _t(rng, 6)
    return grad_check(lambda x, g, b: F.group_norm(x, 3, g, b), [x, g, b], name="group_norm")


def _instance_norm(rng) -> float:
    return grad_check(F.instance_norm, [_t(rng, 2, 3, 4, 4)], name="instance_norm")


def _attention(rng) -> float:
    self_attn = Attention(8, None, heads=2, rng=rng)
    cross = Attention(8, 5, heads=2, rng=rng)
    x, ctx = _t(rng, 2, 8, 3, 3), _t(rng, 2, 4, 5)
    e1 = module_grad_check(self_attn, lambda: self_attn(x), extra=[x], max_entries=None, name="self-attention")
    e2 = module_grad_check(cross, lambda: cross(x, ctx), extra=[x, ctx], max_entries=None, name="cross-attention")
    return max(e1, e2)


def _resample(rng) -> float:
    x = _t(rng, 1, 2, 5, 4)
    e1 = grad_check(lambda x: F.resample_bicubic(x, 10, 8), [x], name="bicubic up")
    e2 = grad_check(lambda x: F.resample_bicubic(x, 3, 2), [x], name="bicubic down")
    return max(e1, e2)


def _rearrange(rng) -> float:
    x = _t(rng, 2, 3, 4, 4)
    e1 = grad_check(lambda x: F.space_to_depth(x, 2), [x], name="space_to_depth")
    e2 = grad_check(lambda x: F.depth_to_space(x, 2), [_t(rng, 2, 12, 2, 2)], name="depth_to_space")
    e3 = grad_check(lambda x: F.upsample_nearest(x, 2), [x], name="upsample_nearest")
    return max(e1, e2, e3)


def _activations(rng) -> float:
    x = _t(rng, 3, 7)
    e1 = grad_check(lambda x: x.silu(), [x], name="silu")
    e2 = grad_check(lambda x: x.softmax(axis=-1), [x], name="softmax")
    return max(e1, e2)


def _mse(rng) -> float:
    a, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 4, 4)
    return grad_check(lambda a, b: F.mse_loss(a, b), [a, b], name="mse")


def _groupnorm_module(rng) -> float:
    gn = GroupNorm(6, groups=2)
    gn.weight.data = rng.standard_normal(6)
    x = _t(rng, 2, 6, 3, 3)
    return module_grad_check(gn, lambda: gn(x), extra=[x], max_entries=None)


def _spade(rng) -> float:
    block = SPADE(4, 3, hidden=5, rng=rng)
    x, ctx = _t(rng, 2, 4, 5, 5), _t(rng, 2, 3, 5, 5)
    return module_grad_check(block, lambda: block(x, ctx), extra=[x, ctx], max_entries=30)


def _resblock(rng) -> float:
    block = ResBlock(4, 8, 6, rng)
    x, emb = _t(rng, 2, 4, 4, 4), _t(rng, 2, 6)
    return module_grad_check(block, lambda: block(x, emb), extra=[x, emb], max_entries=30)


def _fuser(rng) -> float:
    fuser = CascadeFuser(2, out_channels=3, width=4, rng=rng)
    z, ref = _t(rng, 1, 2, 4, 4), _t(rng, 1, 3, 8, 8)
    return module_grad_check(fuser, lambda: fuser(z, ref), extra=[z, ref], max_entries=25)


def _mfencoder(rng) -> float:
    enc = MFEncoder(4, out_channels=3, width=4, rng=rng)
    rs, ref = _t(rng, 1, 3, 8, 8), _t(rng, 1, 3, 8, 8)
    return module_grad_check(enc, lambda: mfencoder_forward(rs, ref, enc), extra=[rs, ref], max_entries=20)


def _sfadapter(rng) -> float:
    ad = SFAdapter(3, (4, 8, 8), rng=rng)
    f = _t(rng, 1, 3, 8, 8)

    def fwd():
        return concat([o.reshape(1, -1) for o in sfadapter_forward(f, ad)], axis=1)

    return module_grad_check(ad, fwd, extra=[f], max_entries=20)


class ToyDenoiser(Module):
    """Cascade fuser, condition encoder, adapter and U-Net wired as in the full generator, at toy width."""

    def __init__(self, rng: np.random.Generator, latent: int = 8, factor: int = 2):
        spec = LatentSpec(factor=factor)
        self.cfg = DenoiserConfig(latent_channels=spec.channels, cascade_channels=4, base_channels=8,
                                  channel_multipliers=(1, 2, 2), embedding_dim=16, heads=2)
        self.fuser = CascadeFuser(factor, 4, 4, rng=rng)
        self.enc = MFEncoder(factor, 4, 4, rng=rng)
        self.adapter = SFAdapter(4, self.cfg.tier_channels, rng=rng)
        self.unet = UNet(self.cfg, seed=int(rng.integers(1 << 30)))
        self.latent = latent
        self.factor = factor

    def forward(self, z: Tensor, rs: Tensor, ref: Tensor, emb: Tensor) -> Tensor:
        fused = self.fuser(z, ref)
        sf = sfadapter_forward(mfencoder_forward(rs, ref, self.enc), self.adapter)
        return predict_noise(self.unet, fused, emb, sf)


def _toy_denoiser(rng) -> float:
    net = ToyDenoiser(rng)
    px = net.latent * net.factor
    z = _t(rng, 1, net.cfg.latent_channels, net.latent, net.latent)
    rs, ref = _t(rng, 1, 3, px, px), _t(rng, 1, 3, px, px)
    emb = _t(rng, 1, net.cfg.embedding_dim)
    return module_grad_check(net, lambda: net(z, rs, ref, emb), extra=[z, rs, ref, emb], max_entries=3)


LAYER_CHECKS: list[tuple[str, Callable[[np.random.Generator], float], float]] = [
    ("conv2d", _conv, LAYER_TOLERANCE),
    ("linear", _linear, LAYER_TOLERANCE),
    ("group_norm", _group_norm, LAYER_TOLERANCE),
    ("group_norm module", _groupnorm_module, LAYER_TOLERANCE),
    ("instance_norm", _instance_norm, LAYER_TOLERANCE),
    ("activations", _activations, LAYER_TOLERANCE),
    ("mse", _mse, LAYER_TOLERANCE),
    ("attention", _attention, LAYER_TOLERANCE),
    ("bicubic resample", _resample, LAYER_TOLERANCE),
    ("rearrange", _rearrange, LAYER_TOLERANCE),
    ("SPADE", _spade, LAYER_TOLERANCE),
    ("U-Net res block", _resblock, LAYER_TOLERANCE),
    ("cascade fuser", _fuser, LAYER_TOLERANCE),
    ("MFEncoder", _mfencoder, LAYER_TOLERANCE),
    ("SFAdapter", _sfadapter, LAYER_TOLERANCE),
    ("toy denoiser 8x8 latent", _toy_denoiser, COMPOSITE_TOLERANCE),
]


def run_suite(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for i, (name, fn, tol) in enumerate(LAYER_CHECKS):
        if only and name not in only:
            continue
        start = time.perf_counter()
        err = fn(np.random.default_rng([seed, i]))
        results.append(CheckResult(name, err, tol, time.perf_counter() - start))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'layer':<26}{'max rel err':>14}{'tol':>9}  status"]
    for r in results:
        lines.append(f"{r.name:<26}{r.max_rel_error:>14.3e}{r.tolerance:>9.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
