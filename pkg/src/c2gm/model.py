"""The scale-guided conditional denoiser bundle: encoders, codec, U-Net, schedule, training and sampling."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .codec import LatentSpec, make_codec
from .conditioning import (
    CascadeFuser,
    Condition,
    MFEncoder,
    ScaleTextEncoder,
    SFAdapter,
    combine_embeddings,
    encode_time,
    mfencoder_forward,
    sfadapter_forward,
)
from .denoiser import DenoiserConfig, UNet, count_parameters, linear_parameter_names, predict_noise
from .diffusion import NoiseSchedule, NoiseSource, SamplerSpec, desk_schedule, make_linear_schedule, q_sample, sample
from .numerics import AdamW, Module, NonFiniteError, Tensor, concat, load_checkpoint, no_grad, require, save_checkpoint
from .numerics import functional as F


@dataclass(frozen=True)
class Profile:
    """Every hyperparameter of one model scale."""

    name: str
    tile_px: int
    codec: LatentSpec
    denoiser: DenoiserConfig
    cond_channels: int = 16
    encoder_width: int = 16
    T: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    steps: int = 2000
    weight_decay: float = 0.01
    train_all: bool = True
    dtype: str = "float32"
    lr_decay: str = "cosine"  # or "constant"
    eps_skip: bool = True

    def schedule(self) -> NoiseSchedule:
        return desk_schedule(self.T) if self.T < 1000 else make_linear_schedule(self.T)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


DESK = Profile(
    name="desk",
    tile_px=32,
    codec=LatentSpec(factor=2),
    denoiser=DenoiserConfig(latent_channels=12, cascade_channels=8, base_channels=32, embedding_dim=128),
)

PAPER = Profile(
    name="paper",
    tile_px=256,
    codec=LatentSpec(factor=8, latent_channels=4, kind="learned"),
    denoiser=DenoiserConfig(latent_channels=4, cascade_channels=4, base_channels=320, blocks_per_tier=2,
                            embedding_dim=1024, heads=8),
    cond_channels=64,
    encoder_width=64,
    T=1000,
    batch_size=20,
    lr=5e-5,
    steps=200_000,
    train_all=False,
    lr_decay="constant",
    eps_skip=False,
)

PROFILES = {p.name: p for p in (DESK, PAPER)}


def get_profile(name: str, **overrides) -> Profile:
    require(name in PROFILES, f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return replace(PROFILES[name], **overrides) if overrides else PROFILES[name]


class SGDM:
    """All networks of the conditional generator plus its frozen text encoder and codec."""

    def __init__(self, profile: Profile = DESK, seed: int = 0):
        self.profile = profile
        cfg = profile.denoiser
        f = profile.codec.factor
        require(profile.codec.channels == cfg.latent_channels,
                f"codec yields {profile.codec.channels} channels, denoiser expects {cfg.latent_channels}")
        self.schedule = profile.schedule()
        self.text = ScaleTextEncoder(cfg.embedding_dim)
        self.codec = make_codec(profile.codec, seed=seed)
        self.fuser = CascadeFuser(f, cfg.cascade_channels, profile.encoder_width, rng=np.random.default_rng([seed, 1]))
        self.mfencoder = MFEncoder(f, profile.cond_channels, profile.encoder_width, rng=np.random.default_rng([seed, 2]))
        self.adapter = SFAdapter(profile.cond_channels, cfg.tier_channels, rng=np.random.default_rng([seed, 3]))
        self.unet = UNet(cfg, seed=seed)
        for name, mod in self.modules().items():
            mod.assign_names(name + ".")
        if not profile.train_all:
            self.unet.set_requires_grad(False)
            owned = dict(self.unet.named_parameters("unet."))
            for name in linear_parameter_names(self.unet):
                owned["unet." + name].requires_grad = True
        if isinstance(self.codec, Module):
            self.codec.set_requires_grad(False)
        self.to_dtype(profile.np_dtype)

    def modules(self) -> dict[str, Module]:
        mods = {"fuser": self.fuser, "mfencoder": self.mfencoder, "adapter": self.adapter, "unet": self.unet}
        if isinstance(self.codec, Module):
            mods["codec"] = self.codec
        return mods

    def named_parameters(self):
        for prefix, mod in self.modules().items():
            yield from mod.named_parameters(prefix + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.requires_grad]

    def to_dtype(self, dtype) -> "SGDM":
        self.dtype = np.dtype(dtype)
        for mod in self.modules().values():
            mod.to_dtype(self.dtype)
        return self

    # -- condition assembly ------------------------------------------------

    def scale_embeddings(self, prompts: Sequence[str]) -> np.ndarray:
        return np.stack([self.text(p) for p in prompts])

    def embedding(self, prompts_or_emb, t) -> np.ndarray:
        e_s = prompts_or_emb if isinstance(prompts_or_emb, np.ndarray) else self.scale_embeddings(prompts_or_emb)
        t = np.broadcast_to(np.asarray(t), (e_s.shape[0],))
        return combine_embeddings(e_s, encode_time(t, e_s.shape[1])).astype(self.dtype)

    def image_features(self, rs, ref) -> tuple[Tensor, Tensor, list[Tensor]]:
        """Timestep-independent parts of the condition: cascade features, F_cond and the adapter maps."""
        rs, ref = _tensor(rs, self.dtype), _tensor(ref, self.dtype)
        lat = self.profile.codec.latent_shape(*ref.shape[2:])[1:]
        ref_feat = self.fuser.features(ref, lat)
        f_cond = mfencoder_forward(rs, ref, self.mfencoder)
        return ref_feat, f_cond, sfadapter_forward(f_cond, self.adapter)

    def condition(self, z_t, t, rs, ref, prompts) -> Condition:
        ref_feat, f_cond, sf = self.image_features(rs, ref)
        fused = concat([_tensor(z_t, self.dtype), ref_feat], axis=1)
        return Condition(self.embedding(prompts, t), fused, f_cond, sf)

    def predict_eps(self, cond: Condition, z_t, t) -> Tensor:
        raw = predict_noise(self.unet, cond.fused_latent, Tensor(cond.embedding), cond.sf_features)
        return self.skip_output(raw, z_t, t)

    def skip_output(self, raw: Tensor, z_t, t) -> Tensor:
        """Noise estimate from the network output, optionally through the variance-preserving input skip.

        With ``eps_skip`` the estimate is ``sqrt(1 - abar_t) z_t + sqrt(abar_t) raw``:
        the skip term is the best linear guess of the noise from ``z_t``
        alone, so the network only supplies the scaled remainder. Near
        ``t = T`` the estimate then stays close to ``z_t`` however rough
        the network is, and the implied clean estimate is
        ``sqrt(abar_t) z_t - sqrt(1 - abar_t) raw``, which does not divide by
        a tiny ``sqrt(abar_t)``. The objective is still plain noise MSE.
        """
        if not self.profile.eps_skip:
            return raw
        ab = np.broadcast_to(self.schedule.alpha_bar_at(np.asarray(t)), (raw.shape[0],))
        ab = ab.reshape(-1, 1, 1, 1).astype(self.dtype)
        return raw * Tensor(np.sqrt(ab)) + Tensor(np.sqrt(1.0 - ab) * np.asarray(z_t, dtype=self.dtype))

    # -- codec -------------------------------------------------------------

    def encode(self, images) -> np.ndarray:
        with no_grad():
            return self.codec.encode(_tensor(images, self.dtype)).data

    def decode(self, latents) -> np.ndarray:
        with no_grad():
            return self.codec.decode(_tensor(latents, self.dtype)).data

    def clip_latent(self, z: np.ndarray) -> np.ndarray:
        """Project a clean-latent estimate onto latents of images in [-1, 1] (exact codec only)."""
        if isinstance(self.codec, Module):
            return z
        return self.encode(np.clip(self.decode(z), -1.0, 1.0)).astype(z.dtype, copy=False)

    # -- sampling ----------------------------------------------------------

    def generate(self, rs, ref, prompts, sampler: SamplerSpec, noise: NoiseSource,
                 zero_sf: bool = False) -> np.ndarray:
        """Sample map images (B, 3, H, W) in [-1, 1] for a batch of conditions."""
        rs = np.asarray(rs, dtype=self.dtype)
        ref = np.asarray(ref, dtype=self.dtype)
        B = rs.shape[0]
        shape = (B,) + self.profile.codec.latent_shape(*rs.shape[2:])
        e_s = self.scale_embeddings(prompts)
        with no_grad():
            ref_feat, _, sf = self.image_features(rs, ref)
            if zero_sf:
                sf = [Tensor(np.zeros_like(s.data)) for s in sf]

            def eps_fn(z, t):
                fused = concat([Tensor(z.astype(self.dtype, copy=False)), ref_feat], axis=1)
                raw = predict_noise(self.unet, fused, Tensor(self.embedding(e_s, t)), sf)
                return self.skip_output(raw, z, t).data

            z0 = sample(eps_fn, shape, self.schedule, sampler, noise, dtype=self.dtype, clip_x0=self.clip_latent)
        return np.clip(self.decode(z0), -1.0, 1.0)

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for prefix, mod in self.modules().items():
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(sub, strict=strict)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path, profile: Profile = DESK, seed: int = 0) -> "SGDM":
        model = cls(profile, seed)
        model.load_state_dict(load_checkpoint(path))
        return model


# scalar profile fields a run may override; nested configs are fixed by the profile name
OVERRIDABLE = ("T", "batch_size", "lr", "steps", "weight_decay", "dtype", "lr_decay", "eps_skip")


def run_meta_path(path) -> Path:
    return Path(str(path) + ".json")


def save_run(model: SGDM, path, seed: int, extra: dict | None = None) -> None:
    """Checkpoint plus a JSON sidecar recording the profile, its overrides and the seed."""
    base = PROFILES[model.profile.name]
    overrides = {k: getattr(model.profile, k) for k in OVERRIDABLE
                 if getattr(model.profile, k) != getattr(base, k)}
    model.save(path)
    meta = {"profile": model.profile.name, "overrides": overrides, "seed": seed, **(extra or {})}
    run_meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_run(path) -> tuple[SGDM, dict]:
    meta_file = run_meta_path(path)
    require(meta_file.exists(), f"checkpoint metadata {meta_file} not found")
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    profile = get_profile(meta["profile"], **meta.get("overrides", {}))
    return SGDM.load(path, profile, meta.get("seed", 0)), meta


def _tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else x.astype(dtype)
    return Tensor(np.asarray(x, dtype=dtype))


def trainable_count(profile: Profile) -> dict[str, int]:
    """Analytic parameter counts (U-Net total and its trainable share) without building the U-Net."""
    cfg = profile.denoiser
    total = count_parameters(cfg)
    return {"unet_total": total, "unet_trainable": total if profile.train_all else linear_subset_count(cfg)}


def linear_subset_count(cfg: DenoiserConfig) -> int:
    """Closed-form size of the attention/embedding linear subset of ``UNet(cfg)``."""
    D = cfg.embedding_dim
    ch = cfg.tier_channels
    n = 2 * (D * D + D)
    res = []
    for i, c in enumerate(ch):
        res += [c] * cfg.blocks_per_tier
        if i in cfg.attention_tiers:
            n += 2 * c * c + 2 * c * D + c
    res += [ch[2], ch[2]]
    if cfg.mid_self_attention:
        n += 4 * ch[2] * ch[2] + ch[2]
    for i in (2, 1, 0):
        res += [ch[i]] * cfg.blocks_per_tier
        if i in cfg.attention_tiers:
            n += 2 * ch[i] * ch[i] + 2 * ch[i] * D + ch[i]
    return n + sum(D * c + c for c in res)


# ---------------------------------------------------------------------------
# training


@dataclass
class Batch:
    """Aligned training items: target latents, RS tiles, cascade references and scale prompts."""

    z0: np.ndarray
    rs: np.ndarray
    refs: np.ndarray
    prompts: list[str]

    def take(self, idx) -> "Batch":
        return Batch(self.z0[idx], self.rs[idx], self.refs[idx], [self.prompts[i] for i in idx])


@dataclass
class TrainState:
    model: SGDM
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)
    base_lr: float = 1e-3


def make_train_state(model: SGDM, seed: int = 0, lr: float | None = None) -> TrainState:
    p = model.profile
    opt = AdamW(model.trainable_parameters(), lr=p.lr if lr is None else lr, weight_decay=p.weight_decay)
    return TrainState(model, opt, np.random.default_rng([seed, 0x7A1]), base_lr=opt.lr)


def lr_at(step: int, total: int, base: float, kind: str, floor: float = 0.1) -> float:
    """Learning rate for 0-based ``step`` of ``total``: constant, or cosine from ``base`` down to ``floor * base``."""
    require(kind in ("constant", "cosine"), f"unknown lr decay {kind!r}")
    if kind == "constant" or total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def train_step(batch: Batch, state: TrainState) -> float:
    """One optimisation step of the noise-prediction objective; returns the batch loss."""
    model, rng = state.model, state.rng
    sched = model.schedule
    B = batch.z0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(batch.z0.shape).astype(model.dtype)
    z_t = q_sample(batch.z0.astype(model.dtype), t, eps, sched).astype(model.dtype)
    state.optimizer.zero_grad()
    try:
        cond = model.condition(z_t, t, batch.rs, batch.refs, batch.prompts)
        loss = F.mse_loss(Tensor(eps), model.predict_eps(cond, z_t, t))
        loss.backward()
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, f"training step {state.step}, t={t.tolist()}: {exc.detail}") from exc
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError("train_step", f"loss={value} at step {state.step}")
    state.optimizer.step()
    state.step += 1
    state.losses.append(value)
    return value


def fit(data: Batch, state: TrainState, steps: int, batch_size: int,
        log: Callable[[str], None] | None = None, log_every: int = 50) -> list[float]:
    """Run ``steps`` training steps over ``data`` with per-step random minibatches (drawn from the state's rng)."""
    n = data.z0.shape[0]
    start = time.perf_counter()
    decay = state.model.profile.lr_decay
    for i in range(steps):
        state.optimizer.lr = lr_at(i, steps, state.base_lr, decay)
        idx = state.rng.choice(n, size=min(batch_size, n), replace=False)
        loss = train_step(data.take(idx), state)
        if log is not None and (state.step % log_every == 0 or state.step == 1):
            log(f"{state.step}\t{loss:.6f}\t{state.optimizer.lr:g}\t{time.perf_counter() - start:.2f}")
    return state.losses


def final_loss(losses: Sequence[float], window: int = 100) -> float:
    """Mean of the last ``window`` step losses (single-step losses are dominated by the random ``t``)."""
    require(len(losses) > 0, "no losses recorded")
    return float(np.mean(losses[-window:]))


def training_data(model: SGDM, maps, rs, refs, prompts) -> Batch:
    return Batch(model.encode(maps), np.asarray(rs, model.dtype), np.asarray(refs, model.dtype), list(prompts))
