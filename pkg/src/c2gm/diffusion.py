"""Noise schedules, forward noising, DDPM/DDIM reverse steps and the epsilon objective.

Timesteps are 1-based: ``t`` runs over ``1..T`` and table entry ``t - 1``
holds the step-``t`` value. ``alpha_bar_at(0)`` is 1 (the clean sample),
which is what the last DDIM hop lands on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Tensor, as_tensor, mse_loss, require
from .numerics.tensor import NonFiniteError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def alpha_bar_at(self, t):
        t = np.asarray(t)
        require(np.all((t >= 0) & (t <= self.T)), f"timestep out of range [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def _at(self, table: np.ndarray, t):
        t = np.asarray(t)
        require(np.all((t >= 1) & (t <= self.T)), f"timestep out of range [1, {self.T}]")
        return table[t - 1]


def schedule_from_betas(beta) -> NoiseSchedule:
    """Build the derived tables from an explicit beta sequence (no range validation)."""
    beta = np.array(beta, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(len(beta), beta, alpha, alpha_bar, sigma)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    require(T >= 1, "schedule needs T >= 1")
    require(0.0 < beta_start <= beta_end < 1.0, "schedule needs 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    return schedule_from_betas(beta)


def desk_schedule(T: int = 50) -> NoiseSchedule:
    """Linear schedule with the 1000-step endpoints rescaled by ``1000 / T``.

    Keeps the terminal signal level close to the 1000-step schedule so
    short chains still start from (almost) pure noise.
    """
    scale = 1000.0 / T
    return make_linear_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def _bcast(v, like: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=like.dtype)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def q_sample(y0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps``; ``t`` may be per-sample."""
    y, e = _raw(y0), _raw(eps)
    require(y.shape == e.shape, f"q_sample: eps shape {e.shape} != y0 shape {y.shape}")
    ab = _bcast(sched._at(sched.alpha_bar, t), y)
    out = np.sqrt(ab) * y + np.sqrt(1.0 - ab) * e
    return Tensor(out) if isinstance(y0, Tensor) else out


def predict_x0(y_t, t, eps_hat, sched: NoiseSchedule):
    y, e = _raw(y_t), _raw(eps_hat)
    require(y.shape == e.shape, f"predict_x0: shape mismatch {y.shape} vs {e.shape}")
    ab = _bcast(sched.alpha_bar_at(t), y)
    require(np.all(ab > 0.0), "predict_x0: alpha_bar is zero")
    return (y - np.sqrt(1.0 - ab) * e) / np.sqrt(ab)


class NoiseSource:
    """Seeded Gaussian draws with an audit counter."""

    def __init__(self, seed: int | np.random.Generator):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.draws = 0

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        out = self.rng.standard_normal(shape)
        self.draws += out.size
        return out.astype(dtype, copy=False)


def ddpm_step(y_t, t: int, eps_hat, sched: NoiseSchedule, rng: NoiseSource):
    y, e = _raw(y_t), _raw(eps_hat)
    require(y.shape == e.shape, f"ddpm_step: shape mismatch {y.shape} vs {e.shape}")
    a = sched._at(sched.alpha, t)
    b = sched._at(sched.beta, t)
    ab = sched._at(sched.alpha_bar, t)
    mean = (y - (b / np.sqrt(1.0 - ab)) * e) / np.sqrt(a)
    if t == 1:
        return mean
    sig = sched._at(sched.sigma, t)
    return mean + sig * rng.normal(y.shape, y.dtype)


def ddim_step(y_t, t: int, t_prev: int, eps_hat, sched: NoiseSchedule):
    """Deterministic (eta = 0) jump from ``t`` to ``t_prev``."""
    require(0 <= t_prev < t, f"ddim_step: need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    e = _raw(eps_hat)
    x0 = predict_x0(y_t, t, e, sched)
    if t_prev == 0:
        return x0
    ab_prev = sched.alpha_bar_at(t_prev)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * e


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending timesteps from ``T`` to 1, ``steps`` of them (deduplicated)."""
    require(1 <= steps, "ddim needs at least one step")
    ts = np.unique(np.round(np.linspace(1, T, min(steps, T))).astype(int))[::-1]
    return [int(t) for t in ts]


def training_loss(eps, eps_hat) -> Tensor:
    eps, eps_hat = as_tensor(eps), as_tensor(eps_hat)
    require(eps.shape == eps_hat.shape, f"training_loss: shape mismatch {eps.shape} vs {eps_hat.shape}")
    return mse_loss(eps, eps_hat)


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "ddim"  # "ddim" or "ddpm"
    steps: int = 10

    def __post_init__(self):
        require(self.kind in ("ddim", "ddpm"), f"unknown sampler {self.kind!r}")
        require(self.steps >= 1, "sampler needs steps >= 1")

    def declared_draws(self, sched: NoiseSchedule, numel: int) -> int:
        return numel * (sched.T if self.kind == "ddpm" else 1)

    def __str__(self) -> str:
        return f"{self.kind}({self.steps})" if self.kind == "ddim" else "ddpm"


def consistent_eps(y_t, t: int, x0, sched: NoiseSchedule) -> np.ndarray:
    """The noise that maps ``x0`` to ``y_t`` at step ``t`` under the forward process."""
    ab = sched.alpha_bar_at(t)
    require(ab < 1.0, "consistent_eps: alpha_bar is one")
    return (_raw(y_t) - np.sqrt(ab) * _raw(x0)) / np.sqrt(1.0 - ab)


def sample(
    predict_eps: Callable[[np.ndarray, int], np.ndarray],
    shape: tuple,
    sched: NoiseSchedule,
    sampler: SamplerSpec,
    rng: NoiseSource,
    dtype=np.float64,
    clip_x0: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Run a reverse chain from ``N(0, I)``; ``predict_eps(z_t, t)`` supplies the noise estimate.

    ``clip_x0`` projects each implied clean estimate onto the data range;
    the step then uses the noise consistent with the projected estimate.
    Near the end of a long schedule ``alpha_bar`` is tiny and small noise
    errors turn into huge clean-estimate errors, so trained models need this.
    """
    z = rng.normal(shape, dtype)

    def estimate(z, t):
        e = predict_eps(z, t)
        if clip_x0 is None:
            return e
        x0 = clip_x0(predict_x0(z, t, e, sched))
        return consistent_eps(z, t, x0, sched).astype(z.dtype, copy=False)

    if sampler.kind == "ddpm":
        for t in range(sched.T, 0, -1):
            z = ddpm_step(z, t, estimate(z, t), sched, rng)
            if not np.isfinite(z).all():
                raise NonFiniteError("ddpm_step", f"t={t}")
    else:
        ts = ddim_timesteps(sched.T, sampler.steps)
        for t, t_prev in zip(ts, ts[1:] + [0]):
            z = ddim_step(z, t, t_prev, estimate(z, t), sched)
            if not np.isfinite(z).all():
                raise NonFiniteError("ddim_step", f"t={t}")
    return z
