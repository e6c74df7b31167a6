"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


class GradCheckError(AssertionError):
    pass


def _projection(out: Tensor, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(out.shape)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor * scale) elementwise.

    The floor keeps entries whose true gradient is numerically zero from
    dominating; ``scale`` is the largest gradient magnitude in the pair.
    """
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    return np.abs(analytic - numeric) / denom


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    name: str | None = None,
    corrupt: Callable[[list[np.ndarray]], list[np.ndarray]] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``op`` maps the inputs to a tensor ``y``; the scalar under test is
    ``sum(y * R)`` for a fixed Gaussian ``R``. Only inputs with
    ``requires_grad`` are checked. ``max_entries`` caps the number of
    perturbed entries per input (chosen at random, seeded). ``corrupt``
    lets harness tests tamper with the analytic gradients.
    """
    label = name or getattr(op, "__name__", "op")
    for t in inputs:
        t.grad = None
        t.data = np.ascontiguousarray(t.data)
        if not np.isfinite(t.data).all():
            raise GradCheckError(f"{label}: non-finite input")
        if t.dtype != np.float64:
            raise GradCheckError(f"{label}: gradient checks run at float64, got {t.dtype}")
    try:
        y = op(*inputs)
    except NonFiniteError as exc:
        raise GradCheckError(f"{label}: {exc}") from exc
    proj = _projection(y, seed)

    def scalar() -> float:
        with no_grad():
            try:
                return float(np.sum(op(*inputs).data * proj))
            except NonFiniteError as exc:
                raise GradCheckError(f"{label}: {exc}") from exc

    (y * Tensor(proj)).sum().backward()
    checked = [t for t in inputs if t.requires_grad]
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in checked]
    if corrupt is not None:
        analytic = corrupt(analytic)

    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for t, a in zip(checked, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar()
            flat[i] = orig - step
            fm = scalar()
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * step)
        err = relative_errors(a.reshape(-1)[idx], num)
        if err.size:
            worst = max(worst, float(err.max()))
    for t in inputs:
        t.grad = None
    return worst


def module_grad_check(module, forward: Callable[[], Tensor], step: float = 1e-5,
                      max_entries: int | None = 40, seed: int = 0, extra: Sequence[Tensor] = (),
                      name: str | None = None) -> float:
    """Gradient check over every parameter of ``module`` plus ``extra`` tensors."""
    params = module.parameters()
    tensors = list(extra) + list(params)

    def op(*_):
        return forward()

    return grad_check(op, tensors, step=step, max_entries=max_entries, seed=seed,
                      name=name or type(module).__name__)
