"""Differentiable layer primitives over NCHW tensors."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, as_tensor, concat, matmul, require


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``weight`` laid out as (out, in, kh, kw)."""
    require(x.ndim == 4 and weight.ndim == 4, f"conv2d expects 4-D input/weight, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    require(C == Ci, f"conv2d: input has {C} channels, weight expects {Ci}")
    require(stride >= 1 and padding >= 0, "conv2d: stride must be >= 1 and padding >= 0")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    require(Ho >= 1 and Wo >= 1, f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    if bias is not None:
        require(bias.shape == (O,), f"conv2d: bias shape {bias.shape} != ({O},)")

    xd, wd = x.data, weight.data
    K = C * kh * kw
    N = B * Ho * Wo
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    # one GEMM over a (K, B*Ho*Wo) column matrix; channels lead so batches share it
    xt = xd.transpose(1, 0, 2, 3)
    if pointwise:
        cols = np.ascontiguousarray(xt).reshape(K, N)
    else:
        if padding:
            xp = np.zeros((C, B, H + 2 * padding, W + 2 * padding), dtype=xd.dtype)
            xp[:, :, padding : padding + H, padding : padding + W] = xt
        else:
            xp = xt
        cols6 = np.empty((C, kh, kw, B, Ho, Wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
        cols = cols6.reshape(K, N)
    wmat = wd.reshape(O, K)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, N)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = wmat.T @ g2
            if pointwise:
                gxt = gcols.reshape(C, B, H, W)
            else:
                gcols = gcols.reshape(C, kh, kw, B, Ho, Wo)
                gxp = np.zeros((C, B, H + 2 * padding, W + 2 * padding), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
                gxt = gxp[:, :, padding : padding + H, padding : padding + W]
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, (lambda g: back(g)[:2]) if bias is None else back, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out as (out, in)."""
    require(x.shape[-1] == weight.shape[1], f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    y = matmul(x, weight.transpose(1, 0))
    return y + bias if bias is not None else y


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group normalisation followed by an optional per-channel affine."""
    require(x.ndim >= 2, "group_norm expects (B, C, ...) input")
    B, C = x.shape[:2]
    require(groups >= 1 and C % groups == 0, f"group_norm: {C} channels not divisible by {groups} groups")
    xd = x.data
    xg = xd.reshape(B, groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(xd.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def back(g):
        gx = gg = gbt = None
        if gamma is not None and gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta is not None and beta.requires_grad:
            gbt = g.sum(axis=red)
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
            dxh = dxhat.reshape(B, groups, n)
            xh = xhat.reshape(B, groups, n)
            gx = (inv / n) * (n * dxh - dxh.sum(axis=2, keepdims=True) - xh * (dxh * xh).sum(axis=2, keepdims=True))
            gx = gx.reshape(xd.shape)
        res = [gx]
        if gamma is not None:
            res.append(gg)
        if beta is not None:
            res.append(gbt)
        return res

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return Tensor._make(out, parents, back, "group_norm")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Parameter-free per-channel, per-sample normalisation."""
    return group_norm(x, x.shape[1], None, None, eps)


def silu(x: Tensor) -> Tensor:
    return x.silu()


def mse_loss(target: Tensor, pred: Tensor) -> Tensor:
    target, pred = as_tensor(target), as_tensor(pred)
    require(target.shape == pred.shape, f"mse_loss: shape mismatch {target.shape} vs {pred.shape}")
    d = pred - target
    return (d * d).mean()


# ---------------------------------------------------------------------------
# attention


def _to_tokens(t: Tensor) -> Tensor:
    if t.ndim == 4:
        B, C, H, W = t.shape
        return t.reshape(B, C, H * W).transpose(0, 2, 1)
    require(t.ndim == 3, f"attention expects (B, C, H, W) or (B, N, D), got {t.shape}")
    return t


def attention(
    query_source: Tensor,
    context: Tensor,
    heads: int,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bo: Tensor | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention.

    ``query_source`` is an image (B, C, H, W) or token set (B, N, C).
    ``context`` is a token set (B, M, Dc) or an image; passing the same
    tensor as ``query_source`` gives self-attention. Projection weights
    use the (out, in) layout of :func:`linear`. The result has the shape
    of ``query_source``.
    """
    q_tok = _to_tokens(query_source)
    c_tok = _to_tokens(context)
    B, N, C = q_tok.shape
    require(c_tok.shape[0] == B, "attention: batch mismatch between query and context")
    require(wq.shape == (C, C) and wo.shape == (C, C), f"attention: projections must be {C}x{C}")
    require(wk.shape == (C, c_tok.shape[2]) and wv.shape == wk.shape,
            f"attention: key/value projections must be {C}x{c_tok.shape[2]}")
    require(heads >= 1 and C % heads == 0, f"attention: dim {C} not divisible by {heads} heads")
    M = c_tok.shape[1]
    d = C // heads
    q = linear(q_tok, wq).reshape(B, N, heads, d).transpose(0, 2, 1, 3)
    k = linear(c_tok, wk).reshape(B, M, heads, d).transpose(0, 2, 3, 1)
    v = linear(c_tok, wv).reshape(B, M, heads, d).transpose(0, 2, 1, 3)
    weights = (matmul(q, k) * (1.0 / math.sqrt(d))).softmax(axis=-1)
    mixed = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, N, C)
    out = linear(mixed, wo, bo)
    if query_source.ndim == 4:
        _, _, H, W = query_source.shape
        out = out.transpose(0, 2, 1).reshape(B, C, H, W)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# resampling and rearrangement

CATMULL_ROM_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    x = np.abs(x)
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def bicubic_taps(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Source indices and weights, each (out_size, 4), half-pixel centres, edge-clamped."""
    require(in_size >= 1 and out_size >= 1, "bicubic: sizes must be >= 1")
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(src)
    frac = src - base
    offsets = np.arange(-1, 3)
    idx = base.astype(np.int64)[:, None] + offsets[None, :]
    wts = cubic_kernel(frac[:, None] - offsets[None, :])
    return np.clip(idx, 0, in_size - 1), wts


def _resample_axis(arr: np.ndarray, idx: np.ndarray, wts: np.ndarray, axis: int) -> np.ndarray:
    arr = np.moveaxis(arr, axis, -1)
    out = arr[..., idx[:, 0]] * wts[:, 0]
    for k in range(1, 4):
        out = out + arr[..., idx[:, k]] * wts[:, k]
    return np.moveaxis(out, -1, axis)


def _tap_matrix(idx: np.ndarray, wts: np.ndarray, in_size: int) -> np.ndarray:
    m = np.zeros((idx.shape[0], in_size))
    rows = np.repeat(np.arange(idx.shape[0]), 4)
    np.add.at(m, (rows, idx.ravel()), wts.ravel())
    return m


def resample_bicubic_array(
    arr: np.ndarray, out_h: int, out_w: int, rows: slice | None = None, cols: slice | None = None
) -> np.ndarray:
    """Bicubic resampling of the last two axes of a plain array.

    ``rows``/``cols`` select a window of the full ``out_h x out_w`` output;
    the window is computed with exactly the same taps as the full result,
    so cropping afterwards and windowing here agree bit for bit.
    """
    ih, iw = arr.shape[-2:]
    yi, yw = bicubic_taps(ih, out_h)
    xi, xw = bicubic_taps(iw, out_w)
    if rows is not None:
        yi, yw = yi[rows], yw[rows]
        lo = int(yi.min())
        arr, yi = arr[..., lo : int(yi.max()) + 1, :], yi - lo
    if cols is not None:
        xi, xw = xi[cols], xw[cols]
        lo = int(xi.min())
        arr, xi = arr[..., lo : int(xi.max()) + 1], xi - lo
    if arr.dtype == np.float32:
        xw, yw = xw.astype(np.float32), yw.astype(np.float32)
    tmp = _resample_axis(arr, xi, xw, arr.ndim - 1)
    return _resample_axis(tmp, yi, yw, arr.ndim - 2)


def resample_bicubic(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Catmull-Rom (a = -0.5) resampling of the spatial axes, width pass first."""
    require(out_h >= 1 and out_w >= 1, "resample_bicubic: output extents must be >= 1")
    require(x.ndim >= 2, "resample_bicubic expects at least 2-D input")
    ih, iw = x.shape[-2:]
    out = resample_bicubic_array(x.data, out_h, out_w)

    def back(g):
        my = _tap_matrix(*bicubic_taps(ih, out_h), ih)
        mx = _tap_matrix(*bicubic_taps(iw, out_w), iw)
        return ((my.T @ g @ mx).astype(g.dtype, copy=False),)

    return Tensor._make(out, (x,), back, "resample_bicubic")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return Tensor._make(
        out, (x,), lambda g: (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),), "upsample_nearest"
    )


def _s2d(a: np.ndarray, f: int) -> np.ndarray:
    B, C, H, W = a.shape
    return a.reshape(B, C, H // f, f, W // f, f).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * f * f, H // f, W // f)


def _d2s(a: np.ndarray, f: int) -> np.ndarray:
    B, C, H, W = a.shape
    c = C // (f * f)
    return a.reshape(B, c, f, f, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * f, W * f)


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    require(x.ndim == 4, "space_to_depth expects NCHW input")
    require(factor >= 1, "space_to_depth: factor must be >= 1")
    require(x.shape[2] % factor == 0 and x.shape[3] % factor == 0,
            f"space_to_depth: extents {x.shape[2:]} not divisible by {factor}")
    return Tensor._make(_s2d(x.data, factor), (x,), lambda g: (_d2s(g, factor),), "space_to_depth")


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    require(x.ndim == 4, "depth_to_space expects NCHW input")
    require(factor >= 1 and x.shape[1] % (factor * factor) == 0,
            f"depth_to_space: {x.shape[1]} channels not divisible by {factor}^2")
    return Tensor._make(_d2s(x.data, factor), (x,), lambda g: (_s2d(g, factor),), "depth_to_space")


def channel_concat(tensors) -> Tensor:
    return concat(tensors, axis=1)
