from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from c2gm.numerics import (
    AdamW,
    CheckpointError,
    ContractViolation,
    Linear,
    NonFiniteError,
    Parameter,
    Tensor,
    attention,
    conv2d,
    depth_to_space,
    grad_check,
    group_norm,
    load_checkpoint,
    no_grad,
    resample_bicubic,
    resample_bicubic_array,
    save_checkpoint,
    space_to_depth,
)
from c2gm.numerics.nn import kaiming_uniform

DATA = Path(__file__).parent / "data"


def scalar_kernel(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def scalar_bicubic(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    ih, iw = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        sy = (i + 0.5) * ih / oh - 0.5
        for j in range(ow):
            sx = (j + 0.5) * iw / ow - 0.5
            acc = 0.0
            for dy in range(-1, 3):
                yy = math.floor(sy) + dy
                for dx in range(-1, 3):
                    xx = math.floor(sx) + dx
                    w = scalar_kernel(sy - yy) * scalar_kernel(sx - xx)
                    acc += w * img[min(max(yy, 0), ih - 1), min(max(xx, 0), iw - 1)]
            out[i, j] = acc
    return out


def direct_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(11)


# ---------------------------------------------------------------------------
# tensor engine


def test_backward_accumulates_through_shared_nodes():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = x * x + x * 3.0
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_broadcast_gradient_is_reduced():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_raises_at_producing_op():
    x = Tensor(np.array([1e308]))
    with pytest.raises(NonFiniteError) as info:
        _ = x * 10.0
    assert "mul" in str(info.value)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exp_overflow_is_reported():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1000.0])).exp()


# ---------------------------------------------------------------------------
# convolution


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_conv2d_matches_direct_loop(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, direct_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv2d_gradient(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    err = grad_check(lambda x, w, b: conv2d(x, w, b, stride=2, padding=1), [x, w, b])
    assert err < 1e-6


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(ContractViolation):
        conv2d(Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((3, 5, 3, 3))))


# ---------------------------------------------------------------------------
# normalisation and attention


def test_group_norm_statistics(rng):
    x = Tensor(rng.standard_normal((2, 8, 4, 4)) * 3 + 5)
    y = group_norm(x, 4).data.reshape(2, 4, -1)
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)


def test_attention_uniform_when_keys_are_equal(rng):
    C = 4
    q = Tensor(rng.standard_normal((1, 3, C)))
    ctx = Tensor(np.tile(rng.standard_normal((1, 1, C)), (1, 5, 1)))
    eye = Tensor(np.eye(C))
    _, weights = attention(q, ctx, 2, eye, eye, eye, eye, return_weights=True)
    np.testing.assert_allclose(weights.data, 1 / 5, atol=1e-12)


def test_attention_picks_matching_key():
    C = 2
    keys = np.array([[[10.0, 0.0], [0.0, 10.0]]])
    q = Tensor(np.array([[[10.0, 0.0]]]))
    eye = Tensor(np.eye(C))
    out, weights = attention(q, Tensor(keys), 1, eye, eye, eye, eye, return_weights=True)
    assert weights.data[0, 0, 0, 0] > 0.999
    np.testing.assert_allclose(out.data[0, 0], keys[0, 0], atol=1e-3)


def test_attention_image_query_keeps_shape(rng):
    x = Tensor(rng.standard_normal((2, 4, 3, 3)))
    ctx = Tensor(rng.standard_normal((2, 5, 6)))
    wq, wo = Tensor(np.eye(4)), Tensor(np.eye(4))
    wk = wv = Tensor(rng.standard_normal((4, 6)))
    assert attention(x, ctx, 2, wq, wk, wv, wo).shape == (2, 4, 3, 3)


def test_attention_rejects_indivisible_heads(rng):
    x = Tensor(rng.standard_normal((1, 3, 6)))
    eye = Tensor(np.eye(6))
    with pytest.raises(ContractViolation):
        attention(x, x, 4, eye, eye, eye, eye)


# ---------------------------------------------------------------------------
# resampling


def test_bicubic_matches_shipped_golden_vectors():
    golden = np.load(DATA / "bicubic_golden.npz")
    names = sorted({k.rsplit("_", 1)[0] for k in golden.files})
    assert names
    for name in names:
        src, want = golden[name + "_in"], golden[name + "_out"]
        got = resample_bicubic_array(src, *want.shape)
        assert np.array_equal(got, want), name


@pytest.mark.parametrize("shape,out", [((5, 7), (10, 14)), ((4, 4), (16, 16)), ((9, 6), (4, 3)), ((1, 3), (2, 5))])
def test_bicubic_matches_scalar_oracle(rng, shape, out):
    img = rng.uniform(-1, 1, shape)
    np.testing.assert_allclose(resample_bicubic_array(img, *out), scalar_bicubic(img, *out), atol=1e-12)


def test_bicubic_preserves_constants_and_ramps():
    assert np.allclose(resample_bicubic_array(np.full((4, 4), 0.3), 8, 8), 0.3)
    ramp = np.tile(np.arange(8.0), (8, 1))
    up = resample_bicubic_array(ramp, 16, 16)
    # away from the clamped borders a linear ramp is reproduced exactly
    np.testing.assert_allclose(up[:, 4:-4], np.tile((np.arange(16) + 0.5) / 2 - 0.5, (16, 1))[:, 4:-4], atol=1e-12)


def test_bicubic_window_is_bit_identical_to_crop(rng):
    img = rng.standard_normal((3, 8, 8))
    full = resample_bicubic_array(img, 32, 32)
    part = resample_bicubic_array(img, 32, 32, rows=slice(8, 24), cols=slice(16, 32))
    assert np.array_equal(part, full[:, 8:24, 16:32])


def test_bicubic_gradient(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 5)), requires_grad=True)
    assert grad_check(lambda x: resample_bicubic(x, 8, 7), [x]) < 1e-7


@pytest.mark.parametrize("f", [1, 2, 4])
def test_space_depth_round_trip(rng, f):
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    y = space_to_depth(x, f)
    assert y.shape == (2, 3 * f * f, 8 // f, 8 // f)
    assert np.array_equal(depth_to_space(y, f).data, x.data)


def test_space_to_depth_rejects_indivisible(rng):
    with pytest.raises(ContractViolation):
        space_to_depth(Tensor(rng.standard_normal((1, 1, 6, 6))), 4)


# ---------------------------------------------------------------------------
# harness, init, optimiser, checkpoints


def test_grad_check_detects_sign_flip(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    from c2gm.numerics import linear

    clean = grad_check(linear, [x, w])
    flipped = grad_check(linear, [x, w], corrupt=lambda grads: [-g for g in grads])
    assert clean < 1e-7
    assert flipped == pytest.approx(2.0, abs=1e-6)


def test_kaiming_bound(rng):
    w = kaiming_uniform(rng, (64, 100), fan_in=100)
    assert np.abs(w).max() <= 1 / math.sqrt(100)
    assert np.abs(w).max() > 0.9 / math.sqrt(100)


def test_adamw_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -3.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_adamw_decay_is_decoupled():
    p = Parameter(np.array([2.0]))
    p.grad = np.array([0.0])
    AdamW([p], lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])


def test_adamw_zero_lr_leaves_parameters():
    layer = Linear(3, 2, rng=np.random.default_rng(0))
    before = [p.data.copy() for p in layer.parameters()]
    for p in layer.parameters():
        p.grad = np.ones_like(p.data)
    AdamW(layer.parameters(), lr=0.0).step()
    assert all(np.array_equal(a, p.data) for a, p in zip(before, layer.parameters()))


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": rng.standard_normal((2, 3)), "b": np.array(1.5), "c": rng.standard_normal(0)}
    save_checkpoint(tmp_path / "m.ckpt", params)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert set(back) == set(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT\x01\x00\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_checkpoint_rejects_truncation(tmp_path, rng):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": rng.standard_normal(50)})
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
