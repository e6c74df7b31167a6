from __future__ import annotations

import numpy as np
import pytest

from c2gm.codec import (
    EXACT,
    LEARNED,
    ExactCodec,
    LatentSpec,
    LearnedCodec,
    decode,
    encode,
    fit_learned_codec,
    make_codec,
    orthonormal_mixing,
)
from c2gm.numerics import ContractViolation


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(-1, 1, (2, 3, 16, 16))


def test_paper_shape():
    spec = LatentSpec(8)
    assert spec.latent_shape(256, 256) == (192, 32, 32)
    z = encode(np.zeros((1, 3, 256, 256)), spec)
    assert z.shape == (1, 192, 32, 32)


@pytest.mark.parametrize("f", [1, 2, 4, 8])
def test_exact_round_trip(images, f):
    spec = LatentSpec(f)
    np.testing.assert_allclose(decode(encode(images, spec), spec).data, images, atol=1e-12)


def test_exact_codec_preserves_norm(images):
    z = encode(images, LatentSpec(4)).data
    assert np.linalg.norm(z) == pytest.approx(np.linalg.norm(images), rel=1e-12)


def test_zero_latent_decodes_to_zero():
    spec = LatentSpec(2)
    assert not decode(np.zeros((1, 12, 4, 4)), spec).data.any()


def test_factor_one_is_mixing_only(images):
    z = encode(images, LatentSpec(1)).data
    q = orthonormal_mixing(3)
    np.testing.assert_allclose(z, np.einsum("oc,bchw->bohw", q, images), atol=1e-12)


def test_mixing_is_orthonormal():
    q = orthonormal_mixing(12)
    np.testing.assert_allclose(q @ q.T, np.eye(12), atol=1e-12)


def test_indivisible_extent_rejected():
    with pytest.raises(ContractViolation):
        encode(np.zeros((1, 3, 12, 12)), LatentSpec(8))


def test_wrong_latent_channels_rejected():
    with pytest.raises(ContractViolation):
        decode(np.zeros((1, 4, 2, 2)), LatentSpec(2))


@pytest.mark.parametrize("kwargs", [{"factor": 3}, {"factor": 2, "kind": "vae"}, {"factor": 2, "latent_channels": 4}])
def test_spec_validation(kwargs):
    with pytest.raises(ContractViolation):
        LatentSpec(**kwargs)


def test_make_codec_dispatch():
    assert isinstance(make_codec(LatentSpec(2, kind=EXACT)), ExactCodec)
    learned = make_codec(LatentSpec(4, 4, kind=LEARNED))
    assert isinstance(learned, LearnedCodec)
    assert learned.encode(np.zeros((1, 3, 16, 16))).shape == (1, 4, 4, 4)
    assert learned.decode(np.zeros((1, 4, 4, 4))).shape == (1, 3, 16, 16)


def test_learned_codec_fit_reduces_loss(images):
    codec = LearnedCodec(LatentSpec(2, 8, kind=LEARNED), width=8)
    losses = fit_learned_codec(codec, images[:1, :, :8, :8], steps=30, lr=1e-2)
    assert losses[-1] < 0.5 * losses[0]
