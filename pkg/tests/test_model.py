from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from c2gm.diffusion import NoiseSource, SamplerSpec
from c2gm.model import (
    DESK,
    SGDM,
    final_loss,
    fit,
    get_profile,
    load_run,
    lr_at,
    make_train_state,
    run_meta_path,
    save_run,
    training_data,
)
from c2gm.numerics import ContractViolation, Tensor
from c2gm.synthetic import overfit_pairs


@pytest.fixture(scope="module")
def pairs():
    return overfit_pairs(4, tile_px=16)


@pytest.fixture(scope="module")
def tiny_profile():
    return get_profile("desk", T=10, steps=3, batch_size=2, dtype="float64")


def run(profile, pairs, steps=3, lr=None, seed=0):
    model = SGDM(profile, seed=seed)
    state = make_train_state(model, seed=seed, lr=lr)
    data = training_data(model, pairs.maps, pairs.rs, pairs.refs, pairs.prompts)
    fit(data, state, steps, profile.batch_size)
    return model, state


def test_training_is_deterministic(tiny_profile, pairs):
    _, a = run(tiny_profile, pairs)
    _, b = run(tiny_profile, pairs)
    assert a.losses == b.losses


def test_zero_learning_rate_keeps_parameters(tiny_profile, pairs):
    before = SGDM(tiny_profile, seed=0).state_dict()
    model, state = run(tiny_profile, pairs, lr=0.0)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(np.isfinite(state.losses))


def test_training_moves_parameters(tiny_profile, pairs):
    before = SGDM(tiny_profile, seed=0).state_dict()
    after = run(tiny_profile, pairs, steps=1)[0].state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_run_round_trip(tmp_path, tiny_profile):
    model = SGDM(tiny_profile, seed=3)
    path = tmp_path / "run.ckpt"
    save_run(model, path, seed=3, extra={"note": "x"})
    meta = json.loads(run_meta_path(path).read_text())
    assert meta["profile"] == "desk" and meta["seed"] == 3
    assert meta["overrides"] == {"T": 10, "steps": 3, "batch_size": 2, "dtype": "float64"}
    loaded, meta2 = load_run(path)
    assert loaded.profile == tiny_profile
    assert meta2 == meta
    assert all(np.array_equal(a.data, b.data) for a, b in zip(model.parameters(), loaded.parameters()))


def test_load_run_needs_sidecar(tmp_path, tiny_profile):
    path = tmp_path / "bare.ckpt"
    SGDM(tiny_profile).save(path)
    with pytest.raises(ContractViolation):
        load_run(path)


def test_unknown_profile():
    with pytest.raises(ContractViolation):
        get_profile("huge")


def test_lr_schedule():
    assert lr_at(5, 100, 1e-3, "constant") == 1e-3
    assert lr_at(0, 100, 1e-3, "cosine") == pytest.approx(1e-3)
    assert lr_at(99, 100, 1e-3, "cosine") == pytest.approx(1e-4)
    values = [lr_at(i, 50, 1.0, "cosine") for i in range(50)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ContractViolation):
        lr_at(0, 10, 1.0, "step")


def test_final_loss_window():
    assert final_loss([10.0] * 5 + [1.0] * 100) == 1.0
    assert final_loss([2.0, 4.0], window=100) == 3.0


def test_generate_shape_range_and_determinism(tiny_profile, pairs):
    model = SGDM(tiny_profile, seed=0)
    args = (pairs.rs[:2], pairs.refs[:2], pairs.prompts[:2], SamplerSpec("ddim", 3))
    a = model.generate(*args, NoiseSource(9))
    b = model.generate(*args, NoiseSource(9))
    assert a.shape == (2, 3, 16, 16)
    assert np.abs(a).max() <= 1.0
    assert np.array_equal(a, b)


def test_clip_latent_projects_onto_image_range(tiny_profile):
    model = SGDM(tiny_profile)
    z = model.encode(np.full((1, 3, 16, 16), 3.0))
    np.testing.assert_allclose(model.decode(model.clip_latent(z)), 1.0, atol=1e-12)


def test_desk_profile_shapes():
    assert DESK.codec.latent_shape(32, 32) == (12, 16, 16)
    assert DESK.denoiser.latent_channels == DESK.codec.channels


def test_eps_skip_is_exact_for_the_scaled_remainder(tiny_profile):
    model = SGDM(replace(tiny_profile, eps_skip=True))
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 12, 4, 4)), rng.standard_normal((2, 12, 4, 4))
    t = np.array([1, 10])
    ab = model.schedule.alpha_bar_at(t).reshape(-1, 1, 1, 1)
    z = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    remainder = np.sqrt(ab) * eps - np.sqrt(1 - ab) * x0
    np.testing.assert_allclose(model.skip_output(Tensor(remainder), z, t).data, eps, atol=1e-12)


def test_eps_skip_off_returns_network_output(tiny_profile):
    model = SGDM(replace(tiny_profile, eps_skip=False))
    raw = Tensor(np.ones((1, 12, 4, 4)))
    assert model.skip_output(raw, np.zeros((1, 12, 4, 4)), 5) is raw
