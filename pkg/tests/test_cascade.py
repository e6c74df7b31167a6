from __future__ import annotations

import json

import numpy as np
import pytest

from c2gm.cascade import (
    CascadeJob,
    MissingTilesError,
    MockDenoiser,
    Scene,
    TileGenerationError,
    generate_tile,
    prepare_reference,
    run_cascade,
    run_stage,
    seam_score,
    stitch,
    tile_seed,
    write_pyramid,
)
from c2gm.codec import LatentSpec
from c2gm.diffusion import SamplerSpec
from c2gm.numerics import resample_bicubic_array
from c2gm.tiles import StagePlan, TileCoord, children

PX = 8


def smooth_seed(px: int = PX, phase: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:px, 0:px] / px
    return 0.6 * np.stack([np.sin(2 * xx + phase), np.cos(3 * yy), xx * yy - 0.3])


def blank_rs(c: TileCoord) -> np.ndarray:
    return np.zeros((3, PX, PX))


class CountingDenoiser(MockDenoiser):
    def __init__(self):
        super().__init__(LatentSpec(2))
        self.calls = 0

    def generate(self, *args):
        self.calls += 1
        return super().generate(*args)


class NaNDenoiser:
    def generate(self, reference, rs_image, prompt, sampler, seed):
        return np.full_like(reference, np.nan)


@pytest.fixture
def mock():
    return MockDenoiser(LatentSpec(2))


def test_tile_seed_is_stable():
    c = TileCoord(16, 100, 200)
    assert tile_seed(7, c) == tile_seed(7, c)
    assert tile_seed(7, c) != tile_seed(8, c)


def test_tile_seed_has_no_collisions_on_a_level_18_block():
    seeds = {tile_seed(0, TileCoord(18, 100_000 + x, 50_000 + y)) for x in range(1024) for y in range(1024)}
    assert len(seeds) == 1024 * 1024


def test_tile_seed_separates_levels():
    assert tile_seed(0, TileCoord(15, 3, 3)) != tile_seed(0, TileCoord(16, 3, 3))


def test_generate_tile_is_deterministic(mock):
    ref = smooth_seed()
    spec = SamplerSpec("ddpm")
    a = generate_tile(ref, blank_rs(None), TileCoord(15, 0, 0), spec, 11, mock)
    b = generate_tile(ref, blank_rs(None), TileCoord(15, 0, 0), spec, 11, mock)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, ref, atol=1e-9)


def test_generate_tile_reports_nonfinite():
    with pytest.raises(TileGenerationError) as info:
        generate_tile(smooth_seed(), blank_rs(None), TileCoord(15, 1, 0), SamplerSpec(), 0, NaNDenoiser())
    assert "15/1/0" in str(info.value)


def test_stage_one_seed_four_children(mock):
    seed = TileCoord(14, 2, 3)
    job = CascadeJob({seed: smooth_seed()}, blank_rs, StagePlan(14, 1, 1, PX, PX))
    out, records = run_stage(job.seed_tiles, [seed], job, mock)
    assert sorted(out) == sorted(children(seed, 1))
    assert len(records) == 4 and all(r["parent"] == "14/2/3" for r in records)


def test_stage_four_tiles_n2(mock):
    roots = [TileCoord(14, c, r) for c in (0, 1) for r in (0, 1)]
    tiles = {c: smooth_seed(phase=i) for i, c in enumerate(roots)}
    job = CascadeJob(tiles, blank_rs, StagePlan(14, 2, 1, PX, PX))
    out, _ = run_stage(tiles, roots, job, mock)
    assert len(out) == 64


def test_zero_stages_returns_seeds(mock):
    seed = TileCoord(14, 0, 0)
    result = run_cascade(CascadeJob({seed: smooth_seed()}, blank_rs, StagePlan(14, 1, 0, PX, PX)), mock)
    assert result.levels == [14] and result.generated_count() == 0 and not result.provenance


def test_cascade_counts_and_worker_independence(mock):
    seed = TileCoord(14, 5, 9)
    job = CascadeJob({seed: smooth_seed()}, blank_rs, StagePlan(14, 1, 3, PX, PX), SamplerSpec("ddim", 4), 3)
    a = run_cascade(job, mock, workers=1)
    b = run_cascade(job, mock, workers=4)
    assert a.generated_count() == 4 + 16 + 64
    assert a.canvases[17].shape == (3, 64, 64)
    for z in a.levels:
        assert np.array_equal(a.canvases[z], b.canvases[z])
    assert a.provenance == b.provenance


def test_cascade_matches_iterated_upsampling(mock):
    seed = TileCoord(14, 0, 0)
    result = run_cascade(CascadeJob({seed: smooth_seed()}, blank_rs, StagePlan(14, 1, 2, PX, PX)), mock)
    want = smooth_seed()
    for _ in range(2):
        want = resample_bicubic_array(want, want.shape[1] * 2, want.shape[2] * 2)
    np.testing.assert_allclose(result.canvases[16], want, atol=1e-9)
    # curved content leaves only a curvature-sized residue, far below a real seam
    assert abs(seam_score(result.canvases[16], PX)) < 1e-3


def test_ramp_cascade_is_seam_free(mock):
    # 16 px keeps the first tile border clear of the bend that edge clamping puts into the ramp
    px = 16
    yy, xx = np.mgrid[0:px, 0:px] / px
    ramp = np.stack([xx - 0.5, yy - 0.5, 0.5 * (xx + yy) - 0.5])
    job = CascadeJob({TileCoord(14, 0, 0): ramp}, lambda c: np.zeros((3, px, px)), StagePlan(14, 1, 2, px, px))
    assert abs(seam_score(run_cascade(job, mock).canvases[16], px)) < 1e-6


def test_missing_rs_fails_before_generation():
    seed = TileCoord(14, 0, 0)
    absent = TileCoord(15, 1, 1)
    denoiser = CountingDenoiser()

    def rs(c):
        return None if c == absent else blank_rs(c)

    job = CascadeJob({seed: smooth_seed()}, rs, StagePlan(14, 1, 1, PX, PX))
    with pytest.raises(MissingTilesError) as info:
        run_cascade(job, denoiser)
    assert info.value.coords == [absent]
    assert denoiser.calls == 0


def test_seed_level_must_match_plan():
    with pytest.raises(ValueError):
        CascadeJob({TileCoord(15, 0, 0): smooth_seed()}, blank_rs, StagePlan(14, 1, 1, PX, PX))


def test_stitch_places_tiles():
    tiles = {TileCoord(15, c, r): np.full((3, 256, 256), (c - 4) + 2 * (r - 6), dtype=float)
             for c in (4, 5) for r in (6, 7)}
    canvas = stitch(tiles)
    assert canvas.shape == (3, 512, 512)
    assert canvas[0, 0, 0] == 0 and canvas[0, 0, 300] == 1 and canvas[0, 300, 0] == 2 and canvas[0, 511, 511] == 3


def test_stitch_reports_gaps():
    tiles = {TileCoord(15, 0, 0): np.zeros((3, 4, 4)), TileCoord(15, 1, 1): np.zeros((3, 4, 4))}
    with pytest.raises(MissingTilesError) as info:
        stitch(tiles)
    assert info.value.coords == [TileCoord(15, 0, 1), TileCoord(15, 1, 0)]


def test_stitch_rejects_mixed_levels():
    with pytest.raises(ValueError):
        stitch({TileCoord(15, 0, 0): np.zeros((3, 4, 4)), TileCoord(16, 0, 0): np.zeros((3, 4, 4))})


def test_reference_interior_matches_crop_then_upsample():
    canvas = np.random.default_rng(0).uniform(-1, 1, (3, 2 * PX, 2 * PX))
    scene = Scene(TileCoord(15, 0, 0), canvas, PX, PX)
    child = TileCoord(16, 1, 2)
    ref = prepare_reference(scene, child, 1)
    half = PX // 2
    crop = canvas[:, 2 * half : 3 * half, half : 2 * half]
    literal = resample_bicubic_array(crop, PX, PX)
    np.testing.assert_allclose(ref[:, 3:-3, 3:-3], literal[:, 3:-3, 3:-3], atol=1e-12)


def test_adjacent_references_share_the_upsampled_canvas():
    canvas = np.random.default_rng(1).uniform(-1, 1, (3, PX, PX))
    scene = Scene(TileCoord(14, 0, 0), canvas, PX, PX)
    full = resample_bicubic_array(canvas, 2 * PX, 2 * PX)
    left = prepare_reference(scene, TileCoord(15, 0, 0), 1)
    right = prepare_reference(scene, TileCoord(15, 1, 0), 1)
    assert np.array_equal(np.concatenate([left, right], axis=2), full[:, :PX])


def test_seam_score_cases():
    assert seam_score(np.full((3, 16, 16), 0.4), 8) == 0.0
    blocks = np.zeros((3, 16, 16))
    blocks[:, :8, 8:] = 0.5
    blocks[:, 8:, :8] = -0.5
    assert seam_score(blocks, 8) > 0.1
    yy, xx = np.mgrid[0:16, 0:16]
    assert abs(seam_score((xx + yy)[None] / 32.0, 8)) < 1e-12


def test_write_pyramid_layout(tmp_path, mock):
    seed = TileCoord(14, 0, 0)
    job = CascadeJob({seed: smooth_seed()}, blank_rs, StagePlan(14, 1, 2, PX, PX), SamplerSpec("ddim", 3), 5)
    write_pyramid(run_cascade(job, mock), tmp_path)
    assert len(list((tmp_path / "15").glob("*.png"))) == 4
    assert len(list((tmp_path / "16").glob("*.png"))) == 16
    assert sorted(p.name for p in tmp_path.glob("canvas_*.png")) == ["canvas_15.png", "canvas_16.png"]
    lines = (tmp_path / "provenance.jsonl").read_text().splitlines()
    assert len(lines) == 20
    rec = json.loads(lines[0])
    assert {"level", "col", "row", "parent", "seed", "prompt", "sampler", "steps"} <= set(rec)
