"""Headless property suite behind ``c2gm selftest``; each check prints one pass/fail line."""
from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .cascade import CascadeJob, MockDenoiser, run_cascade, seam_score
from .codec import LatentSpec
from .dataset import DatasetManifest, LocalSource, build_manifest, ingest_tiles, region_tiles, verify_references
from .diffusion import ddim_step, ddim_timesteps, desk_schedule, make_linear_schedule, q_sample
from .evaluation import GaussianStats, frechet_distance, psnr, ssim
from .gradsuite import run_suite
from .model import DESK, SGDM, load_run, save_run
from .numerics import resample_bicubic_array
from .synthetic import write_source
from .tiles import StagePlan, TileCoord


def check_forward_moments(seed: int) -> str:
    sched = make_linear_schedule(50)
    rng = np.random.default_rng(seed)
    y0 = 0.7
    worst = 0.0
    for t in (1, 10, 25, 40, 50):
        z = q_sample(np.full(4000, y0), t, rng.standard_normal(4000), sched)
        ab = sched.alpha_bar[t - 1]
        worst = max(worst, abs(z.std() / math.sqrt(1 - ab) - 1))
        assert abs(z.mean() - math.sqrt(ab) * y0) < 5 * math.sqrt(1 - ab) / math.sqrt(4000)
    assert worst < 0.05, worst
    return f"std rel err {worst:.3f}"


def check_ddim_inversion(seed: int) -> str:
    sched = desk_schedule(50)
    rng = np.random.default_rng(seed)
    y0 = rng.standard_normal((2, 3, 4, 4))
    eps = rng.standard_normal(y0.shape)
    ts = ddim_timesteps(50, 7)
    y = q_sample(y0, ts[0], eps, sched)
    for t, tp in zip(ts, ts[1:] + [0]):
        y = ddim_step(y, t, tp, eps, sched)
    err = float(np.abs(y - y0).max())
    assert err < 1e-9, err
    return f"max err {err:.1e}"


def check_gradients(seed: int, quick: bool) -> str:
    results = run_suite(seed, None if not quick else [
        "conv2d", "linear", "group_norm", "attention", "SPADE", "SFAdapter"])
    failed = [r.name for r in results if not r.passed]
    assert not failed, failed
    return f"{len(results)} layers, worst {max(r.max_rel_error for r in results):.1e}"


def _ramp(px: int) -> np.ndarray:
    yy, xx = np.mgrid[0:px, 0:px] / px
    return np.stack([xx - 0.5, yy - 0.5, 0.5 * (xx + yy) - 0.5])


def check_cascade(seed: int) -> str:
    px = 16
    plan = StagePlan(14, 1, 2, px, px)
    job = CascadeJob({TileCoord(14, 3, 5): _ramp(px)}, lambda c: np.zeros((3, px, px)), plan, global_seed=seed)
    mock = MockDenoiser(LatentSpec(2))
    a = run_cascade(job, mock, workers=1)
    b = run_cascade(job, mock, workers=3)
    assert a.generated_count() == 4 + 16
    assert all(np.array_equal(a.canvases[z], b.canvases[z]) for z in a.levels)
    up = _ramp(px)
    for _ in range(2):
        up = resample_bicubic_array(up[None], up.shape[1] * 2, up.shape[2] * 2)[0]
    err = float(np.abs(a.canvases[16] - up).max())
    seam = seam_score(a.canvases[16], px)
    assert err < 1e-9 and abs(seam) < 1e-6, (err, seam)
    return f"20 tiles, oracle err {err:.1e}, seam {seam:.1e}"


def check_metrics(seed: int) -> str:
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 239, (24, 24))
    assert abs(psnr(a, a + 16) - 20 * math.log10(255 / 16)) < 1e-9
    assert psnr(a, a) == math.inf
    assert abs(ssim(a, a) - 1) < 1e-9
    eye = np.eye(2)
    d1 = frechet_distance(GaussianStats(np.zeros(2), eye, 2), GaussianStats(np.array([3.0, 4.0]), eye, 2))
    d2 = frechet_distance(GaussianStats(np.zeros(2), np.diag([1.0, 4.0]), 2),
                          GaussianStats(np.zeros(2), np.diag([4.0, 1.0]), 2))
    assert abs(d1 - 25) < 1e-9 and abs(d2 - 2) < 1e-9, (d1, d2)
    return "psnr, ssim, frechet closed forms"


def check_dataset(seed: int) -> str:
    root = TileCoord(14, 10, 20)
    with tempfile.TemporaryDirectory() as tmp:
        src, store = Path(tmp) / "src", Path(tmp) / "store"
        write_source(src, root, 2, 32, seed)
        report = ingest_tiles(LocalSource(src), region_tiles([root], 2), store)
        assert report.fetched == 42 and not report.missing
        m = build_manifest(store, 2, tile_px=32)
        assert m.counts == {15: 4, 16: 16}, m.counts
        again = DatasetManifest.read(store / "manifest_2x.tsv")
        assert again == m and not verify_references(m, store)
    return "20 pairs, references regenerate bit-identically"


def check_checkpoint(seed: int) -> str:
    model = SGDM(DESK, seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_run(model, path, seed)
        loaded, _ = load_run(path)
    same = all(np.array_equal(p.data, q.data) for p, q in zip(model.parameters(), loaded.parameters()))
    assert same
    return f"{len(model.parameters())} tensors round-trip"


def run_selftest(quick: bool = False, seed: int = 0, out: Callable[[str], None] = print) -> bool:
    checks = [
        ("forward-process moments", lambda: check_forward_moments(seed)),
        ("DDIM algebraic inversion", lambda: check_ddim_inversion(seed)),
        ("layer gradients", lambda: check_gradients(seed, quick)),
        ("cascade geometry and continuity", lambda: check_cascade(seed)),
        ("metric closed forms", lambda: check_metrics(seed)),
        ("dataset fixture", lambda: check_dataset(seed)),
        ("checkpoint round-trip", lambda: check_checkpoint(seed)),
    ]
    ok = True
    for name, fn in checks:
        start = time.perf_counter()
        try:
            detail = fn()
            status = "PASS"
        except AssertionError as exc:
            detail, status, ok = f"assertion failed: {exc}", "FAIL", False
        out(f"{status}  {name:<34} {time.perf_counter() - start:6.1f}s  {detail}")
    out("selftest " + ("passed" if ok else "FAILED"))
    return ok
