"""Image-quality metrics: Y-channel PSNR/SSIM and a Fréchet distance over a frozen random feature net."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .images import read_pixels
from .numerics import Tensor, conv2d, no_grad, require

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
EIG_TOLERANCE = 1e-8
FID_NET_SEED = 20240601
FID_NET_FILE = "fid_lite_net.npz"
# (out_channels, in_channels) per stride-2 3x3 conv
FID_NET_LAYERS = ((16, 3), (32, 16), (32, 32))


class NumericalError(ArithmeticError):
    pass


def to_luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 full-range Y of an (H, W, 3) image in 0..255; 2-D input is taken as already grey."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb
    require(rgb.ndim == 3 and rgb.shape[2] == 3, f"expected (H, W, 3) RGB, got {rgb.shape}")
    return rgb @ LUMA_WEIGHTS


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """Returns ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    require(a.shape == b.shape, f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 255.0) -> float:
    """Gaussian-windowed SSIM of two grey images, averaged over all fully covered positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    require(a.shape == b.shape, f"ssim: shape mismatch {a.shape} vs {b.shape}")
    require(a.ndim == 2, f"ssim expects 2-D grey images, got {a.shape}")
    require(min(a.shape) >= window, f"ssim: image {a.shape} smaller than the {window}-tap window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Fréchet distance


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        d = self.mean.shape[0]
        require(self.mean.ndim == 1 and self.covariance.shape == (d, d),
                f"stats: mean {self.mean.shape} and covariance {self.covariance.shape} disagree")
        require(np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-12),
                "stats: covariance is not symmetric")
        require(self.sample_count >= 2, "stats: need at least 2 samples")

    @classmethod
    def fit(cls, features: np.ndarray) -> "GaussianStats":
        """Mean and unbiased covariance; rows are sorted first so the result ignores sample order."""
        f = np.asarray(features, dtype=np.float64)
        require(f.ndim == 2 and f.shape[0] >= 2, f"fit needs an (n >= 2, d) feature matrix, got {f.shape}")
        f = f[np.lexsort(f.T[::-1])]
        mean = np.array([math.fsum(col) for col in f.T]) / f.shape[0]
        centred = f - mean
        cov = centred.T @ centred / (f.shape[0] - 1)
        return cls(mean, (cov + cov.T) / 2, f.shape[0])


def _psd_factor(cov: np.ndarray, what: str) -> np.ndarray:
    """``L`` with ``L @ L.T == cov``; eigenvalues within tolerance below zero are clipped."""
    w, u = np.linalg.eigh(cov)
    floor = -EIG_TOLERANCE * max(1.0, float(np.abs(w).max()))
    if w.min() < floor:
        raise NumericalError(f"{what} covariance has eigenvalue {w.min():.3e} below tolerance {floor:.1e}")
    return u * np.sqrt(np.clip(w, 0.0, None))


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """``|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2))``.

    With ``S = L L^T`` the trace of the square-root term equals the sum of
    singular values of ``L_p^T L_q``, which avoids taking square roots of
    the near-zero eigenvalues that rank-deficient sample covariances have.
    """
    require(p.mean.shape == q.mean.shape, f"frechet: dimensions {p.mean.shape} vs {q.mean.shape}")
    lp = _psd_factor(p.covariance, "first")
    lq = _psd_factor(q.covariance, "second")
    cross = float(np.linalg.svd(lp.T @ lq, compute_uv=False).sum())
    diff = p.mean - q.mean
    d = float(diff @ diff) + float(np.trace(p.covariance) + np.trace(q.covariance)) - 2.0 * cross
    return max(d, 0.0)


# ---------------------------------------------------------------------------
# FID-lite feature net


def build_fid_net(seed: int = FID_NET_SEED) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    net = {}
    for i, (o, c) in enumerate(FID_NET_LAYERS):
        net[f"w{i}"] = rng.standard_normal((o, c, 3, 3)) * math.sqrt(2.0 / (c * 9))
        net[f"b{i}"] = rng.uniform(-0.1, 0.1, o)
    return net


def load_fid_net() -> dict[str, np.ndarray]:
    """The frozen weights shipped in ``c2gm/data``."""
    with resources.files("c2gm").joinpath("data", FID_NET_FILE).open("rb") as fh:
        with np.load(fh) as data:
            return {k: data[k] for k in data.files}


def write_fid_net(path) -> None:
    np.savez(path, **build_fid_net())


_NET: dict[str, np.ndarray] | None = None


def fid_features(image: np.ndarray, net: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Per-channel mean and std of the last layer for one (H, W, 3) 0..255 image."""
    global _NET
    if net is None:
        if _NET is None:
            _NET = load_fid_net()
        net = _NET
    x = np.asarray(image, dtype=np.float64)
    require(x.ndim == 3 and x.shape[2] == 3, f"fid features need (H, W, 3) RGB, got {x.shape}")
    h = Tensor(x.transpose(2, 0, 1)[None] / 127.5 - 1.0)
    with no_grad():
        for i in range(len(FID_NET_LAYERS)):
            h = conv2d(h, Tensor(net[f"w{i}"]), Tensor(net[f"b{i}"]), stride=2, padding=1)
            h = Tensor(np.maximum(h.data, 0.2 * h.data))
    a = h.data[0].reshape(h.shape[1], -1)
    return np.concatenate([a.mean(axis=1), a.std(axis=1)])


def fid_lite(set_a, set_b) -> float:
    """Fréchet distance between Gaussian fits of frozen random-net features of two image sets."""
    require(len(set_a) >= 2 and len(set_b) >= 2, "fid_lite needs at least 2 images per set")
    fa = np.stack([fid_features(im) for im in set_a])
    fb = np.stack([fid_features(im) for im in set_b])
    return frechet_distance(GaussianStats.fit(fa), GaussianStats.fit(fb))


# ---------------------------------------------------------------------------
# reports


def format_metric(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.4f}"


@dataclass
class LevelRow:
    level: str
    n: int
    psnr: float
    ssim: float
    fid_lite: float


_LEVEL_DIR = re.compile(r"^\d+$")


_TILE_NAME = re.compile(r"^(\d+)_(\d+)$")


def _store_truth(truth_dir: Path, rel: Path) -> Path:
    """``{level}/{col}_{row}.png`` in a pyramid output maps to ``map/{level}/{col}/{row}.png`` in a tile store."""
    m = _TILE_NAME.match(rel.stem)
    if len(rel.parts) != 2 or not _LEVEL_DIR.match(rel.parts[0]) or m is None:
        return truth_dir / "unmatched" / rel
    return truth_dir / "map" / rel.parts[0] / m.group(1) / f"{m.group(2)}.png"


def _pairs(pred_dir: Path, truth_dir: Path, store_layout: bool) -> dict[str, list[tuple[Path, Path]]]:
    groups: dict[str, list[tuple[Path, Path]]] = {}
    missing = []
    for p in sorted(pred_dir.rglob("*.png")):
        rel = p.relative_to(pred_dir)
        if store_layout and len(rel.parts) == 1:
            continue  # stitched canvases have no per-tile truth
        t = _store_truth(truth_dir, rel) if store_layout else truth_dir / rel
        if not t.exists():
            missing.append(str(rel))
            continue
        level = rel.parts[0] if len(rel.parts) > 1 and _LEVEL_DIR.match(rel.parts[0]) else "-"
        groups.setdefault(level, []).append((p, t))
    require(not missing, f"no ground truth for {len(missing)} predictions: {', '.join(missing[:10])}")
    require(bool(groups), f"no PNG files under {pred_dir}")
    return groups


def evaluate_dirs(pred_dir, truth_dir, store_layout: bool = False, skip_levels=()) -> list[LevelRow]:
    """Per-level rows (plus ``all``) comparing each predicted PNG with its ground truth.

    By default truth files sit at the same relative paths. With
    ``store_layout`` the truth is a tile store and pyramid tiles
    ``{level}/{col}_{row}.png`` are compared with its map layer.
    """
    groups = _pairs(Path(pred_dir), Path(truth_dir), store_layout)
    for level in skip_levels:
        groups.pop(str(level), None)
    require(bool(groups), "nothing left to evaluate")
    rows = []
    everything = []
    for level in sorted(groups, key=lambda s: (not s.isdigit(), int(s) if s.isdigit() else 0, s)):
        pairs = groups[level]
        everything.extend(pairs)
        rows.append(_row(level, pairs))
    if len(groups) > 1:
        rows.append(_row("all", everything))
    return rows


def _row(level: str, pairs) -> LevelRow:
    """PSNR here comes from the MSE pooled over the group, so one exact tile does not make it infinite."""
    sq, count, ss, preds, truths = 0.0, 0, [], [], []
    for p, t in pairs:
        a, b = read_pixels(p), read_pixels(t)
        require(a.shape == b.shape, f"{p}: shape {a.shape} differs from truth {b.shape}")
        ya, yb = to_luma(a), to_luma(b)
        sq += float(np.sum((ya - yb) ** 2))
        count += ya.size
        ss.append(ssim(ya, yb) if min(ya.shape) >= 11 else math.nan)
        preds.append(a)
        truths.append(b)
    fid = fid_lite(preds, truths) if len(pairs) >= 2 else math.nan
    pooled = math.inf if sq == 0.0 else 10.0 * math.log10(255.0**2 / (sq / count))
    return LevelRow(level, len(pairs), pooled, float(np.mean(ss)), fid)


def format_report(rows: list[LevelRow]) -> str:
    lines = ["level\tn\tpsnr\tssim\tfid_lite"]
    for r in rows:
        lines.append(f"{r.level}\t{r.n}\t{format_metric(r.psnr)}\t{format_metric(r.ssim)}\t{format_metric(r.fid_lite)}")
    return "\n".join(lines) + "\n"
