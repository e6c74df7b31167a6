"""Procedural RS/map tile scenes used by the tests, the self-test and the desk training fixture.

A scene is a smooth land-use field rendered twice: once as a "map"
(flat palette colours with soft class borders) and once as a "remote
sensing" image (muted colours plus fine texture). Every scene is drawn
at its finest level; coarser levels are bicubic reductions of it, so
parents and children agree the way real tile pyramids do.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import build_cascade_ref
from .numerics import resample_bicubic_array
from .tiles import TileCoord, children, quadrant_path, scale_prompt, scale_record

MAP_PALETTE = np.array([
    [0.93, 0.91, 0.86],  # built-up
    [0.67, 0.84, 0.55],  # park
    [0.62, 0.78, 0.93],  # water
    [0.98, 0.85, 0.55],  # road fill
])
RS_PALETTE = np.array([
    [0.55, 0.52, 0.50],
    [0.25, 0.42, 0.22],
    [0.12, 0.22, 0.35],
    [0.45, 0.43, 0.38],
])


def _field(rng: np.random.Generator, size: int, waves: int = 6) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(waves):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    return out


def render_scene(size: int, seed: int, sharpness: float = 12.0) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(rs, map)`` images of shape (3, size, size) in [-1, 1]."""
    rng = np.random.default_rng(seed)
    logits = np.stack([_field(rng, size) for _ in range(len(MAP_PALETTE))]) * sharpness
    logits -= logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=0, keepdims=True)
    map_img = np.einsum("kc,khw->chw", MAP_PALETTE, w)
    rs_img = np.einsum("kc,khw->chw", RS_PALETTE, w) + 0.05 * rng.standard_normal((3, size, size))
    return np.clip(rs_img, 0, 1) * 2 - 1, np.clip(map_img, 0, 1) * 2 - 1


def reduce(image: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic reduction of a (C, H, W) image by ``factor``."""
    c, h, w = image.shape
    return resample_bicubic_array(image[None], h // factor, w // factor)[0]


@dataclass
class SceneTiles:
    """All tiles of one scene, keyed by global coordinate, for levels ``root.level .. root.level + depth``."""

    root: TileCoord
    depth: int
    tile_px: int
    rs: dict[TileCoord, np.ndarray]
    maps: dict[TileCoord, np.ndarray]


def make_scene(root: TileCoord, depth: int, tile_px: int, seed: int) -> SceneTiles:
    side = 2**depth
    rs_full, map_full = render_scene(side * tile_px, seed)
    rs, maps = {}, {}
    for d in range(depth + 1):
        f = 2 ** (depth - d)
        rs_l, map_l = (reduce(rs_full, f), reduce(map_full, f)) if f > 1 else (rs_full, map_full)
        for c in children(root, d):
            x0 = (c.col - (root.col << d)) * tile_px
            y0 = (c.row - (root.row << d)) * tile_px
            rs[c] = rs_l[:, y0 : y0 + tile_px, x0 : x0 + tile_px].copy()
            maps[c] = map_l[:, y0 : y0 + tile_px, x0 : x0 + tile_px].copy()
    return SceneTiles(root, depth, tile_px, rs, maps)


def write_source(root_dir, root: TileCoord, depth: int, tile_px: int, seed: int) -> SceneTiles:
    """Write a scene as a local tile source laid out ``{layer}/{z}/{x}/{y}.png``."""
    from .dataset import tile_path
    from .images import save_png

    tiles = make_scene(root, depth, tile_px, seed)
    for c in tiles.maps:
        save_png(tile_path(root_dir, "rs", c), tiles.rs[c])
        save_png(tile_path(root_dir, "map", c), tiles.maps[c])
    return tiles


@dataclass
class TrainingPairs:
    """Aligned arrays for the overfit fixture; images are (N, 3, H, W) in [-1, 1]."""

    maps: np.ndarray
    rs: np.ndarray
    refs: np.ndarray
    prompts: list[str]
    coords: list[TileCoord]


def overfit_pairs(count: int = 16, tile_px: int = 32, factor: int = 2, seed: int = 0,
                  levels: tuple[int, ...] = (15, 16, 17)) -> TrainingPairs:
    """``count`` child tiles drawn from scenes of ``factor**2`` children each (``factor`` is 2 or 4)."""
    depth = int(np.log2(factor))
    per_scene = 4**depth
    maps, rs, refs, prompts, coords = [], [], [], [], []
    scene = 0
    while len(maps) < count:
        level = levels[scene % len(levels)]
        root = TileCoord(level - depth, scene, 0)
        tiles = make_scene(root, depth, tile_px, seed * 1000 + scene)
        for c in children(root, depth)[: min(per_scene, count - len(maps))]:
            maps.append(tiles.maps[c])
            rs.append(tiles.rs[c])
            refs.append(build_cascade_ref(tiles.maps[root], quadrant_path(c, depth)))
            prompts.append(scale_prompt(scale_record(c.level)))
            coords.append(c)
        scene += 1
    return TrainingPairs(np.stack(maps), np.stack(rs), np.stack(refs), prompts, coords)
