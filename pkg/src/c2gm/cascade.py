"""Self-cascading generation: parents condition children, stages recurse, tiles stitch into canvases."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

import numpy as np

from .codec import ExactCodec, LatentSpec
from .diffusion import NoiseSchedule, NoiseSource, SamplerSpec, desk_schedule, sample
from .images import save_png
from .numerics import ContractViolation, NonFiniteError, require, resample_bicubic_array
from .tiles import StagePlan, TileCoord, children, parent, scale_prompt, scale_record

MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def tile_seed(global_seed: int, coord: TileCoord) -> int:
    """Per-tile 64-bit seed.

    ``(level, col, row)`` is packed into 64 bits (6 + 29 + 29) and pushed
    through the splitmix64 finaliser, which is a bijection, then XORed
    with a hash of the global seed. Distinct coordinates therefore never
    collide for a fixed global seed.
    """
    require(0 <= coord.level < 64 and 0 <= coord.col < 2**29 and 0 <= coord.row < 2**29,
            f"tile_seed: {coord} outside the packable range")
    packed = (coord.level << 58) | (coord.col << 29) | coord.row
    return _splitmix64(packed) ^ _splitmix64(global_seed & MASK64)


class CascadeError(RuntimeError):
    pass


class TileGenerationError(CascadeError):
    def __init__(self, coord: TileCoord, detail: str):
        super().__init__(f"tile {coord}: {detail}")
        self.coord = coord


class MissingTilesError(CascadeError, ContractViolation):
    def __init__(self, what: str, coords):
        coords = sorted(coords)
        shown = ", ".join(str(c) for c in coords[:20]) + (" ..." if len(coords) > 20 else "")
        super().__init__(f"{len(coords)} missing {what}: {shown}")
        self.coords = coords


class TileDenoiser(Protocol):
    def generate(self, reference: np.ndarray, rs_image: np.ndarray, prompt: str,
                 sampler: SamplerSpec, seed: int) -> np.ndarray: ...


class MockDenoiser:
    """Oracle generator whose clean-latent estimate is always the encoded cascade reference.

    Its noise estimate is the one consistent with that clean latent,
    ``(z_t - sqrt(abar_t) E(ref)) / sqrt(1 - abar_t)``, so any sampler
    returns ``E(ref)`` and the decoded tile equals the reference.
    """

    def __init__(self, spec: LatentSpec = LatentSpec(factor=8), schedule: NoiseSchedule | None = None):
        self.codec = ExactCodec(spec)
        self.schedule = schedule if schedule is not None else desk_schedule(50)

    def generate(self, reference, rs_image, prompt, sampler, seed):
        z_ref = self.codec.encode(np.asarray(reference, dtype=np.float64)[None]).data
        ab_table = self.schedule

        def eps_fn(z, t):
            ab = ab_table.alpha_bar_at(t)
            return (z - np.sqrt(ab) * z_ref) / np.sqrt(1.0 - ab)

        z0 = sample(eps_fn, z_ref.shape, self.schedule, sampler, NoiseSource(seed))
        return np.clip(self.codec.decode(z0).data[0], -1.0, 1.0)


class ModelDenoiser:
    """Adapter from a trained generator bundle to the per-tile interface (one tile per call)."""

    def __init__(self, model):
        self.model = model

    def generate(self, reference, rs_image, prompt, sampler, seed):
        out = self.model.generate(np.asarray(rs_image)[None], np.asarray(reference)[None], [prompt],
                                  sampler, NoiseSource(seed))
        return out[0].astype(np.float64)


def generate_tile(reference, rs_image, child_coord: TileCoord, sampler: SamplerSpec, seed: int,
                  denoiser: TileDenoiser) -> np.ndarray:
    """Generate one child tile from its prepared cascade reference and RS tile."""
    prompt = scale_prompt(scale_record(child_coord.level))
    try:
        out = denoiser.generate(reference, rs_image, prompt, sampler, seed)
    except NonFiniteError as exc:
        raise TileGenerationError(child_coord, f"sampler diverged ({exc})") from exc
    if not np.isfinite(out).all():
        raise TileGenerationError(child_coord, "sampler produced non-finite pixels")
    return out


# ---------------------------------------------------------------------------
# stitching and references


def stitch(tiles: Mapping[TileCoord, np.ndarray], plan: StagePlan | None = None) -> np.ndarray:
    """Place a complete rectangular set of same-level tiles on one canvas (no blending).

    The canvas origin is the top-left tile of the set.
    """
    require(len(tiles) > 0, "stitch: no tiles")
    levels = {c.level for c in tiles}
    require(len(levels) == 1, f"stitch: tiles span levels {sorted(levels)}")
    (level,) = levels
    cols = [c.col for c in tiles]
    rows = [c.row for c in tiles]
    c0, r0 = min(cols), min(rows)
    nc, nr = max(cols) - c0 + 1, max(rows) - r0 + 1
    gaps = [TileCoord(level, c, r) for r in range(r0, r0 + nr) for c in range(c0, c0 + nc)
            if TileCoord(level, c, r) not in tiles]
    if gaps:
        raise MissingTilesError("tiles in stitch rectangle", gaps)
    first = next(iter(tiles.values()))
    ch, th, tw = first.shape
    if plan is not None:
        require((th, tw) == (plan.tile_h, plan.tile_w), f"stitch: tiles are {th}x{tw}, plan says "
                                                        f"{plan.tile_h}x{plan.tile_w}")
    canvas = np.empty((ch, nr * th, nc * tw), dtype=first.dtype)
    for c, img in tiles.items():
        require(img.shape == first.shape, f"stitch: tile {c} has shape {img.shape}, expected {first.shape}")
        y, x = (c.row - r0) * th, (c.col - c0) * tw
        canvas[:, y : y + th, x : x + tw] = img
    return canvas


@dataclass
class Scene:
    """A stitched block of same-level tiles whose top-left tile is ``origin``."""

    origin: TileCoord
    canvas: np.ndarray
    tile_h: int
    tile_w: int

    def contains(self, coord: TileCoord) -> bool:
        _, H, W = self.canvas.shape
        return (coord.level == self.origin.level
                and 0 <= coord.col - self.origin.col < W // self.tile_w
                and 0 <= coord.row - self.origin.row < H // self.tile_h)


def prepare_reference(scene: Scene, child: TileCoord, n: int) -> np.ndarray:
    """Cascade reference for ``child``: its parent quadrant, bicubic-upsampled by ``2**n`` to tile size.

    The result is the child's window of the upsampled scene canvas, so
    neighbouring parents act as resampling support and adjacent
    references agree across tile borders.
    """
    require(scene.contains(parent(child, n)), f"parent of {child} is not in the scene at {scene.origin}")
    _, H, W = scene.canvas.shape
    scale = 2**n
    y0 = (child.row - (scene.origin.row << n)) * scene.tile_h
    x0 = (child.col - (scene.origin.col << n)) * scene.tile_w
    return resample_bicubic_array(scene.canvas[None], H * scale, W * scale,
                                  rows=slice(y0, y0 + scene.tile_h), cols=slice(x0, x0 + scene.tile_w))[0]


def _scenes(tiles: Mapping[TileCoord, np.ndarray], roots: list[TileCoord]) -> list[Scene]:
    """One stitched scene per seed root (the set of tiles descending from it)."""
    out = []
    for root in roots:
        own = {c: img for c, img in tiles.items() if parent(c, c.level - root.level) == root}
        first = next(iter(own.values()))
        d = first.shape
        d_level = next(iter(own)).level - root.level
        origin = TileCoord(root.level + d_level, root.col << d_level, root.row << d_level)
        out.append(Scene(origin, stitch(own), d[1], d[2]))
    return out


# ---------------------------------------------------------------------------
# stage loop


RSProvider = Callable[[TileCoord], "np.ndarray | None"]


@dataclass
class CascadeJob:
    seed_tiles: dict[TileCoord, np.ndarray]
    rs_provider: RSProvider
    plan: StagePlan
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    global_seed: int = 0

    def __post_init__(self):
        require(len(self.seed_tiles) > 0, "cascade job needs at least one seed tile")
        bad = [c for c in self.seed_tiles if c.level != self.plan.base_level]
        require(not bad, f"seed tiles not at base level {self.plan.base_level}: {bad[:5]}")


@dataclass
class PyramidResult:
    tiles: dict[int, dict[TileCoord, np.ndarray]]
    canvases: dict[int, np.ndarray]
    provenance: list[dict]

    @property
    def levels(self) -> list[int]:
        return sorted(self.tiles)

    def generated_count(self) -> int:
        base = min(self.tiles)
        return sum(len(t) for lvl, t in self.tiles.items() if lvl != base)


def _fetch_rs(provider: RSProvider, coords: list[TileCoord]) -> dict[TileCoord, np.ndarray]:
    found, missing = {}, []
    for c in coords:
        try:
            img = provider(c)
        except (KeyError, FileNotFoundError):
            img = None
        if img is None:
            missing.append(c)
        else:
            found[c] = img
    if missing:
        raise MissingTilesError("rs tiles", missing)
    return found


def run_stage(level_tiles: Mapping[TileCoord, np.ndarray], roots: list[TileCoord], job: CascadeJob,
              denoiser: TileDenoiser, workers: int = 1) -> tuple[dict[TileCoord, np.ndarray], list[dict]]:
    """Generate the ``4**n`` children of every input tile; returns the tiles and their provenance records.

    All RS tiles are looked up before any generation starts. Work items
    are independent and seeded by coordinate, so the result does not
    depend on ``workers`` or execution order.
    """
    n = job.plan.step
    kids = [k for c in sorted(level_tiles) for k in children(c, n)]
    rs = _fetch_rs(job.rs_provider, kids)
    scenes = _scenes(level_tiles, roots)

    def scene_of(c: TileCoord) -> Scene:
        return next(s for s in scenes if s.contains(parent(c, n)))

    def work(c: TileCoord) -> np.ndarray:
        ref = prepare_reference(scene_of(c), c, n)
        return generate_tile(ref, rs[c], c, job.sampler, tile_seed(job.global_seed, c), denoiser)

    if workers <= 1:
        images = [work(c) for c in kids]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(work, kids))
    records = [{
        "level": c.level, "col": c.col, "row": c.row, "parent": str(parent(c, n)),
        "seed": tile_seed(job.global_seed, c), "prompt": scale_prompt(scale_record(c.level)),
        "sampler": job.sampler.kind, "steps": job.sampler.steps if job.sampler.kind == "ddim" else None,
    } for c in kids]
    return dict(zip(kids, images)), records


def _level_canvas(tiles: Mapping[TileCoord, np.ndarray]) -> np.ndarray | None:
    try:
        return stitch(tiles)
    except MissingTilesError:
        return None


def run_cascade(job: CascadeJob, denoiser: TileDenoiser, workers: int = 1,
                log: Callable[[str], None] | None = None) -> PyramidResult:
    """Apply ``run_stage`` ``m`` times starting from the seed tiles.

    ``canvases`` holds one stitched image per level whose tiles form a
    complete rectangle (always the case for a single seed). Tiles are
    stored as views into their level canvas where one exists.
    """
    roots = sorted(job.seed_tiles)
    tiles = {job.plan.base_level: dict(job.seed_tiles)}
    canvases = {}
    provenance: list[dict] = []
    current = tiles[job.plan.base_level]
    canvas = _level_canvas(current)
    if canvas is not None:
        canvases[job.plan.base_level] = canvas
    for j in range(1, job.plan.stages + 1):
        try:
            current, records = run_stage(current, roots, job, denoiser, workers)
        except MissingTilesError as exc:
            raise MissingTilesError(f"rs tiles for stage {j}", exc.coords) from exc
        except CascadeError as exc:
            raise CascadeError(f"stage {j} (level {job.plan.level(j)}): {exc}") from exc
        level = job.plan.level(j)
        canvas = _level_canvas(current)
        if canvas is not None:
            canvases[level] = canvas
            current = _views(canvas, current)
        tiles[level] = current
        provenance.extend(records)
        if log is not None:
            log(f"stage {j}: level {level}, {len(current)} tiles")
    return PyramidResult(tiles, canvases, provenance)


def _views(canvas: np.ndarray, tiles: Mapping[TileCoord, np.ndarray]) -> dict[TileCoord, np.ndarray]:
    c0 = min(c.col for c in tiles)
    r0 = min(c.row for c in tiles)
    _, th, tw = next(iter(tiles.values())).shape
    return {c: canvas[:, (c.row - r0) * th : (c.row - r0 + 1) * th, (c.col - c0) * tw : (c.col - c0 + 1) * tw]
            for c in tiles}


def write_pyramid(result: PyramidResult, out_dir) -> None:
    """``out_dir/{level}/{col}_{row}.png``, ``canvas_{level}.png`` and ``provenance.jsonl``.

    Canvases are written for generated levels only; the seed level is an input.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for level, tiles in result.tiles.items():
        for c, img in tiles.items():
            save_png(out / str(level) / f"{c.col}_{c.row}.png", img)
    base = min(result.tiles)
    for level, canvas in result.canvases.items():
        if level == base:
            continue
        save_png(out / f"canvas_{level}.png", canvas)
    with open(out / "provenance.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.provenance:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# continuity measure


def seam_score(canvas: np.ndarray, tile_px: int) -> float:
    """Mean |step| across tile borders minus mean |step| one pixel either side of them.

    Steps are taken along the axis crossing each border and compared on
    the same rows (or columns). An image that is affine across each
    border scores exactly 0, a smooth curved one scores only its local
    curvature, and a visible seam scores its excess jump.
    """
    img = np.asarray(canvas, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    _, H, W = img.shape
    require(H % tile_px == 0 and W % tile_px == 0, f"canvas {H}x{W} is not a multiple of tile size {tile_px}")
    border, inner = [], []
    for axis, size in ((2, W), (1, H)):
        for b in range(tile_px, size, tile_px):
            step = lambda i: np.abs(np.take(img, i, axis=axis) - np.take(img, i - 1, axis=axis))  # noqa: E731
            border.append(step(b).ravel())
            if b - 1 >= 1:
                inner.append(step(b - 1).ravel())
            if b + 1 < size:
                inner.append(step(b + 1).ravel())
    if not border:
        return 0.0
    inner_mean = float(np.mean(np.concatenate(inner))) if inner else 0.0
    return float(np.mean(np.concatenate(border))) - inner_mean
