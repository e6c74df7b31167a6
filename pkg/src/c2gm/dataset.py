"""Paired RS/map tile corpora: ingestion, cascade references, region splits and the manifest."""
from __future__ import annotations

import logging
import os
import shutil
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .images import from_uint8, load_png, read_pixels, save_png_bytes, to_uint8
from .numerics import ContractViolation, require, resample_bicubic_array
from .tiles import ScaleRecord, TileCoord, children, parent, quadrant_path, scale_prompt, scale_record

log = logging.getLogger(__name__)

LAYERS = ("rs", "map")
KEY_ENV = "C2GM_TILE_KEY"
MANIFEST_VERSION = 1
FIELDS = ("z", "x", "y", "split", "factor", "rs_path", "map_path", "ref_path",
          "scale_denominator", "resolution_m_per_px")


def tile_path(store, layer: str, c: TileCoord) -> Path:
    return Path(store) / layer / str(c.level) / str(c.col) / f"{c.row}.png"


def region_tiles(roots: Iterable[TileCoord], depth: int) -> list[TileCoord]:
    """Every tile of the quadtrees below ``roots`` down to ``depth`` levels, roots included."""
    return [c for r in roots for d in range(depth + 1) for c in children(r, d)]


# ---------------------------------------------------------------------------
# ingestion


class LocalSource:
    """Tiles laid out as ``root/{layer}/{z}/{x}/{y}.png``."""

    def __init__(self, root):
        self.root = Path(root)

    def fetch(self, layer: str, c: TileCoord) -> bytes | None:
        path = tile_path(self.root, layer, c)
        return path.read_bytes() if path.exists() else None


class RateLimiter:
    """Spaces calls at least ``1 / rate`` seconds apart across all threads."""

    def __init__(self, rate: float):
        require(rate > 0, "rate limit must be positive")
        self.interval = 1.0 / rate
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next)
            self._next = slot + self.interval
        delay = slot - now
        if delay > 0:
            time.sleep(delay)


class UrlSource:
    """XYZ endpoint per layer; templates use ``{z}``, ``{x}``, ``{y}`` and optionally ``{key}``.

    The key comes from the ``C2GM_TILE_KEY`` environment variable. HTTP
    404 is reported as missing; other failures are retried with
    exponential back-off and then raised.
    """

    def __init__(self, templates: dict[str, str], rate: float = 2.0, retries: int = 3,
                 timeout: float = 20.0, backoff: float = 0.5):
        self.templates = templates
        self.limiter = RateLimiter(rate)
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff
        self.key = os.environ.get(KEY_ENV, "")

    def url(self, layer: str, c: TileCoord) -> str:
        require(layer in self.templates, f"no URL template for layer {layer!r}")
        return self.templates[layer].format(z=c.level, x=c.col, y=c.row, key=self.key)

    def fetch(self, layer: str, c: TileCoord) -> bytes | None:
        url = self.url(layer, c)
        for attempt in range(self.retries + 1):
            self.limiter.wait()
            try:
                with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                    return resp.read()
            except urllib.error.HTTPError as exc:
                if exc.code == 404:
                    return None
                err = exc
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                err = exc
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise OSError(f"{layer} {c}: {err}")


@dataclass
class IngestReport:
    fetched: int = 0
    skipped: int = 0
    missing: list[tuple[str, TileCoord]] = field(default_factory=list)
    failed: list[tuple[str, TileCoord, str]] = field(default_factory=list)
    quarantined: list[tuple[str, TileCoord]] = field(default_factory=list)


def _valid_png(blob: bytes) -> bool:
    import io

    try:
        read_pixels(io.BytesIO(blob))
        return True
    except Exception:  # any decoder error means the payload is unusable
        return False


def ingest_tiles(source, tiles: Iterable[TileCoord], store, layers=LAYERS, workers: int = 4) -> IngestReport:
    """Copy/download ``tiles`` into ``store/{layer}/{z}/{x}/{y}.png``.

    Present files are skipped, so re-runs are idempotent and resumable.
    Undecodable payloads go to ``store/quarantine/``; fetch failures are
    logged with their coordinates and the run continues.
    """
    store = Path(store)
    report = IngestReport()
    lock = threading.Lock()
    jobs = [(layer, c) for c in tiles for layer in layers]

    def one(job):
        layer, c = job
        dest = tile_path(store, layer, c)
        if dest.exists():
            with lock:
                report.skipped += 1
            return
        try:
            blob = source.fetch(layer, c)
        except OSError as exc:
            log.warning("fetch failed for %s %s: %s", layer, c, exc)
            with lock:
                report.failed.append((layer, c, str(exc)))
            return
        if blob is None:
            with lock:
                report.missing.append((layer, c))
            return
        if not _valid_png(blob):
            q = tile_path(store / "quarantine", layer, c)
            q.parent.mkdir(parents=True, exist_ok=True)
            q.write_bytes(blob)
            log.warning("quarantined undecodable tile %s %s", layer, c)
            with lock:
                report.quarantined.append((layer, c))
            return
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = dest.with_suffix(".part")
        tmp.write_bytes(blob)
        tmp.replace(dest)
        with lock:
            report.fetched += 1

    if workers <= 1:
        for job in jobs:
            one(job)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, jobs))
    report.missing.sort()
    report.failed.sort()
    report.quarantined.sort()
    return report


# ---------------------------------------------------------------------------
# cascade references


def build_cascade_ref(ancestor: np.ndarray, path: list[tuple[int, int]], factor: int | None = None) -> np.ndarray:
    """Reference for the sub-tile of ``ancestor`` reached by ``path``, at the ancestor's size.

    Each ``(dx, dy)`` step selects the right/bottom half when set; one
    step is a 2X reference (half-size crop), two steps 4X. The crop is
    read from the bicubic upsample of the whole ancestor, so pixels at
    the crop border use their true neighbours as resampling support.
    """
    if factor is not None:
        require(factor == 2 ** len(path), f"a {factor}X reference needs a path of length {int(np.log2(factor))}")
    require(ancestor.ndim == 3, f"ancestor must be (C, H, W), got {ancestor.shape}")
    _, h, w = ancestor.shape
    scale = 2 ** len(path)
    require(h % scale == 0 and w % scale == 0, f"ancestor {h}x{w} not divisible by {scale}")
    x0 = y0 = 0
    size_h, size_w = h, w
    for dx, dy in path:
        require(dx in (0, 1) and dy in (0, 1), f"quadrant steps must be 0/1, got {(dx, dy)}")
        size_h //= 2
        size_w //= 2
        x0 += dx * size_w
        y0 += dy * size_h
    rows = slice(y0 * scale, (y0 + size_h) * scale)
    cols = slice(x0 * scale, (x0 + size_w) * scale)
    return resample_bicubic_array(ancestor[None], h * scale, w * scale, rows=rows, cols=cols)[0]


def reference_pixels(ancestor_png, child: TileCoord, factor: int) -> np.ndarray:
    """8-bit reference exactly as stored in the dataset, regenerated from the ancestor file."""
    n = int(np.log2(factor))
    return to_uint8(build_cascade_ref(load_png(ancestor_png), quadrant_path(child, n), factor))


# ---------------------------------------------------------------------------
# splits


def split_regions(roots: Iterable[TileCoord], test_fraction: float, seed: int = 0) -> dict[TileCoord, str]:
    """Assign whole base-level families to ``train`` or ``test``."""
    roots = sorted(set(roots))
    require(0.0 < test_fraction < 1.0, "test_fraction must be in (0, 1)")
    n_test = int(round(len(roots) * test_fraction))
    require(0 < n_test < len(roots),
            f"split of {len(roots)} roots at fraction {test_fraction} leaves an empty side")
    order = np.random.default_rng(seed).permutation(len(roots))
    test = {roots[i] for i in order[:n_test]}
    return {r: ("test" if r in test else "train") for r in roots}


def footprint(c: TileCoord, level: int) -> tuple[int, int, int, int]:
    """Half-open ``(x0, y0, x1, y1)`` extent of ``c`` in tile units of ``level`` (>= c.level)."""
    s = 2 ** (level - c.level)
    return c.col * s, c.row * s, (c.col + 1) * s, (c.row + 1) * s


def footprints_intersect(a: TileCoord, b: TileCoord) -> bool:
    level = max(a.level, b.level)
    ax0, ay0, ax1, ay1 = footprint(a, level)
    bx0, by0, bx1, by1 = footprint(b, level)
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class SamplePair:
    coord: TileCoord
    split: str
    factor: int
    rs_path: str
    map_path: str
    ref_path: str
    scale_denominator: int
    resolution: float

    @property
    def scale(self) -> ScaleRecord:
        return ScaleRecord(self.coord.level, self.scale_denominator, self.resolution,
                           scale_record(self.coord.level).feature_text)

    @property
    def prompt(self) -> str:
        return scale_prompt(self.scale)

    @property
    def ancestor(self) -> TileCoord:
        return parent(self.coord, int(np.log2(self.factor)))


@dataclass
class DatasetManifest:
    version: int
    tile_px: int
    counts: dict[int, int]
    records: list[SamplePair]

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            f"# c2gm-manifest\tversion={self.version}",
            f"# tile_px={self.tile_px}",
            "# counts=" + ",".join(f"{z}:{n}" for z, n in sorted(self.counts.items())),
            "\t".join(FIELDS),
        ]
        for r in self.records:
            c = r.coord
            lines.append("\t".join([str(c.level), str(c.col), str(c.row), r.split, f"{r.factor}X",
                                    r.rs_path, r.map_path, r.ref_path,
                                    str(r.scale_denominator), repr(r.resolution)]))
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        meta: dict[str, str] = {}
        records = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            if line.startswith("#"):
                for part in line[1:].strip().split("\t"):
                    if "=" in part:
                        k, v = part.split("=", 1)
                        meta[k.strip()] = v.strip()
                continue
            cells = line.split("\t")
            if cells[0] == FIELDS[0]:
                require(tuple(cells) == FIELDS, f"{path}: unexpected field header {cells}")
                continue
            require(len(cells) == len(FIELDS), f"{path}: malformed record {line!r}")
            z, x, y = (int(v) for v in cells[:3])
            records.append(SamplePair(TileCoord(z, x, y), cells[3], int(cells[4].rstrip("X")),
                                      cells[5], cells[6], cells[7], int(cells[8]), float(cells[9])))
        require("version" in meta and "tile_px" in meta, f"{path}: missing manifest header")
        version = int(meta["version"])
        require(version == MANIFEST_VERSION, f"{path}: unsupported manifest version {version}")
        counts = {}
        if meta.get("counts"):
            for item in meta["counts"].split(","):
                z, n = item.split(":")
                counts[int(z)] = int(n)
        return cls(version, int(meta["tile_px"]), counts, records)

    def split(self, name: str) -> list[SamplePair]:
        return [r for r in self.records if r.split == name]


class InconsistentStoreError(ContractViolation):
    pass


def _scan(store: Path, layer: str) -> set[TileCoord]:
    out = set()
    base = store / layer
    if not base.exists():
        return out
    for png in base.glob("*/*/*.png"):
        z, x = png.parent.parent.name, png.parent.name
        if z.isdigit() and x.isdigit() and png.stem.isdigit():
            out.add(TileCoord(int(z), int(x), int(png.stem)))
    return out


def complete_families(store, tile_px: int) -> tuple[list[TileCoord], int, list[TileCoord]]:
    """Check the store and return ``(complete_roots, depth, excluded_roots)``.

    Roots are the tiles at the lowest level present. A family missing a
    tile in both layers is excluded. A tile present in only one layer,
    or a file of the wrong size, makes the store inconsistent.
    """
    store = Path(store)
    rs, maps = _scan(store, "rs"), _scan(store, "map")
    one_sided = sorted(rs ^ maps)
    if one_sided:
        raise InconsistentStoreError(
            "tiles present in only one layer: " + ", ".join(str(c) for c in one_sided[:20]))
    require(bool(maps), f"store {store} holds no tiles")
    bad = []
    for c in sorted(maps):
        for layer in LAYERS:
            with_size = read_pixels(tile_path(store, layer, c)).shape
            if with_size != (tile_px, tile_px, 3):
                bad.append(f"{layer} {c} {with_size[1]}x{with_size[0]}")
    if bad:
        raise InconsistentStoreError(f"tiles not {tile_px}x{tile_px} RGB: " + ", ".join(bad[:20]))
    base = min(c.level for c in maps)
    depth = max(c.level for c in maps) - base
    roots = sorted(c for c in maps if c.level == base)
    complete, excluded = [], []
    for r in roots:
        family = region_tiles([r], depth)
        if all(c in maps for c in family):
            complete.append(r)
        else:
            excluded.append(r)
            log.info("excluding incomplete family rooted at %s", r)
    orphans = sorted(c for c in maps if parent(c, c.level - base) not in roots)
    if orphans:
        raise InconsistentStoreError("tiles without a base-level root: " + ", ".join(str(c) for c in orphans[:20]))
    return complete, depth, excluded


def build_manifest(store, factor: int = 2, splits: dict[TileCoord, str] | None = None,
                   test_fraction: float = 0.2, seed: int = 0, tile_px: int = 256,
                   path=None) -> DatasetManifest:
    """Index every complete family member above the base level and write its cascade reference.

    References go to ``store/ref{factor}x/{z}/{x}/{y}.png`` and derive
    from the map-layer ancestor ``log2(factor)`` levels up. The base
    level has no ancestor and is seed-only. Paths in the manifest are
    relative to ``store``.
    """
    require(factor in (2, 4), f"cascade factor must be 2 or 4, got {factor}")
    store = Path(store)
    roots, depth, _ = complete_families(store, tile_px)
    require(bool(roots), "no complete tile family in store")
    if splits is None:
        splits = split_regions(roots, test_fraction, seed) if len(roots) > 1 else {roots[0]: "train"}
    missing = [r for r in roots if r not in splits]
    require(not missing, f"no split assignment for roots {missing[:5]}")
    n = int(np.log2(factor))
    ref_layer = f"ref{factor}x"
    records = []
    counts: dict[int, int] = {}
    for r in roots:
        for d in range(n, depth + 1):
            for c in children(r, d):
                ref_file = tile_path(store, ref_layer, c)
                pixels = reference_pixels(tile_path(store, "map", parent(c, n)), c, factor)
                if not ref_file.exists() or not np.array_equal(read_pixels(ref_file), pixels):
                    save_png_bytes(ref_file, pixels)
                rec = scale_record(c.level)
                records.append(SamplePair(
                    c, splits[r], factor,
                    tile_path(store, "rs", c).relative_to(store).as_posix(),
                    tile_path(store, "map", c).relative_to(store).as_posix(),
                    ref_file.relative_to(store).as_posix(),
                    rec.scale_denominator, rec.resolution,
                ))
                counts[c.level] = counts.get(c.level, 0) + 1
    manifest = DatasetManifest(MANIFEST_VERSION, tile_px, counts, records)
    manifest.write(path if path is not None else store / f"manifest_{factor}x.tsv")
    return manifest


def verify_references(manifest: DatasetManifest, store) -> list[TileCoord]:
    """Coordinates whose stored reference differs from one regenerated from its ancestor."""
    store = Path(store)
    bad = []
    for r in manifest.records:
        regen = reference_pixels(tile_path(store, "map", r.ancestor), r.coord, r.factor)
        if not np.array_equal(regen, read_pixels(store / r.ref_path)):
            bad.append(r.coord)
    return bad


def load_pairs(manifest: DatasetManifest, store, split: str | None = None):
    """``(maps, rs, refs, prompts, coords)`` arrays in [-1, 1] for the selected records."""
    store = Path(store)
    recs = manifest.records if split is None else manifest.split(split)
    require(bool(recs), f"no records for split {split!r}")
    maps = np.stack([from_uint8(read_pixels(store / r.map_path)) for r in recs])
    rs = np.stack([from_uint8(read_pixels(store / r.rs_path)) for r in recs])
    refs = np.stack([from_uint8(read_pixels(store / r.ref_path)) for r in recs])
    return maps, rs, refs, [r.prompt for r in recs], [r.coord for r in recs]


def clear_layer(store, layer: str) -> None:
    shutil.rmtree(Path(store) / layer, ignore_errors=True)
