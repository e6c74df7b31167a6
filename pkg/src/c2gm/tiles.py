"""Quadtree tile addressing, per-level scale metadata and cascade stage arithmetic."""
from __future__ import annotations

from dataclasses import dataclass

from .numerics.tensor import require


@dataclass(frozen=True, order=True)
class TileCoord:
    level: int
    col: int
    row: int

    def __post_init__(self):
        require(self.level >= 0, f"tile level must be >= 0, got {self.level}")
        require(self.col >= 0 and self.row >= 0, f"tile col/row must be >= 0, got {self}")

    def __str__(self) -> str:
        return f"{self.level}/{self.col}/{self.row}"

    @classmethod
    def parse(cls, text: str) -> "TileCoord":
        z, x, y = (int(v) for v in text.replace(",", "/").split("/"))
        return cls(z, x, y)

    def check_global(self) -> None:
        require(self.col < 2**self.level and self.row < 2**self.level, f"{self} outside the level-{self.level} grid")


def children(t: TileCoord, n: int) -> list[TileCoord]:
    """The ``4**n`` tiles at ``t.level + n`` covering ``t``, row-major."""
    require(n >= 0, "children: n must be >= 0")
    side = 2**n
    return [
        TileCoord(t.level + n, t.col * side + dx, t.row * side + dy)
        for dy in range(side)
        for dx in range(side)
    ]


def parent(t: TileCoord, n: int = 1) -> TileCoord:
    require(n >= 0 and t.level - n >= 0, f"parent: cannot go {n} levels up from {t}")
    return TileCoord(t.level - n, t.col >> n, t.row >> n)


def quadrant_path(t: TileCoord, n: int) -> list[tuple[int, int]]:
    """(col_bit, row_bit) choices leading from ``parent(t, n)`` down to ``t``, top level first."""
    require(n >= 0 and t.level - n >= 0, f"quadrant_path: cannot go {n} levels up from {t}")
    return [((t.col >> s) & 1, (t.row >> s) & 1) for s in range(n - 1, -1, -1)]


def to_local(t: TileCoord, seed: TileCoord) -> TileCoord:
    """Offset of ``t`` from the footprint origin of ``seed`` (scene-local addressing)."""
    d = t.level - seed.level
    require(d >= 0 and parent(t, d) == seed, f"{t} is not inside {seed}")
    return TileCoord(t.level, t.col - (seed.col << d), t.row - (seed.row << d))


def to_global(local: TileCoord, seed: TileCoord) -> TileCoord:
    d = local.level - seed.level
    require(d >= 0 and local.col < 2**d and local.row < 2**d, f"{local} outside seed {seed}")
    return TileCoord(local.level, (seed.col << d) + local.col, (seed.row << d) + local.row)


# ---------------------------------------------------------------------------
# scale metadata


@dataclass(frozen=True)
class ScaleRecord:
    level: int
    scale_denominator: int
    resolution: float  # metres per pixel
    feature_text: str


SCALE_TABLE: dict[int, ScaleRecord] = {
    14: ScaleRecord(14, 35000, 9.555, "village, or suburb"),
    15: ScaleRecord(15, 15000, 4.777, "small road"),
    16: ScaleRecord(16, 8000, 2.389, "street"),
    17: ScaleRecord(17, 4000, 1.194, "block, park, addresses"),
    18: ScaleRecord(18, 2000, 0.597, "some buildings, trees"),
}


# deepest level whose extrapolated scale denominator still strictly decreases
MAX_LEVEL = 26


def scale_record(level: int) -> ScaleRecord:
    """Table-driven for levels 14-18; halves resolution (and scale) per level outside it."""
    require(0 <= level <= MAX_LEVEL, f"scale_record: level must be in [0, {MAX_LEVEL}], got {level}")
    if level in SCALE_TABLE:
        return SCALE_TABLE[level]
    lo, hi = min(SCALE_TABLE), max(SCALE_TABLE)
    anchor = SCALE_TABLE[lo if level < lo else hi]
    factor = 2.0 ** (level - anchor.level)
    return ScaleRecord(
        level,
        int(round(anchor.scale_denominator / factor)),
        anchor.resolution / factor,
        anchor.feature_text,
    )


def _fmt_number(v: float) -> str:
    return f"{v:.6f}".rstrip("0").rstrip(".")


def scale_prompt(rec: ScaleRecord) -> str:
    return (
        f"level {rec.level}; scale 1:{rec.scale_denominator}; "
        f"resolution {_fmt_number(rec.resolution)} m/pixel; features: {rec.feature_text}"
    )


# ---------------------------------------------------------------------------
# stage arithmetic


@dataclass(frozen=True)
class StagePlan:
    base_level: int
    step: int = 1
    stages: int = 1
    tile_h: int = 256
    tile_w: int = 256

    def __post_init__(self):
        require(self.base_level >= 0, "StagePlan: base_level must be >= 0")
        require(self.step >= 1, "StagePlan: step n must be >= 1")
        require(self.stages >= 0, "StagePlan: stages m must be >= 0")
        require(self.tile_h >= 1 and self.tile_w >= 1, "StagePlan: tile extents must be >= 1")

    def level(self, j: int) -> int:
        return self.base_level + self.step * j

    def levels(self) -> list[int]:
        return [self.level(j) for j in range(1, self.stages + 1)]

    def tiles_at_stage(self, j: int, seeds: int = 1) -> int:
        return seeds * 4 ** (self.step * j)

    def total_tiles(self, seeds: int = 1) -> int:
        return sum(self.tiles_at_stage(j, seeds) for j in range(1, self.stages + 1))


@dataclass(frozen=True)
class StageGeometry:
    stage: int
    level: int
    tiles_per_side: int
    canvas_h: int
    canvas_w: int

    @property
    def tile_count(self) -> int:
        return self.tiles_per_side**2

    def offset(self, col: int, row: int, tile_h: int, tile_w: int) -> tuple[int, int]:
        """(x, y) pixel offset of a scene-local tile inside the stage canvas."""
        require(0 <= col < self.tiles_per_side and 0 <= row < self.tiles_per_side,
                f"tile ({col},{row}) outside a {self.tiles_per_side}-tile stage")
        return col * tile_w, row * tile_h


def mosaic_geometry(plan: StagePlan) -> list[StageGeometry]:
    """Canvas geometry for stages 0..m (stage 0 is the seed tile itself)."""
    out = []
    for j in range(plan.stages + 1):
        side = 2 ** (plan.step * j)
        out.append(StageGeometry(j, plan.level(j), side, side * plan.tile_h, side * plan.tile_w))
    return out
