"""The uniform H x W labeling grid laid over a scene.

A region is one grid cell; cells are 1-indexed by (h, w), with h running
along y and w along x, and together tile the scene extent exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

Rect = tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


@dataclass(frozen=True)
class Region:
    scene_id: int
    h: int
    w: int
    rect: Rect

    @property
    def cell(self) -> tuple[int, int]:
        return (self.h, self.w)


def cell_rect(extent: tuple[float, float], grid_h: int, grid_w: int, h: int, w: int) -> Rect:
    """Rectangle of cell (h, w); shared edges are computed identically for
    neighbors so the tiling has no gaps."""
    ex, ey = extent
    xmin = ex * (w - 1) / grid_w
    xmax = ex * w / grid_w
    ymin = ey * (h - 1) / grid_h
    ymax = ey * h / grid_h
    return (xmin, ymin, xmax, ymax)


def make_regions(extent: tuple[float, float], grid_h: int, grid_w: int, scene_id: int = 0) -> list[Region]:
    """All H*W regions of a scene in row-major order ((1,1), (1,2), ...)."""
    if grid_h < 1:
        raise ConfigError("grid_h", f"must be >= 1, got {grid_h}")
    if grid_w < 1:
        raise ConfigError("grid_w", f"must be >= 1, got {grid_w}")
    return [
        Region(scene_id, h, w, cell_rect(extent, grid_h, grid_w, h, w))
        for h in range(1, grid_h + 1)
        for w in range(1, grid_w + 1)
    ]


def cell_of_point(extent: tuple[float, float], grid_h: int, grid_w: int, x: float, y: float) -> tuple[int, int]:
    """Cell (h, w) containing a point; points on the far boundary fall into
    the last cell so every point of the extent maps to exactly one cell."""
    ex, ey = extent
    w = min(int(x / ex * grid_w), grid_w - 1) + 1
    h = min(int(y / ey * grid_h), grid_h - 1) + 1
    return (max(h, 1), max(w, 1))
