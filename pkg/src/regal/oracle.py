"""Labeling oracle over grid regions.

Querying a region returns every ground-truth actor whose box touches the
region's rectangle, in full, even when the overlap is partial. Cost is
counted in unique actors: an actor intersecting several queried regions is
billed exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidQueryError
from .geometry import box_intersects_rect
from .grid import Region, cell_rect
from .scenegen import Actor, Scene


@dataclass
class LabelSet:
    region: Region
    actors: list[Actor]

    @property
    def actor_ids(self) -> set[int]:
        return {a.actor_id for a in self.actors}


@dataclass
class SceneLabelState:
    scene_id: int
    labeled_mask: np.ndarray  # (H, W) bool, [h-1, w-1]
    labeled_actor_ids: set[int] = field(default_factory=set)

    @classmethod
    def empty(cls, scene_id: int, grid_h: int, grid_w: int) -> "SceneLabelState":
        return cls(scene_id, np.zeros((grid_h, grid_w), dtype=bool))

    @property
    def any_labeled(self) -> bool:
        return bool(self.labeled_mask.any())

    def is_labeled(self, h: int, w: int) -> bool:
        return bool(self.labeled_mask[h - 1, w - 1])

    def copy(self) -> "SceneLabelState":
        return SceneLabelState(self.scene_id, self.labeled_mask.copy(), set(self.labeled_actor_ids))


def _check_region(scene: Scene, region: Region) -> None:
    if region.scene_id != scene.scene_id:
        raise InvalidQueryError(
            f"region belongs to scene {region.scene_id}, queried scene {scene.scene_id}"
        )
    xmin, ymin, xmax, ymax = region.rect
    ex, ey = scene.extent
    if not (0.0 <= xmin < xmax <= ex and 0.0 <= ymin < ymax <= ey):
        raise InvalidQueryError(f"region rect {region.rect} outside scene extent {scene.extent}")


def label_region(scene: Scene, region: Region) -> LabelSet:
    """Ground truth for one region: all actors whose oriented box intersects
    the region rectangle, boundary contact included."""
    _check_region(scene, region)
    hits = [a for a in scene.actors if box_intersects_rect(a.box, region.rect)]
    return LabelSet(region=region, actors=hits)


def true_cost(label_set: LabelSet, state: SceneLabelState, fixed_cost: int = 0) -> int:
    """Labeling cost of a query: one unit per actor not already labeled,
    plus an optional per-region fixed cost."""
    return sum(1 for a in label_set.actors if a.actor_id not in state.labeled_actor_ids) + fixed_cost


def apply_query(state: SceneLabelState, label_set: LabelSet) -> SceneLabelState:
    """Fold a query result into the label state (idempotent union)."""
    out = state.copy()
    out.labeled_mask[label_set.region.h - 1, label_set.region.w - 1] = True
    out.labeled_actor_ids |= label_set.actor_ids
    return out


@dataclass
class PoolState:
    """Label bookkeeping for a whole pool plus the running spend."""

    grid_h: int
    grid_w: int
    states: dict[int, SceneLabelState]
    spent: int = 0

    @classmethod
    def empty(cls, scene_ids: list[int], grid_h: int, grid_w: int) -> "PoolState":
        return cls(grid_h, grid_w,
                   {sid: SceneLabelState.empty(sid, grid_h, grid_w) for sid in scene_ids})

    def state(self, scene_id: int) -> SceneLabelState:
        return self.states[scene_id]

    def labeled_actor_count(self) -> int:
        return sum(len(s.labeled_actor_ids) for s in self.states.values())

    def labeled_scene_count(self) -> int:
        return sum(1 for s in self.states.values() if s.any_labeled)

    def copy(self) -> "PoolState":
        return PoolState(self.grid_h, self.grid_w,
                         {sid: s.copy() for sid, s in self.states.items()}, self.spent)


class LabelingOracle:
    """Stateful front of the labeling process for one pool.

    ``query`` realizes a label request and updates the pool state (single
    writer); ``peek_cost`` answers what a query would cost without touching
    anything, which the simulator may use where the paper's annotators would
    simply report their invoice.
    """

    def __init__(self, scenes: dict[int, Scene], pool_state: PoolState, fixed_cost: int = 0):
        self.scenes = scenes
        self.pool_state = pool_state
        self.fixed_cost = fixed_cost

    def region(self, scene_id: int, h: int, w: int) -> Region:
        scene = self.scenes[scene_id]
        return Region(scene_id, h, w,
                      cell_rect(scene.extent, self.pool_state.grid_h, self.pool_state.grid_w, h, w))

    def labels(self, region: Region) -> LabelSet:
        """Ground truth for a region without touching any state."""
        return label_region(self.scenes[region.scene_id], region)

    def peek_cost(self, region: Region) -> int:
        return true_cost(self.labels(region), self.pool_state.state(region.scene_id), self.fixed_cost)

    def query(self, region: Region) -> tuple[LabelSet, int]:
        """Label a region; returns the label set and the realized cost."""
        ls = label_region(self.scenes[region.scene_id], region)
        state = self.pool_state.state(region.scene_id)
        cost = true_cost(ls, state, self.fixed_cost)
        self.pool_state.states[region.scene_id] = apply_query(state, ls)
        self.pool_state.spent += cost
        return ls, cost
