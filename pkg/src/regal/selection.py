"""Budgeted greedy region selection plus the random baselines.

The greedy solver walks scenes in descending best-region value. Inside a
scene it queries regions in descending value until the scene has yielded at
least the sparsity minimum of newly labeled actors (or runs out of
regions), then moves on, stopping once the budget is reached.

A new scene is only opened while the remaining budget is at least the
sparsity minimum; because realized cost equals newly labeled actors, any
budget crossing then coincides with the final query of a completed scene,
so the overshoot stays below that single region's cost and every selected
scene still meets its per-scene minimum. Strict mode instead dry-runs each
scene's queries and skips scenes that would cross the budget, so the spend
never exceeds it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .grid import Region, make_regions
from .oracle import LabelingOracle, PoolState
from .scoring import RegionScore

__all__ = [
    "SelectionConfig", "QueryRecord", "QueryPlan",
    "greedy_select", "random_scenes", "random_regions", "make_regions",
]


@dataclass(frozen=True)
class SelectionConfig:
    budget: int
    sparsity_min: int = 0
    grid_h: int = 1
    grid_w: int = 1
    criterion: str = "pred_entropy"
    density: float = 0.25
    seed: int = 0
    strict_budget: bool = False
    scene_rank: str = "max"  # or "sum": rank scenes by summed region value

    def validate(self) -> None:
        if self.budget < 1:
            raise ConfigError("budget", f"must be >= 1, got {self.budget}")
        if self.sparsity_min < 0:
            raise ConfigError("sparsity_min", f"must be >= 0, got {self.sparsity_min}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("grid_h", f"grid must be >= 1x1, got {self.grid_h}x{self.grid_w}")
        if not (0.0 < self.density <= 1.0):
            raise ConfigError("density", f"must be in (0, 1], got {self.density}")
        if self.scene_rank not in ("max", "sum"):
            raise ConfigError("scene_rank", f"must be 'max' or 'sum', got {self.scene_rank!r}")


@dataclass(frozen=True)
class QueryRecord:
    region: Region
    score: float
    est_cost: int
    realized_cost: int


@dataclass
class QueryPlan:
    records: list[QueryRecord] = field(default_factory=list)
    spent: int = 0
    exhausted: bool = False
    scene_new_actors: dict[int, int] = field(default_factory=dict)

    def add(self, region: Region, score: float, est_cost: int, cost: int) -> None:
        self.records.append(QueryRecord(region, score, est_cost, cost))
        self.spent += cost
        self.scene_new_actors[region.scene_id] = self.scene_new_actors.get(region.scene_id, 0) + cost

    @property
    def scene_ids(self) -> list[int]:
        return sorted(self.scene_new_actors)


def _candidate_key(rs: RegionScore) -> tuple:
    return (-rs.value, -rs.score, rs.region.h, rs.region.w)


def _group_by_scene(pool_state: PoolState, region_scores: list[RegionScore]) -> dict[int, list[RegionScore]]:
    by_scene: dict[int, list[RegionScore]] = {}
    for rs in region_scores:
        st = pool_state.states.get(rs.region.scene_id)
        if st is not None and st.is_labeled(rs.region.h, rs.region.w):
            continue
        by_scene.setdefault(rs.region.scene_id, []).append(rs)
    for sid in by_scene:
        by_scene[sid].sort(key=_candidate_key)
    return by_scene


def _scene_order_key(cands: list[RegionScore], rank: str) -> tuple[float, float]:
    if rank == "sum":
        return (sum(rs.value for rs in cands), sum(rs.score for rs in cands))
    best = cands[0]
    return (best.value, best.score)


def _chase_would_fit(oracle: LabelingOracle, cands: list[RegionScore], sparsity_min: int,
                     remaining: int) -> bool:
    """Dry-run a scene's query sequence; True when its total realized cost
    stays within the remaining budget."""
    state = oracle.pool_state.state(cands[0].region.scene_id)
    seen = set(state.labeled_actor_ids)
    total = 0
    for i, rs in enumerate(cands):
        if i > 0 and total >= sparsity_min:
            break
        ls = oracle.labels(rs.region)
        new = {a for a in ls.actor_ids if a not in seen}
        total += len(new) + oracle.fixed_cost
        seen |= new
        if total > remaining:
            return False
    return total <= remaining


def greedy_select(pool_state: PoolState, region_scores: list[RegionScore],
                  cfg: SelectionConfig, oracle: LabelingOracle) -> QueryPlan:
    """Solve the per-iteration budgeted selection greedily.

    Scenes are opened in descending value (ties: higher score, lower id);
    zero-value scenes only come up once no positive-value region remains
    anywhere. Within a scene, regions go in descending value (ties: higher
    score, then row-major) until newly labeled actors reach the sparsity
    minimum; with a minimum of zero a scene contributes exactly its best
    region per visit. Estimated costs rank candidates, realized oracle
    costs pay the budget. When budget remains after every scene has been
    visited once, the sweep restarts over scenes with regions left, so a
    budget above the pool's total cost labels everything and the plan
    reports exhaustion.
    """
    cfg.validate()
    plan = QueryPlan()
    by_scene = _group_by_scene(pool_state, region_scores)
    skipped_strict: set[int] = set()
    visited: set[int] = set()

    while plan.spent < cfg.budget:
        remaining = cfg.budget - plan.spent
        if not cfg.strict_budget and cfg.sparsity_min > 0 and remaining < cfg.sparsity_min:
            break
        avail = {sid: c for sid, c in by_scene.items()
                 if c and sid not in visited and sid not in skipped_strict}
        if not avail:
            if visited and any(c for sid, c in by_scene.items() if c and sid not in skipped_strict):
                visited.clear()
                continue
            plan.exhausted = not any(by_scene.values())
            break
        sid = max(avail, key=lambda s: (_scene_order_key(avail[s], cfg.scene_rank), -s))
        visited.add(sid)
        cands = avail[sid]
        if cfg.strict_budget and not _chase_would_fit(oracle, cands, cfg.sparsity_min, remaining):
            skipped_strict.add(sid)
            continue

        newly = 0
        consumed = 0
        for i, rs in enumerate(cands):
            if i > 0 and newly >= cfg.sparsity_min:
                break
            if i > 0 and plan.spent >= cfg.budget:
                break
            _, cost = oracle.query(rs.region)
            plan.add(rs.region, rs.score, rs.est_cost, cost)
            newly += cost
            consumed = i + 1
        by_scene[sid] = cands[consumed:]
    return plan


def _unfinished_scene_ids(pool_state: PoolState) -> list[int]:
    return sorted(sid for sid, st in pool_state.states.items() if not st.labeled_mask.all())


def random_scenes(pool_state: PoolState, budget: int, seed: int,
                  oracle: LabelingOracle) -> QueryPlan:
    """Label whole scenes in a seeded uniform order until the budget is
    reached; regions go row-major inside each scene."""
    if budget < 1:
        raise ConfigError("budget", f"must be >= 1, got {budget}")
    plan = QueryPlan()
    rng = np.random.default_rng(seed)
    sids = _unfinished_scene_ids(pool_state)
    if not sids:
        plan.exhausted = True
        return plan
    for sid in np.array(sids)[rng.permutation(len(sids))]:
        state = pool_state.state(int(sid))
        for region in make_regions(oracle.scenes[int(sid)].extent,
                                   pool_state.grid_h, pool_state.grid_w, int(sid)):
            if state.is_labeled(region.h, region.w):
                continue
            if plan.spent >= budget:
                return plan
            _, cost = oracle.query(region)
            plan.add(region, 0.0, 0, cost)
    plan.exhausted = plan.spent < budget
    return plan


def random_regions(pool_state: PoolState, budget: int, density: float, seed: int,
                   oracle: LabelingOracle) -> QueryPlan:
    """Partially label scenes in a seeded uniform order: each visited scene
    gets ceil(density * H * W) regions sampled without replacement, queried
    in row-major order, until the budget is reached."""
    if budget < 1:
        raise ConfigError("budget", f"must be >= 1, got {budget}")
    if not (0.0 < density <= 1.0):
        raise ConfigError("density", f"must be in (0, 1], got {density}")
    plan = QueryPlan()
    rng = np.random.default_rng(seed)
    grid_h, grid_w = pool_state.grid_h, pool_state.grid_w
    n_cells = grid_h * grid_w
    k = math.ceil(density * n_cells)
    sids = _unfinished_scene_ids(pool_state)
    if not sids:
        plan.exhausted = True
        return plan
    for sid in np.array(sids)[rng.permutation(len(sids))]:
        sid = int(sid)
        state = pool_state.state(sid)
        chosen = np.sort(rng.choice(n_cells, size=k, replace=False))
        for cell in chosen:
            h, w = int(cell) // grid_w + 1, int(cell) % grid_w + 1
            if state.is_labeled(h, w):
                continue
            if plan.spent >= budget:
                return plan
            region = oracle.region(sid, h, w)
            _, cost = oracle.query(region)
            plan.add(region, 0.0, 0, cost)
    plan.exhausted = plan.spent < budget
    return plan
