"""End-to-end active-labeling loop: initial labels, then score, select,
label, retrain from scratch and evaluate for N iterations.

Everything downstream of the config is deterministic: per-iteration seeds
derive from (run seed, iteration), training re-initializes from the run
seed, and all artifacts (metrics.csv, stats.csv, queries.jsonl) are
rewritten from the run state after every iteration, so a run resumed from
its latest checkpoint finishes byte-identical to an uninterrupted one.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import (ACTIONS, EvalConfig, EvalReport, SelectionStats, evaluate_pool,
                      selection_stats)
from .model import ModelConfig, ModelParams, TrainConfig, init_params, scene_embedding, train
from .oracle import LabelingOracle, PoolState, SceneLabelState
from .scenegen import GenConfig, Scene, load_gen_config, load_pool
from .scoring import Criterion, coreset_select, score_regions, write_scores_csv
from .selection import QueryPlan, SelectionConfig, greedy_select, make_regions, random_regions, random_scenes

SCHEMA_VERSION = 1

METHODS = ("fine_grained", "coarse_grained", "random_scenes", "random_regions", "coreset")
FINE_INIT_METHODS = ("fine_grained", "random_regions")
ENTROPY_METHODS = ("fine_grained", "coarse_grained")

WORKERS_ENV = "REGAL_WORKERS"


@dataclass
class RunConfig:
    pool_dir: str
    eval_dir: str
    out_dir: str
    method: str = "fine_grained"
    criterion: str = "pred_entropy"
    iterations: int = 5
    budget: int = 400
    initial_budget: int = 800
    initial_density: float = 0.25
    grid_h: int = 10
    grid_w: int = 10
    sparsity_min: int = 5
    density: float = 0.25
    strict_budget: bool = False
    scene_rank: str = "max"
    seed: int = 0
    hidden: int = 32
    n_modes: int = 3
    score_conf_threshold: float = 0.5
    score_nms_iou: float = 0.5
    fixed_cost: int = 0
    dump_scores: bool = False
    warm_start: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}, got {self.method!r}")
        if self.method in ENTROPY_METHODS and self.criterion not in ("pred_entropy", "det_entropy"):
            raise ConfigError("criterion", f"{self.method} needs an entropy criterion, got {self.criterion!r}")
        if self.iterations < 1:
            raise ConfigError("iterations", f"must be >= 1, got {self.iterations}")
        if self.budget < 1 or self.initial_budget < 1:
            raise ConfigError("budget", "budgets must be >= 1")
        if not (0.0 < self.initial_density <= 1.0):
            raise ConfigError("initial_density", f"must be in (0, 1], got {self.initial_density}")
        if not (0.0 < self.density <= 1.0):
            raise ConfigError("density", f"must be in (0, 1], got {self.density}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("grid_h", "grid must be >= 1x1")
        if self.sparsity_min < 0:
            raise ConfigError("sparsity_min", "must be >= 0")

    @property
    def run_grid(self) -> tuple[int, int]:
        # Coarse-grained selection is the one-region-per-scene special case.
        if self.method == "coarse_grained":
            return (1, 1)
        return (self.grid_h, self.grid_w)

    def to_json(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("schema_version", None)
        d["train"] = TrainConfig(**d.get("train", {}))
        d["eval"] = EvalConfig(**d.get("eval", {}))
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class RunState:
    iteration: int
    pool_state: PoolState
    params: ModelParams
    plans: list[list[dict]]          # query rows per iteration, 0 = initial labeling
    reports: list[dict]              # one metrics row per iteration 1..N
    stats_rows: list[dict]           # label-state snapshot per iteration 0..N
    spent_after: list[int]           # cumulative spend per iteration 0..N


def _iter_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _plan_rows(plan: QueryPlan, spent_before: int) -> list[dict]:
    rows = []
    running = spent_before
    for rec in plan.records:
        running += rec.realized_cost
        rows.append({
            "scene_id": rec.region.scene_id, "h": rec.region.h, "w": rec.region.w,
            "score": rec.score, "est_cost": rec.est_cost, "cost": rec.realized_cost,
            "cumulative_spend": running,
        })
    return rows


def _stats_row(stats: SelectionStats) -> dict:
    row = {
        "n_actors": stats.n_actors,
        "mean_distance": stats.mean_distance,
        "nonstationary_fraction": stats.nonstationary_fraction,
    }
    for a in ACTIONS:
        row[f"n_{a}"] = stats.action_counts[a]
    row["speed_hist"] = stats.speed_hist.tolist()
    row["speed_edges"] = stats.speed_edges
    row["dist_hist"] = stats.dist_hist.tolist()
    row["dist_edges"] = stats.dist_edges
    row["points_hist"] = stats.points_hist.tolist()
    row["points_edges"] = stats.points_edges
    return row


class Runner:
    """One configured run bound to its pools and output directory."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        pool_scenes, manifest = load_pool(cfg.pool_dir)
        eval_scenes, _ = load_pool(cfg.eval_dir)
        pool_ids = {s.scene_id for s in pool_scenes}
        overlap = pool_ids & {s.scene_id for s in eval_scenes}
        if overlap:
            raise ConfigError("eval_dir", f"evaluation pool shares scene ids with the "
                              f"training pool (e.g. {sorted(overlap)[:3]})")
        self.scenes = {s.scene_id: s for s in pool_scenes}
        self.scene_ids = sorted(self.scenes)
        self.eval_scenes = eval_scenes
        self.gen_cfg = load_gen_config(manifest["config"])
        self.model_cfg = ModelConfig.from_gen(self.gen_cfg, hidden=cfg.hidden, n_modes=cfg.n_modes)
        self.eval_cfg = replace(cfg.eval, dt=self.gen_cfg.dt)
        self.train_cfg = replace(cfg.train, seed=cfg.seed)
        self.out = Path(cfg.out_dir)
        self.criterion = Criterion(cfg.criterion, cfg.score_conf_threshold, cfg.score_nms_iou)

    # -- persistence --------------------------------------------------------

    def _checkpoint_path(self, iteration: int) -> Path:
        return self.out / "checkpoints" / f"iter_{iteration:03d}.json"

    def _save_checkpoint(self, state: RunState) -> None:
        scenes_blob = {}
        for sid, st in state.pool_state.states.items():
            if not st.any_labeled:
                continue
            scenes_blob[str(sid)] = {
                "mask": "".join("1" if b else "0" for b in st.labeled_mask.ravel()),
                "actors": sorted(st.labeled_actor_ids),
            }
        blob = {
            "schema_version": SCHEMA_VERSION,
            "iteration": state.iteration,
            "pool_state": {
                "grid": [state.pool_state.grid_h, state.pool_state.grid_w],
                "spent": state.pool_state.spent,
                "scenes": scenes_blob,
            },
            "params": {
                name: base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")
                for name, arr in zip(("w1", "b1", "wd", "bd", "wp", "bp"), state.params.arrays())
            },
            "plans": state.plans,
            "reports": state.reports,
            "stats_rows": state.stats_rows,
            "spent_after": state.spent_after,
        }
        path = self._checkpoint_path(state.iteration)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(blob) + "\n", encoding="utf-8")

    def _load_latest_checkpoint(self) -> RunState | None:
        ckpt_dir = self.out / "checkpoints"
        if not ckpt_dir.is_dir():
            return None
        paths = sorted(ckpt_dir.glob("iter_*.json"))
        if not paths:
            return None
        blob = json.loads(paths[-1].read_text(encoding="utf-8"))
        grid_h, grid_w = blob["pool_state"]["grid"]
        pool_state = PoolState.empty(self.scene_ids, grid_h, grid_w)
        pool_state.spent = blob["pool_state"]["spent"]
        for sid_str, entry in blob["pool_state"]["scenes"].items():
            sid = int(sid_str)
            mask = np.array([c == "1" for c in entry["mask"]], dtype=bool).reshape(grid_h, grid_w)
            pool_state.states[sid] = SceneLabelState(sid, mask, set(entry["actors"]))
        params = init_params(self.model_cfg, 0)
        for name, arr in zip(("w1", "b1", "wd", "bd", "wp", "bp"), params.arrays()):
            raw = np.frombuffer(base64.b64decode(blob["params"][name]), dtype=float)
            arr.flat[:] = raw
        return RunState(
            iteration=blob["iteration"], pool_state=pool_state, params=params,
            plans=blob["plans"], reports=blob["reports"], stats_rows=blob["stats_rows"],
            spent_after=blob["spent_after"],
        )

    def _rewrite_outputs(self, state: RunState) -> None:
        lines = []
        for it, rows in enumerate(state.plans):
            for row in rows:
                lines.append(json.dumps({"iteration": it, **row}))
        (self.out / "queries.jsonl").write_text(
            ("\n".join(lines) + "\n") if lines else "", encoding="utf-8")

        cols = ["iteration", "cumulative_actors", "map", "mean_ade", "recall",
                "n_gt", "n_det", "n_matched"]
        cols += [f"ade_{a}" for a in ACTIONS] + [f"n_{a}" for a in ACTIONS]
        mlines = [",".join(cols)]
        for it, report in enumerate(state.reports, start=1):
            row = {"iteration": it, "cumulative_actors": state.spent_after[it], **report}
            mlines.append(",".join(_fmt(row.get(c)) for c in cols))
        (self.out / "metrics.csv").write_text("\n".join(mlines) + "\n", encoding="utf-8")

        if state.stats_rows:
            first = state.stats_rows[0]
            head = [f"# speed_edges={first['speed_edges']}",
                    f"# dist_edges={first['dist_edges']}",
                    f"# points_edges={first['points_edges']}"]
            scols = (["iteration", "n_actors", "mean_distance", "nonstationary_fraction"]
                     + [f"n_{a}" for a in ACTIONS]
                     + [f"speed_{i}" for i in range(len(first["speed_hist"]))]
                     + [f"dist_{i}" for i in range(len(first["dist_hist"]))]
                     + [f"points_{i}" for i in range(len(first["points_hist"]))])
            slines = head + [",".join(scols)]
            for it, row in enumerate(state.stats_rows):
                vals = ([it, row["n_actors"], row["mean_distance"], row["nonstationary_fraction"]]
                        + [row[f"n_{a}"] for a in ACTIONS]
                        + row["speed_hist"] + row["dist_hist"] + row["points_hist"])
                slines.append(",".join(_fmt(v) for v in vals))
            (self.out / "stats.csv").write_text("\n".join(slines) + "\n", encoding="utf-8")

    # -- pieces of an iteration ---------------------------------------------

    def _initial_plan(self, oracle: LabelingOracle) -> QueryPlan:
        seed = _iter_seed(self.cfg.seed, 0)
        if self.cfg.method in FINE_INIT_METHODS:
            return random_regions(oracle.pool_state, self.cfg.initial_budget,
                                  self.cfg.initial_density, seed, oracle)
        return random_scenes(oracle.pool_state, self.cfg.initial_budget, seed, oracle)

    def _select(self, iteration: int, params: ModelParams, oracle: LabelingOracle) -> QueryPlan:
        cfg = self.cfg
        seed = _iter_seed(cfg.seed, iteration)
        pool_state = oracle.pool_state
        if cfg.method == "random_scenes":
            return random_scenes(pool_state, cfg.budget, seed, oracle)
        if cfg.method == "random_regions":
            return random_regions(pool_state, cfg.budget, cfg.density, seed, oracle)
        if cfg.method == "coreset":
            return self._coreset_plan(params, oracle)
        grid_h, grid_w = cfg.run_grid
        scores = []
        for sid in self.scene_ids:
            st = pool_state.state(sid)
            if st.labeled_mask.all():
                continue
            scores.extend(score_regions(params, self.scenes[sid], (grid_h, grid_w),
                                        self.criterion, st))
        if cfg.dump_scores:
            sdir = self.out / "scores"
            sdir.mkdir(parents=True, exist_ok=True)
            write_scores_csv(scores, sdir / f"iter_{iteration:03d}.csv")
        sel = SelectionConfig(
            budget=cfg.budget,
            sparsity_min=(0 if cfg.method == "coarse_grained" else cfg.sparsity_min),
            grid_h=grid_h, grid_w=grid_w, criterion=cfg.criterion, seed=seed,
            strict_budget=cfg.strict_budget, scene_rank=cfg.scene_rank,
        )
        return greedy_select(pool_state, scores, sel, oracle)

    def _coreset_plan(self, params: ModelParams, oracle: LabelingOracle) -> QueryPlan:
        pool_state = oracle.pool_state
        feats = {sid: scene_embedding(params, self.scenes[sid]) for sid in self.scene_ids}
        labeled = {sid for sid in self.scene_ids if pool_state.state(sid).any_labeled}

        def cost_fn(sid: int) -> int:
            st = pool_state.state(sid)
            return len(self.scenes[sid].actors) - len(st.labeled_actor_ids) \
                + self.cfg.fixed_cost * int(np.sum(~st.labeled_mask))

        chosen = coreset_select(feats, labeled, self.cfg.budget, cost_fn)
        plan = QueryPlan()
        for sid in chosen:
            st = pool_state.state(sid)
            for region in make_regions(self.scenes[sid].extent,
                                       pool_state.grid_h, pool_state.grid_w, sid):
                if st.is_labeled(region.h, region.w):
                    continue
                _, cost = oracle.query(region)
                plan.add(region, 0.0, 0, cost)
        plan.exhausted = plan.spent < self.cfg.budget and len(chosen) == len(
            [s for s in self.scene_ids if s not in labeled])
        return plan

    def _dataset(self, pool_state: PoolState) -> list[tuple[Scene, SceneLabelState]]:
        return [(self.scenes[sid], pool_state.state(sid))
                for sid in self.scene_ids if pool_state.state(sid).any_labeled]

    def _train(self, pool_state: PoolState, prev: ModelParams | None = None) -> ModelParams:
        warm = self.cfg.warm_start and prev is not None
        params = prev if warm else init_params(self.model_cfg, self.train_cfg.seed)
        return train(params, self._dataset(pool_state), self.train_cfg, warm_start=warm)

    def _collect_stats(self, pool_state: PoolState) -> dict:
        labeled = {sid: pool_state.state(sid).labeled_actor_ids
                   for sid in self.scene_ids if pool_state.state(sid).any_labeled}
        row = _stats_row(selection_stats(labeled, self.scenes, dt=self.gen_cfg.dt))
        row["labeled_scenes"] = len(labeled)
        return row

    # -- the loop ------------------------------------------------------------

    def run(self, stop_after_iteration: int | None = None) -> RunState:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        cfg_path = self.out / "config.json"
        blob = json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n"
        if cfg_path.exists():
            if cfg_path.read_text(encoding="utf-8") != blob:
                raise ConfigError("out_dir", f"{self.out} holds a run with a different config")
        else:
            cfg_path.write_text(blob, encoding="utf-8")

        state = self._load_latest_checkpoint()
        if state is None:
            grid_h, grid_w = cfg.run_grid
            pool_state = PoolState.empty(self.scene_ids, grid_h, grid_w)
            oracle = LabelingOracle(self.scenes, pool_state, cfg.fixed_cost)
            plan = self._initial_plan(oracle)
            # the initial model feeds iteration 1's scoring; evaluation
            # reports start after the first selection iteration
            params = self._train(pool_state)
            state = RunState(
                iteration=0, pool_state=pool_state, params=params,
                plans=[_plan_rows(plan, 0)], reports=[],
                stats_rows=[self._collect_stats(pool_state)],
                spent_after=[pool_state.spent],
            )
            self._save_checkpoint(state)
            self._rewrite_outputs(state)

        oracle = LabelingOracle(self.scenes, state.pool_state, cfg.fixed_cost)
        last = cfg.iterations if stop_after_iteration is None else min(cfg.iterations, stop_after_iteration)
        for iteration in range(state.iteration + 1, last + 1):
            spent_before = state.pool_state.spent
            plan = self._select(iteration, state.params, oracle)
            params = self._train(state.pool_state, prev=state.params)
            report = evaluate_pool(params, self.eval_scenes, self.eval_cfg).as_row()
            state.params = params
            state.iteration = iteration
            state.plans.append(_plan_rows(plan, spent_before))
            state.reports.append(report)
            state.stats_rows.append(self._collect_stats(state.pool_state))
            state.spent_after.append(state.pool_state.spent)
            self._save_checkpoint(state)
            self._rewrite_outputs(state)
        return state


def run(cfg: RunConfig, stop_after_iteration: int | None = None) -> RunState:
    """Execute (or resume) one active-labeling run."""
    return Runner(cfg).run(stop_after_iteration)


# ---------------------------------------------------------------------------
# Experiments over several configurations.

def density_experiment(cfg: RunConfig, densities: list[float], seeds: list[int] | None = None) -> list[dict]:
    """Fixed-budget random partial labeling at several densities: build the
    dataset, train once, evaluate; one row per (density, seed)."""
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    for r in densities:
        if not (0.0 < r <= 1.0):
            raise ConfigError("densities", f"must be in (0, 1], got {r}")
    runner = Runner(replace(cfg, method="random_regions"))
    rows = []
    for r in densities:
        for seed in seeds:
            pool_state = PoolState.empty(runner.scene_ids, cfg.grid_h, cfg.grid_w)
            oracle = LabelingOracle(runner.scenes, pool_state, cfg.fixed_cost)
            random_regions(pool_state, cfg.budget, r, _iter_seed(seed, 0), oracle)
            train_cfg = replace(runner.train_cfg, seed=seed)
            params = train(init_params(runner.model_cfg, seed),
                           runner._dataset(pool_state), train_cfg)
            report = evaluate_pool(params, runner.eval_scenes, runner.eval_cfg)
            row = {"density": r, "seed": seed, "labeled_actors": pool_state.spent,
                   "labeled_scenes": pool_state.labeled_scene_count(), **report.as_row()}
            rows.append(row)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows_csv(out / "density.csv", rows)
    return rows


def _run_single(cfg_json: dict) -> list[dict]:
    cfg = RunConfig.from_json(cfg_json)
    state = run(cfg)
    rows = []
    for idx, report in enumerate(state.reports):
        it = idx + 1
        rows.append({
            "method": cfg.method, "seed": cfg.seed, "iteration": it,
            "cumulative_actors": state.spent_after[it], **report,
            "nonstationary_fraction": state.stats_rows[it]["nonstationary_fraction"],
            "mean_distance": state.stats_rows[it]["mean_distance"],
            "labeled_scenes": state.stats_rows[it]["labeled_scenes"],
        })
    return rows


def compare_methods(base_cfg: RunConfig, methods: list[str], seeds: list[int]) -> list[dict]:
    """Run every (method, seed) pair against the shared pool; per-iteration
    rows land in comparison.csv, seed means with standard errors in
    aggregate.csv plus one gnuplot-style .dat file per method."""
    jobs = []
    for method in methods:
        for seed in seeds:
            sub = replace(base_cfg, method=method, seed=seed,
                          out_dir=str(Path(base_cfg.out_dir) / f"{method}_seed{seed}"))
            jobs.append(sub.to_json())

    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_single, jobs))
    else:
        results = [_run_single(j) for j in jobs]

    rows = [row for rs in results for row in rs]
    out = Path(base_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows_csv(out / "comparison.csv", rows)

    agg_rows = []
    for method in methods:
        per_iter: dict[int, list[dict]] = {}
        for row in rows:
            if row["method"] == method:
                per_iter.setdefault(row["iteration"], []).append(row)
        dat_lines = ["# iteration cumulative_actors mean_ade ade_stderr map map_stderr"]
        for it in sorted(per_iter):
            group = per_iter[it]
            ades = np.array([r["mean_ade"] for r in group], dtype=float)
            maps = np.array([r["map"] for r in group], dtype=float)
            cum = float(np.mean([r["cumulative_actors"] for r in group]))
            n = len(group)
            ade_se = float(np.std(ades, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            map_se = float(np.std(maps, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            agg_rows.append({
                "method": method, "iteration": it, "n_seeds": n,
                "cumulative_actors": cum,
                "mean_ade": float(np.mean(ades)), "ade_stderr": ade_se,
                "map": float(np.mean(maps)), "map_stderr": map_se,
            })
            dat_lines.append(f"{it} {cum!r} {float(np.mean(ades))!r} {ade_se!r} "
                             f"{float(np.mean(maps))!r} {map_se!r}")
        (out / f"{method}.dat").write_text("\n".join(dat_lines) + "\n", encoding="utf-8")
    _write_rows_csv(out / "aggregate.csv", agg_rows)
    return rows


def _write_rows_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
