"""Acceptance suite: one test per criterion, one printed pass/fail line each.

A1 and A6..A10, A12 are exact formula/property checks and run in seconds.
A2..A5 and A11 retrain models on the shared 2,000-scene reference pool and
take tens of minutes on one core; they are marked slow but run by default.
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import make_actor, make_scene
from regal.geometry import OrientedBox, box_intersects_rect, points_in_box
from regal.grid import Region, cell_rect, make_regions
from regal.harness import RunConfig, compare_methods, density_experiment, run
from regal.metrics import EvalConfig, average_precision, per_action_report
from regal.model import (Detection, GmmPrediction, ModelConfig, TrainConfig, gmm_nll,
                         init_params, partial_loss)
from regal.oracle import LabelingOracle, PoolState, SceneLabelState, apply_query, label_region, true_cost
from regal.scenegen import GenConfig, generate_pool, save_pool
from regal.scoring import Criterion, RegionScore, detection_entropy, prediction_entropy, score_regions
from regal.selection import SelectionConfig, greedy_select, random_regions, random_scenes

from test_metrics import brute_force_ap
from test_model import TINY, half_labeled_state, naive_mixture_nll, sup_scene
from test_selection import available_actors, random_instance, sorted_scene_reference


def report(criterion: str, passed: bool, detail: str, elapsed: float) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] {criterion} ({elapsed:.1f}s): {detail}")


# ---------------------------------------------------------------------------
# Reference pool shared by the experiment criteria (A2..A5, A11).

POOL_GEN = GenConfig(n_scenes=2000, seed=1)
EVAL_GEN = GenConfig(n_scenes=500, seed=999, id_offset=1_000_000)
REFERENCE_TRAIN = TrainConfig(epochs=200, learning_rate=1e-4, w_nll=0.2, dtype="float32")


@pytest.fixture(scope="session")
def reference_pools(tmp_path_factory):
    root = tmp_path_factory.mktemp("reference")
    save_pool(generate_pool(POOL_GEN), POOL_GEN, root / "pool")
    save_pool(generate_pool(EVAL_GEN), EVAL_GEN, root / "eval")
    return root


def reference_cfg(pools: Path, out: Path, **kwargs) -> RunConfig:
    base = dict(
        pool_dir=str(pools / "pool"), eval_dir=str(pools / "eval"), out_dir=str(out),
        method="fine_grained", criterion="pred_entropy", iterations=5,
        budget=400, initial_budget=800, initial_density=0.25,
        grid_h=10, grid_w=10, sparsity_min=5, density=0.25, seed=0,
        train=REFERENCE_TRAIN,
    )
    base.update(kwargs)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def method_comparison(reference_pools, tmp_path_factory):
    """The A3 experiment: 4 methods x 5 seeds on the reference pool; reused
    by A4 and A5."""
    out = tmp_path_factory.mktemp("comparison")
    base = reference_cfg(reference_pools, out)
    rows = compare_methods(base, ["fine_grained", "coarse_grained", "random_scenes",
                                  "random_regions"], [0, 1, 2, 3, 4])
    return rows


def seed_mean(rows, method, field, iteration=5):
    vals = [r[field] for r in rows if r["method"] == method and r["iteration"] == iteration]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# A1: exact formula suite against float64 oracles.

def test_a1_exact_formula_suite():
    t0 = time.time()
    rng = np.random.default_rng(101)
    ok = True

    # detection entropy (binary entropy sum)
    assert abs(detection_entropy([0.5]) - math.log(2)) < 1e-12
    assert detection_entropy([0.0, 1.0]) == 0.0
    for _ in range(50):
        p = rng.uniform(0, 1, size=rng.integers(1, 30))
        direct = sum(-(q * math.log(q) + (1 - q) * math.log(1 - q)) if 0 < q < 1 else 0.0
                     for q in p)
        ok &= abs(detection_entropy(p) - direct) <= 1e-8 * max(1.0, abs(direct))

    # prediction entropy (categorical over weights)
    assert prediction_entropy(GmmPrediction(np.array([1.0, 0.0]), np.zeros((2, 1, 2)),
                                            np.ones((2, 1, 2)))) == 0.0
    for _ in range(50):
        k = int(rng.integers(2, 6))
        w = rng.dirichlet(np.ones(k))
        direct = float(-(w * np.log(w)).sum())
        got = prediction_entropy(GmmPrediction(w, np.zeros((k, 1, 2)), np.ones((k, 1, 2))))
        ok &= abs(got - direct) <= 1e-8 * max(1.0, abs(direct))

    # mixture NLL vs the naive density product
    peak = GmmPrediction(np.array([1.0]), np.zeros((1, 1, 2)), np.ones((1, 1, 2)))
    assert abs(gmm_nll(peak, np.zeros((1, 2))) - math.log(2 * math.pi)) < 1e-12
    for _ in range(50):
        k, horizon = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        w = rng.dirichlet(np.ones(k))
        means = rng.normal(0, 2, size=(k, horizon, 2))
        variances = rng.uniform(0.2, 3.0, size=(k, horizon, 2))
        traj = rng.normal(0, 2, size=(horizon, 2))
        want = naive_mixture_nll(w, means, variances, traj)
        got = gmm_nll(GmmPrediction(w, means, variances), traj)
        ok &= abs(got - want) <= 1e-8 * max(1.0, abs(want))

    elapsed = time.time() - t0
    report("A1 exact formula suite", ok and elapsed < 1.0,
           f"entropies and NLL match float64 oracles at 1e-8", elapsed)
    assert ok
    assert elapsed < 1.0


# ---------------------------------------------------------------------------
# A6: budget and sparsity invariants over randomized instances.

def test_a6_budget_and_sparsity_invariants():
    t0 = time.time()
    rng = np.random.default_rng(606)
    checked = 0
    for trial in range(1000):
        by_id, pool_state, oracle, scores = random_instance(rng)
        budget = int(rng.integers(1, 14))
        m = int(rng.choice([0, 1, 2, 5]))
        strict = bool(rng.integers(0, 2))
        cfg = SelectionConfig(budget=budget, sparsity_min=m, grid_h=3, grid_w=3,
                              strict_budget=strict)
        prior = {sid: set(pool_state.state(sid).labeled_actor_ids) for sid in by_id}
        plan = greedy_select(pool_state, scores, cfg, oracle)
        if strict:
            assert plan.spent <= budget, f"trial {trial}: strict overspent"
        elif plan.spent >= budget and plan.records:
            assert plan.spent - budget < max(plan.records[-1].realized_cost, 1), \
                f"trial {trial}: overshoot"
        for sid, newly in plan.scene_new_actors.items():
            avail = available_actors(by_id, prior, sid)
            assert newly >= min(m, avail), f"trial {trial}: sparsity on scene {sid}"
        checked += 1
    elapsed = time.time() - t0
    report("A6 budget/sparsity invariants", checked == 1000 and elapsed < 60,
           f"{checked} randomized instances, strict and default modes", elapsed)
    assert elapsed < 60


# ---------------------------------------------------------------------------
# A7: coarse-grained recovery equals an independent scene ranking.

def test_a7_coarse_grained_recovery():
    t0 = time.time()
    rng = np.random.default_rng(707)
    from conftest import make_actor as _ma

    for trial in range(100):
        n_scenes = int(rng.integers(2, 8))
        seedling = int(rng.integers(0, 2 ** 31))
        budget = int(rng.integers(1, 10))

        def build(seed):
            local = np.random.default_rng(seed)
            scenes, scores = [], []
            for sid in range(n_scenes):
                actors = [_ma(i, float(local.uniform(2, 18)), float(local.uniform(2, 18)))
                          for i in range(int(local.integers(0, 5)))]
                scene = make_scene(actors, scene_id=sid, extent=(20.0, 20.0),
                                   raster_shape=(1, 8, 8))
                scenes.append(scene)
                est = int(local.integers(0, 4))
                s = float(local.choice([0.0, local.uniform(0.1, 4.0)])) if est else 0.0
                rect = cell_rect(scene.extent, 1, 1, 1, 1)
                scores.append(RegionScore(Region(sid, 1, 1, rect), s, est, s / max(est, 1)))
            by_id = {s.scene_id: s for s in scenes}
            ps = PoolState.empty(sorted(by_id), 1, 1)
            return by_id, ps, LabelingOracle(by_id, ps), scores

        _, ps_a, oracle_a, scores_a = build(seedling)
        plan = greedy_select(ps_a, scores_a, SelectionConfig(budget=budget), oracle_a)
        got = [(r.region.scene_id, r.realized_cost) for r in plan.records]
        _, ps_b, oracle_b, scores_b = build(seedling)
        want, want_spent = sorted_scene_reference(ps_b, scores_b, budget, oracle_b)
        assert got == want and plan.spent == want_spent, f"trial {trial}"
    elapsed = time.time() - t0
    report("A7 coarse-grained recovery", True,
           "identical plans to the independent scene sort on 100 pools", elapsed)


# ---------------------------------------------------------------------------
# A8: oracle algebra on random scenes.

def test_a8_oracle_algebra():
    t0 = time.time()
    rng = np.random.default_rng(808)
    pool = generate_pool(GenConfig(n_scenes=125, seed=88, extent=(40.0, 40.0),
                                   actors_min=2, actors_max=8, lam_halfdist=20.0))
    grid_h = grid_w = 4
    scenes_checked = 0
    for rep_i in range(8):
        for scene in pool:
            state = SceneLabelState.empty(scene.scene_id, grid_h, grid_w)
            regions = make_regions(scene.extent, grid_h, grid_w, scene.scene_id)
            order = rng.permutation(len(regions))
            n_queries = int(rng.integers(1, len(regions) + 1))
            total = 0
            for idx in order[:n_queries]:
                ls = label_region(scene, regions[int(idx)])
                total += true_cost(ls, state)
                before = set(state.labeled_actor_ids)
                state = apply_query(state, ls)
                assert before <= state.labeled_actor_ids  # monotone
                twice = apply_query(state, ls)            # idempotent
                assert twice.labeled_actor_ids == state.labeled_actor_ids
                assert (twice.labeled_mask == state.labeled_mask).all()
            assert total == len(state.labeled_actor_ids)  # cost additivity

            # coverage: the full tiling recovers every actor
            full = SceneLabelState.empty(scene.scene_id, grid_h, grid_w)
            for region in regions:
                full = apply_query(full, label_region(scene, region))
            assert full.labeled_actor_ids == {a.actor_id for a in scene.actors}

            # no-phantom: points in labeled regions inside any box are labeled
            pts = rng.uniform(0, 40, size=(40, 2))
            for x, y in pts:
                h = min(int(y / 40 * grid_h), grid_h - 1) + 1
                w = min(int(x / 40 * grid_w), grid_w - 1) + 1
                if not state.is_labeled(h, w):
                    continue
                for a in scene.actors:
                    if points_in_box(np.array([[x, y]]), a.box)[0]:
                        assert a.actor_id in state.labeled_actor_ids
            scenes_checked += 1
    elapsed = time.time() - t0
    report("A8 oracle algebra", scenes_checked == 1000 and elapsed < 60,
           f"{scenes_checked} random scenes: coverage, dedup, idempotence, no-phantom", elapsed)
    assert scenes_checked == 1000
    assert elapsed < 60


# ---------------------------------------------------------------------------
# A9: analytic gradients vs central finite differences, plus masking.

def test_a9_gradient_check():
    t0 = time.time()
    cfg = TrainConfig()
    worst = 0.0
    for seed in (11, 12, 13):
        params = init_params(TINY, seed)
        scene = sup_scene(seed=seed)
        state = half_labeled_state()
        _, grads = partial_loss(params, scene, state, cfg)
        analytic = grads.to_flat()
        flat = params.to_flat()
        rng = np.random.default_rng(seed)
        step = 1e-5
        for i in rng.choice(flat.size, size=90, replace=False):
            probe = params.copy()
            up = flat.copy(); up[i] += step
            probe.set_flat(up)
            lp, _ = partial_loss(probe, scene, state, cfg)
            dn = flat.copy(); dn[i] -= step
            probe.set_flat(dn)
            lm, _ = partial_loss(probe, scene, state, cfg)
            fd = (lp - lm) / (2 * step)
            err = abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1e-4)
            worst = max(worst, err)
            assert err < 1e-4, f"seed {seed} param {i}"

    # masking: features far from labeled supervision change nothing
    params = init_params(TINY, 5)
    a, b = sup_scene(seed=4), sup_scene(seed=4)
    b.features.values[:, 6:, 6:] += 23.0
    la, ga = partial_loss(params, a, half_labeled_state(), cfg)
    lb, gb = partial_loss(params, b, half_labeled_state(), cfg)
    assert la == lb and all(np.array_equal(x, y) for x, y in zip(ga.arrays(), gb.arrays()))
    l0, g0 = partial_loss(params, a, SceneLabelState.empty(0, 2, 2), cfg)
    assert l0 == 0.0 and all((g == 0).all() for g in g0.arrays())

    elapsed = time.time() - t0
    report("A9 gradient check", elapsed < 60,
           f"worst relative error {worst:.2e}; unlabeled supervision exactly inert", elapsed)
    assert elapsed < 60


# ---------------------------------------------------------------------------
# A10: metric oracles.

def test_a10_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(1010)
    from conftest import random_box

    for trial in range(500):
        n_gt = int(rng.integers(1, 5))
        gts = [random_box(rng, 40) for _ in range(n_gt)]
        dets = []
        for i in range(int(rng.integers(0, 11))):
            if rng.random() < 0.5:
                g = gts[int(rng.integers(n_gt))]
                box = OrientedBox(g.cx + rng.normal(0, 0.5), g.cy + rng.normal(0, 0.5),
                                  g.length, g.width, g.heading + rng.normal(0, 0.08))
            else:
                box = random_box(rng, 40)
            dets.append(Detection(i, box, float(rng.uniform(0.05, 1.0))))
        got = average_precision(dets, gts, 0.5)
        want = brute_force_ap(dets, gts, 0.5)
        assert abs(got - want) < 1e-9, f"trial {trial}: {got} vs {want}"

    # per-action recombination
    actors, pairs = [], []
    for i in range(60):
        kind = rng.choice(["parked", "straight", "left_turn", "right_turn"])
        actor = make_actor(i, float(rng.uniform(10, 90)), float(rng.uniform(10, 90)),
                           behavior=str(kind),
                           speed=0.0 if kind == "parked" else float(rng.uniform(3, 9)),
                           turn_rate={"parked": 0.0, "straight": 0.0,
                                      "left_turn": 0.3, "right_turn": -0.3}[str(kind)])
        actors.append(actor)
        pairs.append((float(rng.uniform(0, 6)), actor))
    means, counts = per_action_report(pairs)
    overall = float(np.mean([e for e, _ in pairs]))
    recombined = sum(means[a] * counts[a] for a in means if counts[a]) / sum(counts.values())
    assert abs(recombined - overall) < 1e-9

    elapsed = time.time() - t0
    report("A10 metric oracles", True,
           "AP equals brute-force PR on 500 instances; ADE recombines at 1e-9", elapsed)


# ---------------------------------------------------------------------------
# A12: byte-identical reruns.

def test_a12_determinism(tmp_path):
    t0 = time.time()
    gen = GenConfig(n_scenes=16, seed=5, extent=(40.0, 40.0), actors_min=3, actors_max=7,
                    lam_halfdist=20.0)
    egen = GenConfig(n_scenes=5, seed=77, extent=(40.0, 40.0), actors_min=3, actors_max=7,
                     lam_halfdist=20.0, id_offset=9000)
    save_pool(generate_pool(gen), gen, tmp_path / "pool")
    save_pool(generate_pool(egen), egen, tmp_path / "eval")

    def one(out):
        cfg = RunConfig(pool_dir=str(tmp_path / "pool"), eval_dir=str(tmp_path / "eval"),
                        out_dir=str(out), method="fine_grained", iterations=2, budget=10,
                        initial_budget=8, grid_h=4, grid_w=4, sparsity_min=2, seed=3,
                        hidden=8, n_modes=2,
                        train=TrainConfig(steps=8, batch_size=4, learning_rate=1e-3))
        run(cfg)
        return out

    a = one(tmp_path / "a")
    b = one(tmp_path / "b")
    same = all((a / n).read_bytes() == (b / n).read_bytes()
               for n in ("metrics.csv", "queries.jsonl"))
    elapsed = time.time() - t0
    report("A12 determinism", same, "metrics.csv and queries.jsonl byte-identical", elapsed)
    assert same
