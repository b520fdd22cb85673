import math

import numpy as np
import pytest

from conftest import make_actor, make_scene
from regal.errors import InvalidInputError
from regal.grid import Region, cell_rect, make_regions
from regal.model import GmmPrediction, ModelConfig, decode_detections, forward, init_params, nms
from regal.oracle import SceneLabelState
from regal.scoring import (Criterion, coreset_select, detection_entropy, estimated_cost,
                           prediction_entropy, score_regions)

CFG = ModelConfig(n_channels=3, ny=8, nx=8, cell_size=2.5, patch=3, hidden=4,
                  n_modes=3, horizon=3)


def zero_params():
    params = init_params(CFG, 0)
    for a in params.arrays():
        a[:] = 0.0
    return params


def blank_scene():
    return make_scene([], extent=(20.0, 20.0), raster_shape=(3, 8, 8))


# -- entropy formulas ---------------------------------------------------------

def test_detection_entropy_examples():
    assert abs(detection_entropy([0.5]) - math.log(2)) < 1e-12
    assert detection_entropy([0.0, 1.0]) == 0.0
    hb9 = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert abs(detection_entropy([0.5, 0.5, 0.9]) - (2 * math.log(2) + hb9)) < 1e-12


def test_detection_entropy_direct_summation_oracle():
    rng = np.random.default_rng(2)
    p = rng.uniform(0, 1, size=50)
    want = sum(-(q * math.log(q) + (1 - q) * math.log(1 - q)) for q in p)
    assert abs(detection_entropy(p) - want) < 1e-10


def test_detection_entropy_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        detection_entropy([0.5, 1.2])
    with pytest.raises(InvalidInputError):
        detection_entropy([-0.1])


def mixture(weights):
    w = np.asarray(weights, dtype=float)
    k = len(w)
    return GmmPrediction(w, np.zeros((k, 2, 2)), np.ones((k, 2, 2)))


def test_prediction_entropy_examples():
    assert prediction_entropy(mixture([1.0, 0.0, 0.0])) == 0.0
    assert abs(prediction_entropy(mixture([1 / 3] * 3)) - math.log(3)) < 1e-12
    want = -(0.7 * math.log(0.7) + 0.2 * math.log(0.2) + 0.1 * math.log(0.1))
    got = prediction_entropy(mixture([0.7, 0.2, 0.1]))
    assert abs(got - want) < 1e-12
    assert abs(got - 0.8018) < 5e-5


def test_prediction_entropy_rejects_non_simplex():
    with pytest.raises(InvalidInputError):
        prediction_entropy(mixture([0.6, 0.6]))


# -- score_regions ------------------------------------------------------------

def test_zero_weight_model_det_entropy_scores():
    # p = 0.5 at every anchor: every unlabeled region scores (anchors in it) * ln 2
    scores = score_regions(zero_params(), blank_scene(), (2, 2), Criterion("det_entropy"))
    assert len(scores) == 4
    for rs in scores:
        assert abs(rs.score - 16 * math.log(2)) < 1e-9  # 4x4 anchors per region
        assert rs.est_cost == 16
        assert abs(rs.value - rs.score / 16) < 1e-12


def test_no_detection_scene_pred_entropy_all_zero():
    params = zero_params()
    params.bd[0] = -30.0  # confident background everywhere
    scores = score_regions(params, blank_scene(), (2, 2), Criterion("pred_entropy"))
    assert all(rs.score == 0.0 and rs.est_cost == 0 and rs.value == 0.0 for rs in scores)


def handcrafted_params(hot_cells):
    """Logit fires only on cells given huge channel-0 evidence; prediction
    head stays uniform."""
    params = zero_params()
    params.w1[4, 0] = 1.0      # channel-0 patch center feeds hidden unit 0
    params.wd[0, 0] = 50.0
    params.bd[0] = -25.0
    return params


def test_score_regions_hand_built_assignment():
    scene = blank_scene()
    # cells (row, col): two in region (1,1) [x,y < 10], one in region (2,2)
    for (i, j) in ((1, 1), (2, 3), (6, 6)):
        scene.features.values[0, i, j] = 1e6
    params = handcrafted_params(None)
    scores = {(rs.region.h, rs.region.w): rs for rs in
              score_regions(params, scene, (2, 2), Criterion("pred_entropy"))}
    ln3 = math.log(3)
    assert abs(scores[(1, 1)].score - 2 * ln3) < 1e-9
    assert scores[(1, 1)].est_cost == 2
    assert abs(scores[(1, 1)].value - ln3) < 1e-9
    assert abs(scores[(2, 2)].score - ln3) < 1e-9
    assert scores[(2, 2)].est_cost == 1
    assert scores[(1, 2)].score == 0.0 and scores[(1, 2)].est_cost == 0
    assert scores[(2, 1)].score == 0.0


def test_score_regions_labeled_region_scores_zero():
    state = SceneLabelState.empty(0, 2, 2)
    state.labeled_mask[0, 0] = True
    scores = {(rs.region.h, rs.region.w): rs for rs in
              score_regions(zero_params(), blank_scene(), (2, 2),
                            Criterion("det_entropy"), state)}
    assert scores[(1, 1)].score == 0.0
    assert scores[(1, 2)].score > 0.0


def test_det_entropy_additivity_over_partition():
    params = zero_params()
    scene = blank_scene()
    rng = np.random.default_rng(5)
    scene.features.values = rng.uniform(0, 2, size=(3, 8, 8))
    params2 = init_params(CFG, 6)
    out = forward(params2, scene)
    probs = 1.0 / (1.0 + np.exp(-out.logits))
    whole = detection_entropy(probs)
    # with the zero-weight model every region holds detections, so no score
    # is masked and the region scores partition the scene total exactly
    scores = score_regions(zero_params(), scene, (4, 4), Criterion("det_entropy"))
    total_zero = sum(rs.score for rs in scores)
    assert abs(total_zero - CFG.n_anchors * math.log(2)) < 1e-9
    one = score_regions(params2, scene, (1, 1), Criterion("det_entropy"))
    assert len(one) == 1
    if one[0].est_cost > 0:
        assert abs(one[0].score - whole) < 1e-9


def test_pred_entropy_additivity_and_coarse_recovery():
    rng = np.random.default_rng(9)
    scene = blank_scene()
    scene.features.values = rng.uniform(0, 3, size=(3, 8, 8))
    params = init_params(CFG, 11)
    params.bd[0] = 0.3  # lift the background-prior bias so detections exist
    crit = Criterion("pred_entropy")

    out = forward(params, scene)
    dets = nms(decode_detections(out, CFG, crit.conf_threshold), crit.nms_iou)
    assert dets, "fixture should produce detections"
    from regal.model import predict_trajectories
    preds = predict_trajectories(params, scene, dets, outputs=out)
    whole = sum(prediction_entropy(p) for p in preds)

    fine = score_regions(params, scene, (4, 4), crit)
    assert abs(sum(rs.score for rs in fine) - whole) < 1e-9
    assert sum(rs.est_cost for rs in fine) == len(dets)

    coarse = score_regions(params, scene, (1, 1), crit)
    assert len(coarse) == 1
    assert abs(coarse[0].score - whole) < 1e-9
    assert coarse[0].est_cost == len(dets)


def test_score_regions_rejects_non_entropy_criteria():
    with pytest.raises(InvalidInputError):
        score_regions(zero_params(), blank_scene(), (2, 2), Criterion("random"))
    with pytest.raises(InvalidInputError):
        score_regions(zero_params(), blank_scene(), (2, 2), Criterion("nonsense"))


# -- estimated_cost -----------------------------------------------------------

def test_estimated_cost_examples():
    region = Region(0, 1, 1, cell_rect((20.0, 20.0), 2, 2, 1, 1))
    assert estimated_cost([], region) == 0
    params = zero_params()
    scene = blank_scene()
    out = forward(params, scene)
    dets = decode_detections(out, CFG, 0.5)
    regions = make_regions((20.0, 20.0), 2, 2)
    counts = [estimated_cost(dets, r) for r in regions]
    assert sum(counts) == len(dets)  # zero-weight boxes sit strictly inside cells
    rng = np.random.default_rng(3)
    sub = [dets[i] for i in rng.choice(len(dets), size=10, replace=False)]
    for r in regions:
        brute = sum(1 for d in sub if r.rect[0] <= d.box.cx <= r.rect[2]
                    and r.rect[1] <= d.box.cy <= r.rect[3])
        assert estimated_cost(sub, r) == brute


# -- coreset ------------------------------------------------------------------

def test_coreset_line_example():
    feats = {0: np.array([0.0]), 1: np.array([10.0]), 2: np.array([5.0])}
    order = coreset_select(feats, {0}, budget=100, cost_fn=lambda sid: 1)
    assert order == [1, 2]


def test_coreset_identical_features_ascending_ids():
    feats = {sid: np.array([1.0, 2.0]) for sid in (4, 2, 9, 7)}
    order = coreset_select(feats, set(), budget=100, cost_fn=lambda sid: 1)
    assert order == [2, 4, 7, 9]


def test_coreset_fully_labeled_pool_empty_selection():
    feats = {0: np.array([1.0]), 1: np.array([2.0])}
    assert coreset_select(feats, {0, 1}, budget=10, cost_fn=lambda sid: 1) == []


def test_coreset_budget_stops_selection():
    feats = {sid: np.array([float(sid)]) for sid in range(6)}
    order = coreset_select(feats, {0}, budget=3, cost_fn=lambda sid: 2)
    # 2 then 4 crosses the budget of 3
    assert len(order) == 2


def test_coreset_empty_labeled_seeds_max_norm():
    feats = {0: np.array([1.0]), 1: np.array([-9.0]), 2: np.array([3.0])}
    order = coreset_select(feats, set(), budget=100, cost_fn=lambda sid: 1)
    assert order[0] == 1  # largest norm
