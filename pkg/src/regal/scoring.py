"""Region informativeness scores and the estimated-cost proxy.

Detection entropy sums the binary entropy of every anchor whose cell center
falls in the region; prediction entropy sums the categorical entropy of the
mixture weights of the post-NMS detections assigned to the region by box
center. Estimated cost is the post-NMS detection count, the stand-in for
the unknown true labeling cost. A region with no detections, or one that is
already labeled, scores zero and is never worth selecting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .grid import Region, cell_of_point, make_regions
from .model import (Detection, GmmPrediction, ModelParams, _sigmoid, decode_detections,
                    forward_detection, nms, predict_rows)
from .oracle import SceneLabelState
from .scenegen import Scene

CRITERIA = ("pred_entropy", "det_entropy", "random", "coreset")


@dataclass(frozen=True)
class Criterion:
    tag: str
    conf_threshold: float = 0.5
    nms_iou: float = 0.5

    def validate(self) -> None:
        if self.tag not in CRITERIA:
            raise InvalidInputError(f"unknown criterion {self.tag!r}, expected one of {CRITERIA}")
        if not (0.0 <= self.conf_threshold <= 1.0):
            raise InvalidInputError(f"conf_threshold must be in [0, 1], got {self.conf_threshold}")


@dataclass(frozen=True)
class RegionScore:
    region: Region
    score: float
    est_cost: int
    value: float


def detection_entropy(probs) -> float:
    """Natural-log binary entropy summed over anchor probabilities;
    0 log 0 counts as 0."""
    p = np.asarray(probs, dtype=float)
    if p.size and ((p < 0.0) | (p > 1.0)).any():
        raise InvalidInputError("probabilities must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log(p)) - (1.0 - p) * np.log(1.0 - p)
    return float(np.nan_to_num(h, nan=0.0).sum())


def prediction_entropy(pred: GmmPrediction) -> float:
    """Entropy of the categorical distribution over mixture weights."""
    w = np.asarray(pred.weights, dtype=float)
    if w.ndim != 1 or abs(float(w.sum()) - 1.0) > 1e-9 or (w < 0).any():
        raise InvalidInputError("mixture weights must be a simplex")
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


def score_regions(params: ModelParams, scene: Scene, grid_hw: tuple[int, int],
                  criterion: Criterion, state: SceneLabelState | None = None) -> list[RegionScore]:
    """Score each grid region of a scene under an entropy criterion.

    One forward pass, decode and NMS per scene. Detections are assigned to
    regions by the grid partition of their box centers, so each detection
    counts exactly once even on a cell boundary. Labeled regions score 0.
    """
    criterion.validate()
    if criterion.tag not in ("pred_entropy", "det_entropy"):
        raise InvalidInputError(f"score_regions expects an entropy criterion, got {criterion.tag!r}")
    grid_h, grid_w = grid_hw
    regions = make_regions(scene.extent, grid_h, grid_w, scene.scene_id)

    out = forward_detection(params, scene)
    dets = nms(decode_detections(out, params.cfg, criterion.conf_threshold), criterion.nms_iou)

    est = np.zeros((grid_h, grid_w), dtype=int)
    det_cell: list[tuple[int, int]] = []
    for det in dets:
        h, w = cell_of_point(scene.extent, grid_h, grid_w, det.box.cx, det.box.cy)
        det_cell.append((h, w))
        est[h - 1, w - 1] += 1

    raw = np.zeros((grid_h, grid_w))
    if criterion.tag == "det_entropy":
        probs = _sigmoid(out.logits)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.nan_to_num(-(probs * np.log(probs)) - (1.0 - probs) * np.log(1.0 - probs), nan=0.0)
        ex, ey = scene.extent
        w_idx = np.minimum((out.anchors[:, 0] / ex * grid_w).astype(int), grid_w - 1)
        h_idx = np.minimum((out.anchors[:, 1] / ey * grid_h).astype(int), grid_h - 1)
        np.add.at(raw, (h_idx, w_idx), ent)
    else:
        preds = predict_rows(params, out, [d.anchor_index for d in dets])
        for (h, w), pred in zip(det_cell, preds):
            raw[h - 1, w - 1] += prediction_entropy(pred)

    scores = []
    for region in regions:
        i, j = region.h - 1, region.w - 1
        labeled = state is not None and state.is_labeled(region.h, region.w)
        c_hat = int(est[i, j])
        s = 0.0 if (labeled or c_hat == 0) else float(raw[i, j])
        scores.append(RegionScore(region=region, score=s, est_cost=c_hat, value=s / max(c_hat, 1)))
    return scores


def estimated_cost(detections: list[Detection], region: Region) -> int:
    """Post-NMS detections whose box center lies in the region rectangle
    (boundary inclusive; the grid partition in score_regions disambiguates
    straddling centers)."""
    xmin, ymin, xmax, ymax = region.rect
    return sum(1 for d in detections
               if xmin <= d.box.cx <= xmax and ymin <= d.box.cy <= ymax)


def coreset_select(scene_features: dict[int, np.ndarray], labeled_scene_ids: set[int],
                   budget: int, cost_fn) -> list[int]:
    """Greedy k-center scene selection over learned embeddings.

    Repeatedly picks the unlabeled scene farthest (minimum Euclidean
    distance) from the labeled plus already-selected set, accruing realized
    costs via ``cost_fn`` until the budget is reached. Ties break on the
    lower scene id; an empty labeled set seeds from the max-norm scene.
    """
    ids = sorted(scene_features)
    candidates = [sid for sid in ids if sid not in labeled_scene_ids]
    if not candidates:
        return []
    feats = {sid: np.asarray(scene_features[sid], dtype=float) for sid in ids}

    selected: list[int] = []
    spent = 0
    min_dist: dict[int, float] = {}

    anchors_set = [sid for sid in ids if sid in labeled_scene_ids]
    if not anchors_set:
        seed_sid = max(candidates, key=lambda sid: (float(np.linalg.norm(feats[sid])), -sid))
        selected.append(seed_sid)
        spent += int(cost_fn(seed_sid))
        candidates.remove(seed_sid)
        anchors_set = [seed_sid]

    for sid in candidates:
        min_dist[sid] = min(float(np.linalg.norm(feats[sid] - feats[a])) for a in anchors_set)

    while candidates and spent < budget:
        pick = max(candidates, key=lambda sid: (min_dist[sid], -sid))
        selected.append(pick)
        spent += int(cost_fn(pick))
        candidates.remove(pick)
        for sid in candidates:
            d = float(np.linalg.norm(feats[sid] - feats[pick]))
            if d < min_dist[sid]:
                min_dist[sid] = d
    return selected


def write_scores_csv(scores: list[RegionScore], path) -> None:
    lines = ["scene_id,h,w,score,est_cost,value"]
    for rs in scores:
        r = rs.region
        lines.append(f"{r.scene_id},{r.h},{r.w},{rs.score!r},{rs.est_cost},{rs.value!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
