"""Evaluation: oriented-box AP, displacement error, per-action breakdown and
label-selection statistics.

Detections match ground truth greedily in descending confidence with
one-to-one assignment. AP uses the all-point interpolated precision-recall
curve. Displacement error is computed over matched pairs only, on the
mixture mode with the largest weight, with recall reported alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox, iou
from .model import (Detection, GmmPrediction, ModelParams, decode_detections,
                    forward_detection, nms, predict_rows)
from .scenegen import Actor, Scene, classify_action

ACTIONS = ("straight", "left", "right", "stationary")

__all__ = [
    "iou", "average_precision", "pooled_average_precision", "match_detections",
    "mean_ade", "ade_pairs", "per_action_report", "EvalReport", "EvalConfig",
    "evaluate_pool", "SelectionStats", "selection_stats",
]


def match_detections(detections: list[Detection], ground_truth: list[OrientedBox],
                     iou_thresh: float) -> list[int]:
    """Greedy one-to-one matching in descending confidence (ties by anchor
    index); each detection takes the unmatched ground-truth box of highest
    IoU at or above the threshold. Returns the matched GT index per
    detection (-1 for unmatched), aligned with the input order."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].confidence, detections[i].anchor_index))
    taken = [False] * len(ground_truth)
    matched = [-1] * len(detections)
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(ground_truth):
            if taken[j]:
                continue
            v = iou(detections[i].box, gt)
            if v >= iou_thresh and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            matched[i] = best_j
    return matched


def _ap_from_pr(confidences: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    order = np.argsort(-confidences, kind="stable")
    tp = tp[order].astype(float)
    fp = 1.0 - tp
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # All-point interpolation: area under the upper precision envelope.
    mrec = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def average_precision(detections: list[Detection], ground_truth: list[OrientedBox],
                      iou_thresh: float = 0.7) -> float | None:
    """All-point interpolated AP of one detection problem; None without
    ground truth (undefined)."""
    if not ground_truth:
        return None
    if not detections:
        return 0.0
    matched = match_detections(detections, ground_truth, iou_thresh)
    conf = np.array([d.confidence for d in detections])
    tp = np.array([m >= 0 for m in matched])
    return _ap_from_pr(conf, tp, len(ground_truth))


def pooled_average_precision(per_scene: list[tuple[list[Detection], list[OrientedBox]]],
                             iou_thresh: float = 0.7) -> float | None:
    """AP over many scenes: matching stays within a scene, the PR curve is
    built over the pooled detections."""
    confs: list[float] = []
    tps: list[bool] = []
    n_gt = 0
    for dets, gts in per_scene:
        n_gt += len(gts)
        if not dets:
            continue
        matched = match_detections(dets, gts, iou_thresh)
        confs.extend(d.confidence for d in dets)
        tps.extend(m >= 0 for m in matched)
    if n_gt == 0:
        return None
    if not confs:
        return 0.0
    return _ap_from_pr(np.array(confs), np.array(tps), n_gt)


def _mode_ade(pred: GmmPrediction, trajectory: np.ndarray, mode: str) -> float:
    errs = np.linalg.norm(pred.means - trajectory[None, :, :], axis=2).mean(axis=1)
    if mode == "min":
        return float(errs.min())
    return float(errs[int(np.argmax(pred.weights))])


def ade_pairs(predictions: list[GmmPrediction], detections: list[Detection],
              ground_truth: list[Actor], match_iou: float = 0.5,
              mode: str = "argmax") -> list[tuple[float, Actor]]:
    """(displacement error, matched actor) for every matched detection."""
    matched = match_detections(detections, [a.box for a in ground_truth], match_iou)
    out = []
    for i, j in enumerate(matched):
        if j < 0:
            continue
        actor = ground_truth[j]
        out.append((_mode_ade(predictions[i], actor.trajectory, mode), actor))
    return out


@dataclass
class AdeResult:
    mean_ade: float | None
    n_matched: int
    recall: float | None


def mean_ade(predictions: list[GmmPrediction], detections: list[Detection],
             ground_truth: list[Actor], match_iou: float = 0.5,
             mode: str = "argmax") -> AdeResult:
    """Mean displacement error of the highest-weight mode over matched
    pairs; None when nothing matches. Recall is matched / ground truth."""
    pairs = ade_pairs(predictions, detections, ground_truth, match_iou, mode)
    recall = (len(pairs) / len(ground_truth)) if ground_truth else None
    if not pairs:
        return AdeResult(None, 0, recall)
    return AdeResult(float(np.mean([e for e, _ in pairs])), len(pairs), recall)


def per_action_report(pairs: list[tuple[float, Actor]], dt: float = 0.5) -> tuple[dict[str, float | None], dict[str, int]]:
    """Bucket matched pairs by the ground-truth trajectory's action; returns
    (mean error per bucket or None when empty, bucket sizes)."""
    sums = {a: 0.0 for a in ACTIONS}
    counts = {a: 0 for a in ACTIONS}
    for err, actor in pairs:
        action = classify_action(actor.trajectory, dt)
        sums[action] += err
        counts[action] += 1
    means = {a: (sums[a] / counts[a] if counts[a] else None) for a in ACTIONS}
    return means, counts


@dataclass
class EvalConfig:
    conf_threshold: float = 0.3
    nms_iou: float = 0.5
    ap_iou: float = 0.7
    match_iou: float = 0.5
    dt: float = 0.5
    ade_mode: str = "argmax"   # or "min": best mode instead of most likely
    pre_nms_topk: int = 300    # confidence cap per scene before suppression


@dataclass
class EvalReport:
    map_iou: float | None
    mean_ade: float | None
    recall: float | None
    per_action_ade: dict[str, float | None]
    per_action_counts: dict[str, int]
    n_ground_truth: int
    n_detections: int
    n_matched: int

    def as_row(self) -> dict:
        row = {
            "map": self.map_iou, "mean_ade": self.mean_ade, "recall": self.recall,
            "n_gt": self.n_ground_truth, "n_det": self.n_detections, "n_matched": self.n_matched,
        }
        for a in ACTIONS:
            row[f"ade_{a}"] = self.per_action_ade[a]
            row[f"n_{a}"] = self.per_action_counts[a]
        return row


def evaluate_pool(params: ModelParams, scenes: list[Scene], cfg: EvalConfig | None = None) -> EvalReport:
    """Run the model over fully labeled evaluation scenes and report
    detection AP, displacement error and the per-action breakdown."""
    cfg = cfg or EvalConfig()
    per_scene_ap = []
    pairs: list[tuple[float, Actor]] = []
    n_det = 0
    n_gt = 0
    for scene in scenes:
        out = forward_detection(params, scene)
        cand = decode_detections(out, params.cfg, cfg.conf_threshold)
        if len(cand) > cfg.pre_nms_topk:
            cand = sorted(cand, key=lambda d: (-d.confidence, d.anchor_index))[:cfg.pre_nms_topk]
        dets = nms(cand, cfg.nms_iou)
        n_det += len(dets)
        n_gt += len(scene.actors)
        per_scene_ap.append((dets, [a.box for a in scene.actors]))
        preds = predict_rows(params, out, [d.anchor_index for d in dets])
        pairs.extend(ade_pairs(preds, dets, scene.actors, cfg.match_iou, cfg.ade_mode))
    ap = pooled_average_precision(per_scene_ap, cfg.ap_iou)
    per_action, counts = per_action_report(pairs, cfg.dt)
    overall = float(np.mean([e for e, _ in pairs])) if pairs else None
    recall = (len(pairs) / n_gt) if n_gt else None
    return EvalReport(
        map_iou=ap, mean_ade=overall, recall=recall,
        per_action_ade=per_action, per_action_counts=counts,
        n_ground_truth=n_gt, n_detections=n_det, n_matched=len(pairs),
    )


# ---------------------------------------------------------------------------
# Selection statistics (what kind of labels did a method buy?)

DEFAULT_SPEED_EDGES = [0.0, 1.0, 3.0, 5.0, 7.0, 9.0, 12.0, 16.0, 20.0]
DEFAULT_DIST_EDGES = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 75.0]
DEFAULT_POINTS_EDGES = [0.0, 5.0, 10.0, 20.0, 30.0, 45.0, 60.0, 80.0, 120.0]


@dataclass
class SelectionStats:
    n_actors: int
    action_counts: dict[str, int]
    speed_hist: np.ndarray
    speed_edges: list[float]
    dist_hist: np.ndarray
    dist_edges: list[float]
    points_hist: np.ndarray
    points_edges: list[float]
    mean_distance: float | None = None
    nonstationary_fraction: float | None = None


def _clipped_hist(values: np.ndarray, edges: list[float]) -> np.ndarray:
    # Clip into the outer bins so the histogram mass equals the sample count.
    e = np.asarray(edges, dtype=float)
    if values.size == 0:
        return np.zeros(len(e) - 1, dtype=int)
    v = np.clip(values, e[0], np.nextafter(e[-1], -np.inf))
    hist, _ = np.histogram(v, bins=e)
    return hist


def selection_stats(labeled_ids: dict[int, set[int]], scenes: dict[int, Scene],
                    speed_edges=None, dist_edges=None, points_edges=None,
                    dt: float = 0.5) -> SelectionStats:
    """Histograms of labeled actors by action, speed, distance to the SDV
    and simulated sensor-return count."""
    speed_edges = list(speed_edges or DEFAULT_SPEED_EDGES)
    dist_edges = list(dist_edges or DEFAULT_DIST_EDGES)
    points_edges = list(points_edges or DEFAULT_POINTS_EDGES)
    speeds, dists, points = [], [], []
    action_counts = {a: 0 for a in ACTIONS}
    for sid in sorted(labeled_ids):
        scene = scenes[sid]
        wanted = labeled_ids[sid]
        if not wanted:
            continue
        sx, sy = scene.sdv_position
        for actor in scene.actors:
            if actor.actor_id not in wanted:
                continue
            speeds.append(actor.speed)
            dists.append(float(np.hypot(actor.box.cx - sx, actor.box.cy - sy)))
            points.append(float(actor.point_count))
            action_counts[classify_action(actor.trajectory, dt)] += 1
    n = len(speeds)
    nonstat = None
    if n:
        nonstat = 1.0 - action_counts["stationary"] / n
    return SelectionStats(
        n_actors=n,
        action_counts=action_counts,
        speed_hist=_clipped_hist(np.array(speeds), speed_edges),
        speed_edges=speed_edges,
        dist_hist=_clipped_hist(np.array(dists), dist_edges),
        dist_edges=dist_edges,
        points_hist=_clipped_hist(np.array(points), points_edges),
        points_edges=points_edges,
        mean_distance=(float(np.mean(dists)) if n else None),
        nonstationary_fraction=nonstat,
    )
