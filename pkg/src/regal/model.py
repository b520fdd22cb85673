"""Joint detector/predictor trained with region-masked partial supervision.

One anchor per raster cell. A shared two-layer MLP reads the k x k feature
patch around each anchor and feeds two linear heads: detection (objectness
logit plus box offsets, heading as a sin/cos pair) and prediction (mode
logits plus per-mode, per-timestep mean offsets and log-variances of a
K-mode Gaussian mixture over future positions, factorized over time).

The loss only sees labeled supervision: positives are anchors whose center
falls inside a labeled ground-truth box, background is hard-mined among
anchors inside labeled regions, and everything else contributes exactly
zero loss and zero gradient. All reductions are sums, never means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError, TrainingDivergedError
from .geometry import OrientedBox, iou
from .oracle import SceneLabelState
from .scenegen import GenConfig, Scene


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 3
    ny: int = 40
    nx: int = 40
    cell_size: float = 2.5
    patch: int = 7
    hidden: int = 32
    n_modes: int = 3
    horizon: int = 10
    box_xy_scale: float = 2.5
    pos_scale: float = 4.0   # meters/second: timestep t decodes at pos_scale * t * dt
    dt: float = 0.5
    length_prior: float = 4.6
    width_prior: float = 2.0
    var_floor: float = 1e-4
    var_log_cap: float = 4.5  # soft bound on log-variance; keeps early high-error
                              # timesteps trainable without runaway sigmas
    mode_logit_gain: float = 4.0  # fixed gain on the gating head so mixture
                                  # weights specialize as fast as the other heads

    @classmethod
    def from_gen(cls, gen: GenConfig, hidden: int = 32, n_modes: int = 3, patch: int = 7) -> "ModelConfig":
        n_ch, ny, nx = gen.raster_shape
        return cls(n_channels=n_ch, ny=ny, nx=nx, cell_size=gen.cell_size, patch=patch,
                   hidden=hidden, n_modes=n_modes, horizon=gen.horizon,
                   box_xy_scale=gen.cell_size, dt=gen.dt)

    @property
    def input_dim(self) -> int:
        return self.n_channels * self.patch * self.patch

    @property
    def det_dim(self) -> int:
        return 7  # logit, dx, dy, dlog-length, dlog-width, sin, cos

    @property
    def pred_dim(self) -> int:
        return self.n_modes + self.n_modes * self.horizon * 4

    @property
    def n_anchors(self) -> int:
        return self.ny * self.nx

    def anchor_centers(self) -> np.ndarray:
        """(A, 2) cell-center coordinates, row-major over (y, x)."""
        ii, jj = np.meshgrid(np.arange(self.ny), np.arange(self.nx), indexing="ij")
        return np.stack([(jj.ravel() + 0.5) * self.cell_size,
                         (ii.ravel() + 0.5) * self.cell_size], axis=1)

    def traj_scales(self) -> np.ndarray:
        """(T, 1) decode scale per timestep: raw mean offsets are in units of
        pos_scale meters per second of lead time."""
        t = np.arange(1, self.horizon + 1) * self.dt
        return (self.pos_scale * t)[:, None]


@dataclass
class ModelParams:
    cfg: ModelConfig
    w1: np.ndarray  # (input_dim, hidden)
    b1: np.ndarray  # (hidden,)
    wd: np.ndarray  # (hidden, det_dim)
    bd: np.ndarray  # (det_dim,)
    wp: np.ndarray  # (hidden, pred_dim)
    bp: np.ndarray  # (pred_dim,)

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.wd, self.bd, self.wp, self.bp]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, *[a.copy() for a in self.arrays()])

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for a in self.arrays():
            a.flat[:] = flat[offset:offset + a.size]
            offset += a.size
        if offset != flat.size:
            raise InvalidInputError(f"flat vector has {flat.size} entries, expected {offset}")


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)

    def layer(n_in: int, n_out: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    bd = np.zeros(cfg.det_dim)
    bd[0] = -2.0  # background prior: most anchors are empty
    # prediction head starts at the stationary prior; small per-mode bias
    # offsets on the means break the symmetry so modes can specialize
    wp = np.zeros((cfg.hidden, cfg.pred_dim))
    bp_tail = np.zeros((cfg.n_modes, cfg.horizon, 4))
    bp_tail[:, :, 0:2] = rng.normal(0.0, 0.5, size=(cfg.n_modes, 1, 2))
    bp = np.concatenate([np.zeros(cfg.n_modes), bp_tail.reshape(-1)])
    return ModelParams(
        cfg,
        layer(cfg.input_dim, cfg.hidden), np.zeros(cfg.hidden),
        layer(cfg.hidden, cfg.det_dim), bd,
        wp, bp,
    )


@dataclass
class RawOutputs:
    logits: np.ndarray       # (A,)
    box_raw: np.ndarray      # (A, 6)
    mode_logits: np.ndarray  # (A, K)
    traj_raw: np.ndarray     # (A, K, T, 4): mux, muy, logvx, logvy
    hidden: np.ndarray       # (A, hidden)
    patches: np.ndarray      # (A, input_dim)
    anchors: np.ndarray      # (A, 2)
    cell_size: float


@dataclass(frozen=True)
class Detection:
    anchor_index: int
    box: OrientedBox
    confidence: float


@dataclass
class GmmPrediction:
    """K-mode mixture over a future trajectory; diagonal covariances."""

    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, T, 2) absolute coordinates
    variances: np.ndarray  # (K, T, 2), all > 0

    def validate(self) -> None:
        if self.weights.ndim != 1 or abs(float(self.weights.sum()) - 1.0) > 1e-9 or (self.weights < 0).any():
            raise InvalidInputError("mixture weights must be a simplex")
        if (self.variances <= 0).any():
            raise InvalidInputError("variances must be positive")
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.weights.shape[0]:
            raise InvalidInputError("means/variances/weights shapes disagree")


def _condition(values: np.ndarray) -> np.ndarray:
    # Compress the raw evidence counts; keeps zero at zero and odd symmetry.
    return 0.5 * np.sign(values) * np.log1p(np.abs(values))


def _decode_variances(cfg: ModelConfig, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map raw log-variance outputs to variances and d(var)/d(raw)."""
    t = np.tanh(raw / cfg.var_log_cap)
    ev = np.exp(cfg.var_log_cap * t)
    var = cfg.var_floor + ev
    return var, ev * (1.0 - t * t)


def extract_patches(cfg: ModelConfig, features: np.ndarray) -> np.ndarray:
    pad = cfg.patch // 2
    cond = _condition(features)
    # re-express past sweeps as temporal differences: motion shows up as a
    # linear dipole pattern instead of a cross-channel comparison
    if cond.shape[0] > 1:
        cond = np.concatenate([cond[:1], cond[:-1] - cond[1:]], axis=0)
    padded = np.pad(cond, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (cfg.patch, cfg.patch), axis=(1, 2))
    # (C, ny, nx, k, k) -> (A, C*k*k)
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(cfg.n_anchors, cfg.input_dim)


@dataclass
class DetOutputs:
    """Detection-head outputs plus the trunk activations needed to run the
    prediction head on chosen anchors afterwards."""

    logits: np.ndarray   # (A,)
    box_raw: np.ndarray  # (A, 6)
    hidden: np.ndarray   # (A, hidden)
    anchors: np.ndarray  # (A, 2)


def forward_detection(params: ModelParams, scene: Scene) -> DetOutputs:
    """Trunk plus detection head only; the prediction head can be evaluated
    later for selected anchors via ``predict_rows``."""
    cfg = params.cfg
    values = scene.features.values
    if values.shape != (cfg.n_channels, cfg.ny, cfg.nx):
        raise ConfigError("features", f"raster shape {values.shape} != configured "
                          f"{(cfg.n_channels, cfg.ny, cfg.nx)}")
    patches = extract_patches(cfg, values)
    hidden = np.tanh(patches @ params.w1 + params.b1)
    det = hidden @ params.wd + params.bd
    return DetOutputs(logits=det[:, 0], box_raw=det[:, 1:7], hidden=hidden,
                      anchors=cfg.anchor_centers())


def predict_rows(params: ModelParams, det_out: DetOutputs, anchor_rows) -> list[GmmPrediction]:
    """Prediction-head mixtures for the given anchor indices."""
    cfg = params.cfg
    rows = np.asarray(anchor_rows, dtype=int)
    if len(rows) == 0:
        return []
    pred = det_out.hidden[rows] @ params.wp + params.bp
    k = cfg.n_modes
    out = []
    scales = cfg.traj_scales()
    for i, a in enumerate(rows):
        logits = cfg.mode_logit_gain * pred[i, :k]
        z = np.exp(logits - logits.max())
        weights = z / z.sum()
        raw = pred[i, k:].reshape(k, cfg.horizon, 4)
        means = det_out.anchors[a] + scales * raw[:, :, 0:2]
        variances, _ = _decode_variances(cfg, raw[:, :, 2:4])
        out.append(GmmPrediction(weights=weights, means=means, variances=variances))
    return out


def forward(params: ModelParams, scene: Scene) -> RawOutputs:
    """Raw per-anchor outputs over the full scene; the input is never masked."""
    cfg = params.cfg
    values = scene.features.values
    if values.shape != (cfg.n_channels, cfg.ny, cfg.nx):
        raise ConfigError("features", f"raster shape {values.shape} != configured "
                          f"{(cfg.n_channels, cfg.ny, cfg.nx)}")
    patches = extract_patches(cfg, values)
    hidden = np.tanh(patches @ params.w1 + params.b1)
    det = hidden @ params.wd + params.bd
    pred = hidden @ params.wp + params.bp
    k = cfg.n_modes
    return RawOutputs(
        logits=det[:, 0],
        box_raw=det[:, 1:7],
        mode_logits=cfg.mode_logit_gain * pred[:, :k],
        traj_raw=pred[:, k:].reshape(cfg.n_anchors, k, cfg.horizon, 4),
        hidden=hidden,
        patches=patches,
        anchors=cfg.anchor_centers(),
        cell_size=cfg.cell_size,
    )


def scene_embedding(params: ModelParams, scene: Scene) -> np.ndarray:
    """Mean hidden activation over anchors; the scene's learned feature."""
    cfg = params.cfg
    patches = extract_patches(cfg, scene.features.values)
    hidden = np.tanh(patches @ params.w1 + params.b1)
    return hidden.mean(axis=0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_box(cfg: ModelConfig, anchor: np.ndarray, raw: np.ndarray) -> OrientedBox:
    # heading is encoded as (sin 2t, cos 2t): a box is symmetric under a
    # half-turn, so the doubled angle removes the front/back ambiguity
    return OrientedBox(
        cx=float(anchor[0] + raw[0] * cfg.box_xy_scale),
        cy=float(anchor[1] + raw[1] * cfg.box_xy_scale),
        length=float(cfg.length_prior * math.exp(raw[2])),
        width=float(cfg.width_prior * math.exp(raw[3])),
        heading=float(0.5 * math.atan2(raw[4], raw[5])),
    )


def decode_detections(outputs: RawOutputs, cfg: ModelConfig, conf_threshold: float) -> list[Detection]:
    """Anchors at or above the confidence threshold, decoded to boxes."""
    probs = _sigmoid(outputs.logits)
    keep = np.nonzero(probs >= conf_threshold)[0]
    return [
        Detection(int(a), decode_box(cfg, outputs.anchors[a], outputs.box_raw[a]), float(probs[a]))
        for a in keep
    ]


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression: descending confidence, ties by anchor index;
    drops any detection overlapping a kept one with IoU above the threshold."""
    if not detections:
        return []
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].confidence, detections[i].anchor_index))
    kept: list[Detection] = []
    centers: list[tuple[float, float]] = []
    radii: list[float] = []
    for i in order:
        det = detections[i]
        box = det.box
        suppressed = False
        if kept:
            cs = np.array(centers)
            d = np.hypot(cs[:, 0] - box.cx, cs[:, 1] - box.cy)
            close = np.nonzero(d <= np.array(radii) + box.circumradius)[0]
            suppressed = any(iou(box, kept[int(j)].box) > iou_threshold for j in close)
        if not suppressed:
            kept.append(det)
            centers.append((box.cx, box.cy))
            radii.append(box.circumradius)
    return kept


def predict_trajectories(params: ModelParams, scene: Scene, detections: list[Detection],
                         outputs: RawOutputs | None = None) -> list[GmmPrediction]:
    """One mixture per detection, decoded from that anchor's prediction head."""
    if outputs is None:
        outputs = forward(params, scene)
    cfg = params.cfg
    preds = []
    for det in detections:
        a = det.anchor_index
        logits = outputs.mode_logits[a]
        z = np.exp(logits - logits.max())
        weights = z / z.sum()
        raw = outputs.traj_raw[a]
        means = outputs.anchors[a] + cfg.traj_scales() * raw[:, :, 0:2]
        variances, _ = _decode_variances(cfg, raw[:, :, 2:4])
        preds.append(GmmPrediction(weights=weights, means=means, variances=variances))
    return preds


def gmm_nll(pred: GmmPrediction, traj: np.ndarray) -> float:
    """Negative log-likelihood of a trajectory under the mixture.

    Timesteps are independent, so each mode's log-likelihood is the sum of
    per-timestep Gaussian log-densities; modes combine by log-sum-exp.
    """
    pred.validate()
    traj = np.asarray(traj, dtype=float)
    if traj.shape != (pred.means.shape[1], 2):
        raise InvalidInputError(f"trajectory shape {traj.shape} != (T={pred.means.shape[1]}, 2)")
    diff = traj[None, :, :] - pred.means
    per_mode = np.sum(
        -math.log(2.0 * math.pi) - 0.5 * np.log(pred.variances).sum(axis=2)
        - 0.5 * (diff ** 2 / pred.variances).sum(axis=2),
        axis=1,
    )
    with np.errstate(divide="ignore"):
        a = np.where(pred.weights > 0, np.log(np.where(pred.weights > 0, pred.weights, 1.0)), -np.inf) + per_mode
    m = float(a.max())
    return float(-(m + math.log(np.exp(a - m).sum())))


@dataclass
class TrainConfig:
    steps: int = 1200
    epochs: int | None = None  # when set, overrides steps: epochs * ceil(n/batch)
    learning_rate: float = 1e-4
    lr_end_frac: float = 0.1
    hard_negative_ratio: float = 3.0
    w_cls: float = 1.0
    w_box: float = 1.0
    w_nll: float = 0.1
    batch_size: int = 16
    batch_anchors: int = 12000  # cap on supervised anchors per minibatch;
                                # bounds the gradient scale of dense batches
    seed: int = 0
    dtype: str = "float64"  # float32 roughly halves step time at desk scale

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps", f"must be >= 0, got {self.steps}")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.batch_anchors < 1:
            raise ConfigError("batch_anchors", "must be >= 1")
        if self.hard_negative_ratio < 0:
            raise ConfigError("hard_negative_ratio", "must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", f"must be float32 or float64, got {self.dtype!r}")


@dataclass
class Grads:
    w1: np.ndarray
    b1: np.ndarray
    wd: np.ndarray
    bd: np.ndarray
    wp: np.ndarray
    bp: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Grads":
        return cls(*[np.zeros_like(a) for a in params.arrays()])

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.wd, self.bd, self.wp, self.bp]

    def add_(self, other: "Grads") -> None:
        for a, b in zip(self.arrays(), other.arrays()):
            a += b

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def _smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def assign_anchors(cfg: ModelConfig, scene: Scene, labeled_ids: set[int],
                   anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Match anchors to labeled boxes by center containment.

    Returns (pos_idx, pos_actor): indices of positive anchors and, for each,
    the index into ``scene.actors`` it regresses. An anchor inside several
    labeled boxes goes to the box with the nearest center.
    """
    best_d2 = np.full(len(anchors), np.inf)
    best_actor = np.full(len(anchors), -1, dtype=int)
    for ai, actor in enumerate(scene.actors):
        if actor.actor_id not in labeled_ids:
            continue
        box = actor.box
        c, s = math.cos(box.heading), math.sin(box.heading)
        dx = anchors[:, 0] - box.cx
        dy = anchors[:, 1] - box.cy
        inside = (np.abs(dx * c + dy * s) <= 0.5 * box.length) & \
                 (np.abs(-dx * s + dy * c) <= 0.5 * box.width)
        d2 = dx * dx + dy * dy
        take = inside & (d2 < best_d2)
        best_d2[take] = d2[take]
        best_actor[take] = ai
    pos = np.nonzero(best_actor >= 0)[0]
    return pos, best_actor[pos]


@dataclass
class SceneSupervision:
    """Everything about (scene, label state) the loss needs that does not
    depend on the parameters; built once, reused across training steps.

    Only supervised anchors are kept: positives first, then the negative
    candidates (anchors in labeled regions outside every labeled box).
    """

    rows: np.ndarray          # (R,) anchor indices, positives then negatives
    patches: np.ndarray       # (R, input_dim), sliced to the rows above
    n_pos: int
    box_targets: np.ndarray   # (P, 6)
    traj_targets: np.ndarray  # (P, T, 2)
    pos_anchors: np.ndarray   # (P, 2)
    empty_cell_members: list  # per labeled-but-positive-free region, the
                              # positions of its negatives in the neg block


def build_supervision(mcfg: ModelConfig, scene: Scene, state: SceneLabelState,
                      dtype: str = "float64") -> SceneSupervision | None:
    """Precompute anchor assignment and targets; None when nothing is labeled."""
    if not state.any_labeled:
        return None
    anchors = mcfg.anchor_centers()
    grid_h, grid_w = state.labeled_mask.shape
    ex, ey = scene.extent
    w_idx = np.minimum((anchors[:, 0] / ex * grid_w).astype(int), grid_w - 1)
    h_idx = np.minimum((anchors[:, 1] / ey * grid_h).astype(int), grid_h - 1)

    labeled_ids = state.labeled_actor_ids
    pos_idx, pos_actor = assign_anchors(mcfg, scene, labeled_ids, anchors)

    in_any_labeled_box = np.zeros(mcfg.n_anchors, dtype=bool)
    for actor in scene.actors:
        if actor.actor_id not in labeled_ids:
            continue
        box = actor.box
        c, s = math.cos(box.heading), math.sin(box.heading)
        dx = anchors[:, 0] - box.cx
        dy = anchors[:, 1] - box.cy
        in_any_labeled_box |= (np.abs(dx * c + dy * s) <= 0.5 * box.length) & \
                              (np.abs(-dx * s + dy * c) <= 0.5 * box.width)
    in_labeled_region = state.labeled_mask[h_idx, w_idx]
    neg_idx = np.nonzero(in_labeled_region & ~in_any_labeled_box)[0]

    box_targets = np.empty((len(pos_idx), 6))
    traj_targets = np.empty((len(pos_idx), mcfg.horizon, 2))
    for row, (a, ai) in enumerate(zip(pos_idx, pos_actor)):
        actor = scene.actors[int(ai)]
        anchor = anchors[a]
        box_targets[row] = [
            (actor.box.cx - anchor[0]) / mcfg.box_xy_scale,
            (actor.box.cy - anchor[1]) / mcfg.box_xy_scale,
            math.log(actor.box.length / mcfg.length_prior),
            math.log(actor.box.width / mcfg.width_prior),
            math.sin(2.0 * actor.box.heading),
            math.cos(2.0 * actor.box.heading),
        ]
        traj_targets[row] = actor.trajectory

    region_has_pos = np.zeros((grid_h, grid_w), dtype=bool)
    if len(pos_idx):
        np.logical_or.at(region_has_pos, (h_idx[pos_idx], w_idx[pos_idx]), True)
    empty_cells = np.nonzero((state.labeled_mask & ~region_has_pos).ravel())[0]
    neg_cells = h_idx[neg_idx] * grid_w + w_idx[neg_idx]
    members = [np.nonzero(neg_cells == cell)[0] for cell in empty_cells]
    members = [m for m in members if len(m)]

    rows = np.concatenate([pos_idx, neg_idx]).astype(int)
    np_dtype = np.dtype(dtype)
    return SceneSupervision(
        rows=rows,
        patches=extract_patches(mcfg, scene.features.values)[rows].astype(np_dtype),
        n_pos=len(pos_idx),
        box_targets=box_targets.astype(np_dtype),
        traj_targets=traj_targets.astype(np_dtype),
        pos_anchors=anchors[pos_idx].astype(np_dtype),
        empty_cell_members=members,
    )


def _mine_negative_positions(sup: SceneSupervision, neg_logits: np.ndarray, ratio: float) -> np.ndarray:
    """Positions (within the scene's negative block) of the mined negatives:
    the top-(ratio * n_pos, at least 1) by loss plus the worst negative of
    every labeled region holding no positive anchor. Softplus is monotone in
    the logit, so ordering by logit orders by loss; ties break on the anchor
    index."""
    n_neg = len(neg_logits)
    if n_neg == 0:
        return np.empty(0, dtype=int)
    neg_anchor_ids = sup.rows[sup.n_pos:]
    n_mined = min(n_neg, max(int(ratio * sup.n_pos), 1))
    order = np.lexsort((neg_anchor_ids, -neg_logits))
    chosen = set(order[:n_mined].tolist())
    for members in sup.empty_cell_members:
        best = members[np.lexsort((neg_anchor_ids[members], -neg_logits[members]))[0]]
        chosen.add(int(best))
    return np.array(sorted(chosen), dtype=int)


def batched_loss(params: ModelParams, sups: list[SceneSupervision],
                 cfg: TrainConfig) -> tuple[float, Grads]:
    """Sum-reduced supervised loss and gradient over a batch of scenes,
    evaluated in one pass over the concatenated supervised anchors."""
    mcfg = params.cfg
    grads = Grads.zeros_like(params)
    sups = [s for s in sups if s is not None and len(s.rows)]
    if not sups:
        return 0.0, grads

    pat = np.vstack([s.patches for s in sups])
    dt = pat.dtype
    w1, b1 = params.w1.astype(dt, copy=False), params.b1.astype(dt, copy=False)
    wd, bd = params.wd.astype(dt, copy=False), params.bd.astype(dt, copy=False)
    wp, bp = params.wp.astype(dt, copy=False), params.bp.astype(dt, copy=False)
    hidden = np.tanh(pat @ w1 + b1)
    logits = hidden @ wd[:, 0] + bd[0]

    pos_glob: list[np.ndarray] = []
    mined_glob: list[np.ndarray] = []
    offset = 0
    for sup in sups:
        n_rows = len(sup.rows)
        pos_glob.append(np.arange(offset, offset + sup.n_pos))
        mined = _mine_negative_positions(
            sup, logits[offset + sup.n_pos:offset + n_rows], cfg.hard_negative_ratio)
        mined_glob.append(offset + sup.n_pos + mined)
        offset += n_rows
    pos = np.concatenate(pos_glob)
    mined = np.concatenate(mined_glob)
    touched = np.concatenate([pos, mined])  # disjoint by construction
    if len(touched) == 0:
        return 0.0, grads

    loss = 0.0
    d_det = np.zeros((len(touched), mcfg.det_dim), dtype=dt)
    n_pos = len(pos)

    if len(mined):
        lm = logits[mined]
        loss += cfg.w_cls * float(_softplus(lm).sum())
        d_det[n_pos:, 0] = cfg.w_cls * _sigmoid(lm)

    d_pred_pos = None
    if n_pos:
        lp = logits[pos]
        loss += cfg.w_cls * float((_softplus(lp) - lp).sum())
        d_det[:n_pos, 0] = cfg.w_cls * (_sigmoid(lp) - 1.0)

        hid_pos = hidden[pos]
        det_pos = hid_pos @ wd[:, 1:7] + bd[1:7]
        resid = det_pos - np.vstack([s.box_targets for s in sups])
        loss += cfg.w_box * float(_smooth_l1(resid).sum())
        d_det[:n_pos, 1:7] = cfg.w_box * np.clip(resid, -1.0, 1.0)

        k, horizon = mcfg.n_modes, mcfg.horizon
        pred_pos = hid_pos @ wp + bp
        mode_logits = mcfg.mode_logit_gain * pred_pos[:, :k]
        raw = pred_pos[:, k:].reshape(n_pos, k, horizon, 4)
        z = np.exp(mode_logits - mode_logits.max(axis=1, keepdims=True))
        weights = z / z.sum(axis=1, keepdims=True)
        scales = mcfg.traj_scales().astype(dt)[None, None, :, :]
        pos_anchors = np.vstack([s.pos_anchors for s in sups]) if n_pos else np.zeros((0, 2))
        traj_targets = np.concatenate([s.traj_targets for s in sups], axis=0)
        means = pos_anchors[:, None, None, :] + scales * raw[:, :, :, 0:2]
        variances, dvar = _decode_variances(mcfg, raw[:, :, :, 2:4])
        diff = traj_targets[:, None, :, :] - means
        per_mode = np.sum(
            -math.log(2.0 * math.pi) - 0.5 * np.log(variances).sum(axis=3)
            - 0.5 * (diff ** 2 / variances).sum(axis=3),
            axis=2,
        )  # (P, K)
        joint = np.log(weights) + per_mode
        mx = joint.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(joint - mx).sum(axis=1))
        loss += cfg.w_nll * float(-lse.sum())
        resp = np.exp(joint - lse[:, None])

        d_pred_pos = np.zeros((n_pos, mcfg.pred_dim), dtype=dt)
        d_pred_pos[:, :k] = cfg.w_nll * mcfg.mode_logit_gain * (weights - resp)
        d_mu = cfg.w_nll * resp[:, :, None, None] * (-diff / variances) * scales
        d_logv = cfg.w_nll * resp[:, :, None, None] * 0.5 * (variances - diff ** 2) / variances ** 2 * dvar
        d_pred_pos[:, k:] = np.concatenate([d_mu, d_logv], axis=3).reshape(n_pos, -1)

    # Backprop through the shared trunk for the touched anchors only.
    hid_t = hidden[touched]
    grads.wd += hid_t.T @ d_det
    grads.bd += d_det.sum(axis=0)
    d_hidden = d_det @ wd.T
    if d_pred_pos is not None:
        grads.wp += hidden[pos].T @ d_pred_pos
        grads.bp += d_pred_pos.sum(axis=0)
        d_hidden[:n_pos] += d_pred_pos @ wp.T
    d_pre = d_hidden * (1.0 - hid_t ** 2)
    grads.w1 += pat[touched].T @ d_pre
    grads.b1 += d_pre.sum(axis=0)
    return float(loss), grads


def partial_loss(params: ModelParams, scene: Scene, state: SceneLabelState,
                 cfg: TrainConfig, sup: SceneSupervision | None = None) -> tuple[float, Grads]:
    """Sum-reduced loss over labeled supervision only, with its gradient.

    Positive anchors contribute classification, box-regression and mixture
    NLL terms; hard-mined negatives contribute classification only; all
    other anchors contribute exactly zero loss and zero gradient, and a
    scene with no labeled region yields exactly zero.
    """
    if sup is None:
        sup = build_supervision(params.cfg, scene, state)
    if sup is None:
        return 0.0, Grads.zeros_like(params)
    return batched_loss(params, [sup], cfg)


def _carve_batches(sizes: list[int], order: np.ndarray, cap_scenes: int,
                   cap_anchors: int) -> list[list[int]]:
    """Split a scene order into minibatches bounded by both a scene count
    and a supervised-anchor budget (a lone oversized scene still trains)."""
    batches: list[list[int]] = []
    cur: list[int] = []
    rows = 0
    for idx in order:
        idx = int(idx)
        if cur and (len(cur) >= cap_scenes or rows + sizes[idx] > cap_anchors):
            batches.append(cur)
            cur, rows = [], 0
        cur.append(idx)
        rows += sizes[idx]
    if cur:
        batches.append(cur)
    return batches


def train(params: ModelParams, dataset: list[tuple[Scene, SceneLabelState]],
          cfg: TrainConfig, warm_start: bool = False) -> ModelParams:
    """Minibatch gradient descent with linear learning-rate decay.

    Minibatches are bounded by scenes and by supervised anchors; with
    ``epochs`` set, the step count is epochs times the batches per pass.
    Re-initializes from ``cfg.seed`` unless ``warm_start``; deterministic
    given the seed and dataset order. Raises if the loss goes non-finite.
    """
    cfg.validate()
    if not dataset:
        raise InvalidInputError("training dataset is empty")
    out = params.copy() if warm_start else init_params(params.cfg, cfg.seed)
    sups = [sup for scene, state in dataset
            if (sup := build_supervision(out.cfg, scene, state, dtype=cfg.dtype)) is not None]
    if not sups:
        raise InvalidInputError("no scene in the dataset has a labeled region")
    sizes = [len(s.rows) for s in sups]
    per_epoch = max(1, len(_carve_batches(sizes, np.arange(len(sups)), cfg.batch_size,
                                          cfg.batch_anchors)))
    steps = cfg.steps if cfg.epochs is None else cfg.epochs * per_epoch
    if steps == 0:
        return out

    rng = np.random.default_rng(cfg.seed)
    queue = _carve_batches(sizes, rng.permutation(len(sups)), cfg.batch_size, cfg.batch_anchors)
    cursor = 0
    for step in range(steps):
        frac = step / max(steps - 1, 1)
        lr = cfg.learning_rate * (1.0 - (1.0 - cfg.lr_end_frac) * frac)
        if cursor >= len(queue):
            queue = _carve_batches(sizes, rng.permutation(len(sups)), cfg.batch_size,
                                   cfg.batch_anchors)
            cursor = 0
        batch = [sups[i] for i in queue[cursor]]
        cursor += 1
        batch_loss, batch_grads = batched_loss(out, batch, cfg)
        if not math.isfinite(batch_loss):
            raise TrainingDivergedError(step)
        for p, g in zip(out.arrays(), batch_grads.arrays()):
            p -= lr * g
    return out


def dataset_loss(params: ModelParams, dataset: list[tuple[Scene, SceneLabelState]],
                 cfg: TrainConfig) -> float:
    return sum(partial_loss(params, s, st, cfg)[0] for s, st in dataset)
