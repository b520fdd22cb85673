"""Desk-scale simulator of cost-aware, region-level active labeling for
joint object detection and trajectory prediction."""

from .errors import (ConfigError, InvalidInputError, InvalidQueryError, RegalError,
                     TrainingDivergedError)
from .geometry import OrientedBox, iou
from .grid import Region, make_regions
from .harness import RunConfig, RunState, compare_methods, density_experiment, run
from .metrics import (EvalConfig, EvalReport, SelectionStats, average_precision,
                      evaluate_pool, mean_ade, per_action_report, selection_stats)
from .model import (Detection, GmmPrediction, ModelConfig, ModelParams, TrainConfig,
                    decode_detections, forward, gmm_nll, init_params, nms, partial_loss,
                    predict_trajectories, train)
from .oracle import (LabelSet, LabelingOracle, PoolState, SceneLabelState, apply_query,
                     label_region, true_cost)
from .scenegen import (Actor, FeatureRaster, GenConfig, Scene, classify_action,
                       generate_pool, load_pool, save_pool, synthesize_features)
from .scoring import (Criterion, RegionScore, coreset_select, detection_entropy,
                      estimated_cost, prediction_entropy, score_regions)
from .selection import QueryPlan, SelectionConfig, greedy_select, random_regions, random_scenes

__version__ = "0.1.0"
