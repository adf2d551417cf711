"""Grid vision transformer for three-grade classification of paired T1/T2 volumes."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (CLASS_NAMES, GridSample, ScanRecord, SyntheticSpec, Volume, augment,
                   central_sample, gen_synthetic, load_records, load_volume, pack_grid,
                   parse_manifest, unpack_grid, write_volume)
from .errors import *  # noqa: F401,F403
from .estimator import GridViTClassifier
from .evaluation import CVReport, nested_cv, stratified_folds, stratified_holdout
from .interpret import ClassMap, explain_stack, export_heatmap, rollout
from .metrics import MetricSet, compute_metrics
from .model import GRIDVIT_TINY, ModelConfig, forward_classify, forward_late_fusion, init_params
from .training import TrainConfig, evaluate, fit

__version__ = "0.1.0"
