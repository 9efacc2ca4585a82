"""Attentive-pooling vision transformer, built from scratch on numpy.

A small CNN stem turns a byte image into a grid of patch features; a
magnitude or learned criterion ranks the grid cells and only the top k become
transformer tokens; the encoder's second half then progressively drops the
tokens the class token attends to least.  Everything runs in float64 with
hand-written forward and backward passes, an exact multiply-add cost model,
and a finite-difference gradient audit.
"""

from .analysis import FlopsReport, GradCheckReport, count_flops, grad_check, measured_flops
from .data import Dataset, Sample, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .encoder import AtpVariant, keep_schedule
from .estimator import APViTClassifier
from .model import (
    ApvitConfig,
    Diagnostics,
    HeadKind,
    PoolingMode,
    forward,
    init_params,
    load_checkpoint,
    param_shapes,
    predict_label,
    save_checkpoint,
    with_pooling,
)
from .pooling import CriterionKind
from .stem import StemConfig
from .train import EvalResult, KrSchedule, TrainConfig, evaluate, train_loop

__all__ = [
    "APViTClassifier",
    "ApvitConfig",
    "AtpVariant",
    "CriterionKind",
    "Dataset",
    "Diagnostics",
    "EvalResult",
    "FlopsReport",
    "GradCheckReport",
    "HeadKind",
    "KrSchedule",
    "PoolingMode",
    "Sample",
    "StemConfig",
    "SyntheticSpec",
    "TrainConfig",
    "count_flops",
    "evaluate",
    "forward",
    "generate_synthetic",
    "grad_check",
    "init_params",
    "keep_schedule",
    "load_checkpoint",
    "load_dataset",
    "measured_flops",
    "param_shapes",
    "predict_label",
    "save_checkpoint",
    "save_dataset",
    "train_loop",
    "with_pooling",
]
