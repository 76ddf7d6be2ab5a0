"""Parallel SSM + windowed-attention forecaster with learned branch weighting.

The library is organized around a small numpy-backed autodiff engine
(:mod:`paratime.tensor`), the two sequence branches (:mod:`paratime.ssm`,
:mod:`paratime.attention`), the per-patch fusion weighter
(:mod:`paratime.weighter`), the assembled model (:mod:`paratime.model`),
data handling (:mod:`paratime.data`), training (:mod:`paratime.trainer`)
and cost/weight analysis (:mod:`paratime.analysis`). ``paratime.cli``
provides the train/eval/count-flops/export-weights/sweep drivers.
"""

from .data import SplitSpec, TimeSeriesDataset, load_csv, split, synthetic_sines, window_iter
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError, SplitError
from .gradcheck import GradCheckReport, grad_check
from .model import ModelConfig, ParallelTime, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor
from .trainer import EvalReport, TrainConfig, evaluate, huber_loss, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "EvalReport",
    "GradCheckReport",
    "ModelConfig",
    "NumericError",
    "ParallelTime",
    "ShapeError",
    "SplitError",
    "SplitSpec",
    "Tape",
    "Tensor",
    "TimeSeriesDataset",
    "TrainConfig",
    "evaluate",
    "grad_check",
    "huber_loss",
    "load_checkpoint",
    "load_csv",
    "save_checkpoint",
    "split",
    "synthetic_sines",
    "train",
    "window_iter",
    "__version__",
]
