"""Multi-task meta learning on a shared-trunk, multi-head network."""

__version__ = "0.1.0"

from .episodes import Episode, generate_combos, meta_batch, sample_episode
from .estimators import MetaMultiTaskNet, MultiTaskNet, SingleTaskNet
from .harness import DataConfig, ExperimentSpec, GridManifest, default_grid, default_specs, run
from .meta import central_gradient, exact_meta_gradient, first_order_vector, inner_adapt, outer_step
from .network import NetConfig, ParamSet, forward, init_params
from .tasks import TASK_IDS, Batch, TaskSpec, make_splits, make_world, sample_batch
from .tensor import Tensor
from .trainers import RunReport, StopState, TrainConfig, finetune, meta_train, train_mtl, train_single

__all__ = [
    "Batch",
    "DataConfig",
    "Episode",
    "ExperimentSpec",
    "GridManifest",
    "MetaMultiTaskNet",
    "MultiTaskNet",
    "NetConfig",
    "ParamSet",
    "RunReport",
    "SingleTaskNet",
    "StopState",
    "TASK_IDS",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "central_gradient",
    "default_grid",
    "default_specs",
    "exact_meta_gradient",
    "finetune",
    "first_order_vector",
    "forward",
    "generate_combos",
    "init_params",
    "inner_adapt",
    "make_splits",
    "make_world",
    "meta_batch",
    "meta_train",
    "outer_step",
    "run",
    "sample_batch",
    "sample_episode",
    "train_mtl",
    "train_single",
]
