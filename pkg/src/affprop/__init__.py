"""Cross-task affinity propagation on procedural scenes.

The package learns per-task non-local affinity matrices over a coarse
feature grid, mixes them across tasks, and diffuses initial predictions
through the mixed matrix before upsampling, for joint depth, surface
normal and segmentation estimation on synthetic piecewise-planar scenes.
"""

from .affinity import (AffinityMatrix, CrossTaskEnsemble, SimilarityFn,
                       combine_affinities, compute_affinity)
from .config import RunConfig, config_digest, emit_config, parse_config
from .diffusion import DiffusionConfig, diffuse, laplacian
from .errors import (CheckpointError, ConfigError, ContractError,
                     DimensionError, FormatError, UndefinedResultError)
from .experiments import ExperimentPlan, run_experiment
from .losses import LossWeights, berhu_loss, pairwise_loss, total_loss
from .network import MultiTaskNet
from .scenes import (Dataset, SceneSample, SceneSpec, generate_dataset,
                     read_dataset, write_dataset)
from .stats import MatchTable, PairMatchConfig, pair_match_stats
from .tasks import ALL_TASKS, TaskKind
from .train import evaluate, fit, predict

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix", "CrossTaskEnsemble", "SimilarityFn",
    "combine_affinities", "compute_affinity",
    "RunConfig", "config_digest", "emit_config", "parse_config",
    "DiffusionConfig", "diffuse", "laplacian",
    "CheckpointError", "ConfigError", "ContractError", "DimensionError",
    "FormatError", "UndefinedResultError",
    "ExperimentPlan", "run_experiment",
    "LossWeights", "berhu_loss", "pairwise_loss", "total_loss",
    "MultiTaskNet",
    "Dataset", "SceneSample", "SceneSpec", "generate_dataset",
    "read_dataset", "write_dataset",
    "MatchTable", "PairMatchConfig", "pair_match_stats",
    "ALL_TASKS", "TaskKind",
    "evaluate", "fit", "predict",
    "__version__",
]
