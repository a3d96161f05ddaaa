"""Prior-guided multimodal trajectory forecasting.

Pedestrian futures are multimodal: the same observed past can continue into
several distinct behaviors. This package learns a latent mode space with two
cooperating priors: a batch-level Gaussian mixture built by clustering full
trajectories, and a trainable global mixture conditioned per agent through
sparse cross attention, aligned to the batch view with entropic optimal
transport. A small reverse-mode autodiff engine over numpy arrays powers all
of it, and a theory lab certifies the underlying error bounds on exact
discrete models.
"""

from .autodiff import Tensor, no_grad
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    EmptyDatasetError,
    NumericalError,
    ParseError,
    ShapeError,
)
from .mixture import GaussianComponent, MixturePrior
from .nets import Forecaster, ModelConfig, ParamStore, load_checkpoint, save_checkpoint
from .trajectory import (
    Batch,
    PredictionSet,
    Scene,
    SynthConfig,
    TrajectoryPair,
    ade,
    fde,
    generate_synthetic,
    ingest_ethucy,
    min_of_n,
    write_ethucy,
)
from .training import AdamW, EvalReport, FitResult, LossReport, TrainConfig, evaluate, fit, infer

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Batch",
    "CheckpointError",
    "ConfigError",
    "DomainError",
    "EmptyDatasetError",
    "EvalReport",
    "FitResult",
    "Forecaster",
    "GaussianComponent",
    "LossReport",
    "MixturePrior",
    "ModelConfig",
    "NumericalError",
    "ParamStore",
    "ParseError",
    "PredictionSet",
    "Scene",
    "ShapeError",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "TrajectoryPair",
    "ade",
    "evaluate",
    "fde",
    "fit",
    "generate_synthetic",
    "infer",
    "ingest_ethucy",
    "load_checkpoint",
    "min_of_n",
    "no_grad",
    "save_checkpoint",
    "write_ethucy",
    "__version__",
]
