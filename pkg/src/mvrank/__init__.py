"""Multi-aspect preference models with learned aspect-covariance matrices.

Provides CP-factorization predictors with multivariate-Gaussian pointwise
and Gaussian-tail pairwise ranking objectives, global and personalized
covariance learning under inverse-Wishart priors, independent-Gaussian and
single-aspect pairwise baselines, and NDCG / error-correlation evaluation.
"""

__version__ = "0.1.0"

from .data import (Dataset, Observation, SplitSpec, SyntheticConfig, filter_min_observations,
                   generate_synthetic, ingest, split, write_dataset)
from .errors import (DataError, DegenerateCovarianceError, DegenerateVarianceError,
                     InvalidInputError, MvrankError, NumericError, UndefinedMetricError)
from .model import CovarianceSet, Hyperparams, LatentFactors, Model
from .checkpoint import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, em_fit

__all__ = [
    "__version__",
    "Dataset", "Observation", "SplitSpec", "SyntheticConfig",
    "filter_min_observations", "generate_synthetic", "ingest", "split",
    "write_dataset",
    "DataError", "DegenerateCovarianceError", "DegenerateVarianceError",
    "InvalidInputError", "MvrankError", "NumericError", "UndefinedMetricError",
    "CovarianceSet", "Hyperparams", "LatentFactors", "Model",
    "load_checkpoint", "save_checkpoint",
    "TrainConfig", "em_fit",
]
