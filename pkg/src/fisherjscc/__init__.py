"""Fisher-information-regularized joint source-channel coding for classification."""

__version__ = "0.1.0"

from . import autodiff, channel, data, experiments, models, rng, robustness, train

__all__ = [
    "autodiff",
    "channel",
    "data",
    "experiments",
    "models",
    "rng",
    "robustness",
    "train",
    "__version__",
]
