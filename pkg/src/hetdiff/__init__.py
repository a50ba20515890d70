"""Drug-gene link prediction with meta-path attention, normalized
heterogeneous propagation and diffusion-generated hard negatives."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, UndefinedMetricError
from .training import TrainConfig, TrainedModel, train

__all__ = ["ConfigError", "DataError", "UndefinedMetricError", "TrainConfig", "TrainedModel", "train", "__version__"]
