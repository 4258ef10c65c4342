"""Graph-based anomaly detection for layer-wise melt-pool monitoring data."""
from .errors import ConfigError, DataContractError, MeltGraphError, NumericalError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "DataContractError", "MeltGraphError", "NumericalError",
           "__version__"]
