"""ADMM-based weight pruning, quantization and clustering for small networks."""

from .errors import (
    AdmmcError,
    ConfigError,
    ConsistencyError,
    DegenerateInputError,
    DivergenceError,
    ExactnessError,
    FormatError,
    InputError,
)

__version__ = "0.1.0"

__all__ = [
    "AdmmcError",
    "ConfigError",
    "ConsistencyError",
    "DegenerateInputError",
    "DivergenceError",
    "ExactnessError",
    "FormatError",
    "InputError",
    "__version__",
]
