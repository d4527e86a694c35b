"""Gated decoupled distillation, relational CKA alignment and group-wise LSQ
quantization, with a small synthetic harness that exercises them together."""
from .errors import (ConfigError, ContractError, DomainError, FormatError, GraceError,
                     NumericalError, ShapeError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DomainError", "FormatError", "GraceError",
           "NumericalError", "ShapeError", "__version__"]
