"""Few-shot personalization of a multi-label emotion head by meta-learning."""

from metaperser.errors import ConfigError, ContractError, FormatError, MetaPerSERError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "FormatError", "MetaPerSERError", "ShapeError", "__version__"]
