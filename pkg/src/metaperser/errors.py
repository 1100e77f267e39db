"""Exception types shared across the package."""


class MetaPerSERError(Exception):
    """Base class for all package errors."""


class ShapeError(MetaPerSERError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"shape mismatch in {op}: {rendered}")


class ContractError(MetaPerSERError, ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(MetaPerSERError, ValueError):
    """A file on disk does not follow the expected format."""


class ConfigError(MetaPerSERError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
