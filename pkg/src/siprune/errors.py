"""Exception hierarchy shared by all siprune modules."""


class SiPruneError(Exception):
    """Base class for all siprune errors."""


class ShapeError(SiPruneError):
    """Operand shapes are incompatible."""


class DomainError(SiPruneError):
    """A value is outside the mathematical domain of an operation."""


class PatternError(SiPruneError):
    """A sparsity pattern cannot be applied to the given matrix."""


class FormatError(SiPruneError):
    """A tensor file is malformed. Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class AbsorptionError(SiPruneError):
    """A transform cannot be folded into weights without extra runtime ops.

    ``edges`` lists the offending (producer_signal, consumer_layer) pairs.
    """

    def __init__(self, message: str, edges: list):
        super().__init__(f"{message}: {edges}")
        self.edges = edges


class ConfigError(SiPruneError):
    """A pipeline configuration key is missing or invalid."""


class DivergenceError(SiPruneError):
    """An optimization objective became non-finite."""
