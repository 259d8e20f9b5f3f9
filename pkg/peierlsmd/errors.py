"""Exception hierarchy for peierlsmd."""
from typing import Optional


class PeierlsMDError(Exception):
    """Base class for all peierlsmd errors."""


class ConfigurationError(PeierlsMDError, ValueError):
    """Invalid run configuration or parameter file.

    Attributes:
        field: Dotted path of the offending field, if known
        line: 1-based line in the source file, if it could be located
    """

    def __init__(self, message: str, field: Optional[str] = None,
                 line: Optional[int] = None) -> None:
        location = ""
        if field:
            location = f" [{field}"
            location += f", line {line}]" if line else "]"
        super().__init__(f"{message}{location}")
        self.field = field
        self.line = line


class SchemaVersionError(ConfigurationError):
    """Record or config written with an unsupported schema version."""


class NumericalError(PeierlsMDError, RuntimeError):
    """A numerical step could not be completed.

    Attributes:
        condition: Condition estimate or offending eigenvalue, if any
        checkpoint: Path of the last good checkpoint, filled in by the driver
    """

    def __init__(self, message: str, condition: Optional[float] = None) -> None:
        super().__init__(message)
        self.condition = condition
        self.checkpoint: Optional[str] = None


class GeometryError(NumericalError):
    """Two nuclei came closer than the allowed minimum distance."""


class DegeneratePairError(NumericalError):
    """Nonadiabatic coupling requested for a (near-)degenerate pair."""

    def __init__(self, i: int, j: int, gap: float) -> None:
        super().__init__(
            f"states {i} and {j} are degenerate (gap {gap:.3e} hartree)",
            condition=gap,
        )
        self.pair = (i, j)
        self.gap = gap


class EmptyBranchError(PeierlsMDError, ValueError):
    """Collapse onto an adiabatic state with (numerically) no population."""
