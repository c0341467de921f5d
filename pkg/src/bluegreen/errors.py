"""Exception types shared across the engine.

Every error that can surface at the CLI or HTTP layer derives from
EngineError so the interface layer can map them to machine-readable
error payloads without enumerating modules.
"""


class EngineError(Exception):
    """Base class for all engine failures."""


class TerrainParseError(EngineError):
    """Raster input could not be parsed; message names the offending line/tag."""


class UnsupportedFormatError(EngineError):
    """Input is structurally valid but uses an unsupported variant."""


class ConfigurationError(EngineError):
    """Invalid project, storm, or solver configuration."""


class GeometryError(EngineError):
    """Intervention or building geometry is unusable (e.g. pond over a building)."""


class SolverDivergenceError(EngineError):
    """Solver produced a non-finite value; carries cell index and sim time."""

    def __init__(self, message: str, cell: tuple[int, int] | None = None,
                 time_s: float | None = None):
        super().__init__(message)
        self.cell = cell
        self.time_s = time_s


class ConservationError(EngineError):
    """Volume ledger failed to close within tolerance."""


class UsageError(EngineError):
    """API misuse, e.g. comparing scenarios with different return periods."""


class StaleVersionError(EngineError):
    """Compare-and-set failed: the caller edited an outdated version."""

    def __init__(self, message: str, current_version: int):
        super().__init__(message)
        self.current_version = current_version
