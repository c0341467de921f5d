"""Flood-risk planning engine: rain-source attribution and intervention appraisal.

Simulates pluvial storms over a city-scale terrain raster with a
shallow-water solver, measures building exposure and monetary damage, and
ranks where in the catchment removing or soaking up rainfall buys the most
damage reduction for the green space available.
"""

__version__ = "0.1.0"

from .errors import (ConfigurationError, ConservationError, EngineError,
                     GeometryError, SolverDivergenceError, TerrainParseError,
                     UnsupportedFormatError, UsageError)

__all__ = [
    "ConfigurationError", "ConservationError", "EngineError", "GeometryError",
    "SolverDivergenceError", "TerrainParseError", "UnsupportedFormatError",
    "UsageError", "__version__",
]
