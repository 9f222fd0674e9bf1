"""Exception types raised across the pipeline.

Every failure mode named by a stage contract gets its own class so callers
(and the CLI exit-code mapping) can tell them apart.
"""


class FontusError(Exception):
    """Base class for all package errors."""


class UnsupportedElementTypeError(FontusError):
    """MetaImage header declares an element type we do not read."""


class PayloadLengthMismatchError(FontusError):
    """Raw payload size disagrees with DimSize * element size."""


class HeaderParseError(FontusError):
    """MetaImage header is missing required keys or is malformed."""


class NoSkullDetectedError(FontusError):
    """Threshold + shell test selected zero voxels."""


class DegenerateGeometryError(FontusError):
    """Point cloud or covariance too degenerate to fit/orient."""


class EmptyOverlapError(FontusError):
    """Registration metric had no valid overlap to evaluate."""


class EmptyLabelError(FontusError):
    """Operation requires a non-empty label."""


class GridMismatchError(FontusError):
    """Inputs must share dims/spacing/origin but do not."""


class NotWatertightError(FontusError):
    """Mesh operation requires a closed, edge-manifold surface."""


class ConfigError(FontusError):
    """Pipeline configuration is invalid or incomplete."""


class StageError(FontusError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
