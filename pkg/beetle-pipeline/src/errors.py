class PipelineError(Exception):
    """Base class for every error raised by the beetle pipeline"""


class ConfigurationError(PipelineError):
    """Invalid configuration, fixture or palette"""


class InputError(PipelineError, ValueError):
    """Operation called with arguments that violate its preconditions"""


class BackendError(PipelineError):
    """A detector, verifier or segmenter backend failed or broke its contract"""


class StageError(PipelineError):
    """A pipeline stage could not complete for one tray or crop"""


class MetadataMismatch(InputError):
    """Number of reading-order crops differs from the number of metadata rows"""

    def __init__(self, detected: int, rows: int):
        self.detected = detected
        self.rows = rows
        super().__init__(f"metadata mismatch: {detected} crops vs {rows} metadata rows")
