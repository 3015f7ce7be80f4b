"""Exception hierarchy shared by the library, the CLI and the web service.

Every error carries the process exit code the ``dag`` command returns for it.
"""


class DagError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class UsageError(DagError):
    """Bad arguments, bad configuration or an unsupported request."""

    exit_code = 1


class ConfigError(UsageError):
    pass


class UnsupportedVariantError(UsageError):
    """An ablation variant that this build deliberately does not implement."""


class StepError(UsageError, ValueError):
    """Diffusion step outside the noise schedule."""


class PoolingConfigError(UsageError, ValueError):
    pass


class AttentionIndexError(UsageError, IndexError):
    pass


class DataError(DagError):
    """Problems with input files, samples or shapes derived from them."""

    exit_code = 2


class ParseError(DataError):
    def __init__(self, path, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class SampleValidationError(DataError, ValueError):
    pass


class StructureError(DataError, ValueError):
    """Mismatched counts, widths or level structure."""


class DegenerateCloudError(DataError, ValueError):
    pass


class ShapeError(DataError, ValueError):
    pass


class PointCountError(DataError, ValueError):
    pass


class DatasetError(DataError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class CheckpointError(DagError):
    exit_code = 3


class NumericAbortError(DagError):
    """Training produced a non-finite loss."""

    exit_code = 4

    def __init__(self, message: str, batch_index: int, dump_path=None):
        self.batch_index = batch_index
        self.dump_path = dump_path
        super().__init__(message)
