"""Exception hierarchy shared by every module."""


class LinguineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(LinguineError, ValueError):
    pass


class OutOfBoundsError(LinguineError, IndexError):
    pass


class VolumeFormatError(LinguineError, ValueError):
    """A volume file is malformed. ``field`` names the offending header entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InsufficientLandmarksError(LinguineError, ValueError):
    pass


class DegenerateGeometryError(LinguineError, ValueError):
    pass


class EmptyMaskError(LinguineError, ValueError):
    pass


class NoTumourAtClickError(LinguineError, ValueError):
    pass


class BackendError(LinguineError, RuntimeError):
    """External segmenter failure; carries the captured process output."""

    def __init__(self, message: str, returncode: int | None = None, output: str = ""):
        text = message
        if returncode is not None:
            text += f" (exit code {returncode})"
        if output:
            text += f"\n--- backend output ---\n{output.strip()}"
        super().__init__(text)
        self.returncode = returncode
        self.output = output


class GridMismatchError(LinguineError, ValueError):
    pass


class TrainingError(LinguineError, ValueError):
    pass


class ForestFormatError(LinguineError, ValueError):
    pass


class PhantomError(LinguineError, ValueError):
    pass


class ManifestError(LinguineError, ValueError):
    pass


class BackendGridMismatchError(BackendError, GridMismatchError):
    """Backend output is not on the scan's grid."""
