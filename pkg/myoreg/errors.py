"""Exception hierarchy. Every error knows the exit code the CLI maps it to."""

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class MyoregError(Exception):
    """Base class for all errors raised by myoreg."""

    exit_code = EXIT_DATA


class DataError(MyoregError):
    """Input data is missing, malformed or inconsistent."""


class EmptyMaskError(DataError):
    def __init__(self, what: str = "mask"):
        super().__init__(f"EmptyMask: {what} has no set voxels")


class FullMaskError(DataError):
    def __init__(self, what: str = "mask"):
        super().__init__(f"FullMask: {what} has no unset voxels")


class GeometryMismatchError(DataError):
    """Grids that must share dims/spacing/origin do not."""


class FormatError(DataError):
    """A file could not be parsed or lies outside the supported subset."""


class ShapeMismatchError(DataError, ValueError):
    """Array arguments have incompatible shapes."""


class ConfigError(MyoregError):
    exit_code = EXIT_USAGE


class NumericError(MyoregError):
    exit_code = EXIT_NUMERIC


class NonFiniteGradientError(NumericError):
    def __init__(self, epoch: Optional[int] = None, pair: Optional[str] = None):
        self.epoch = epoch
        self.pair = pair
        where = []
        if pair is not None:
            where.append(f"pair {pair}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"NonFiniteGradient: non-finite loss or gradient{suffix}")


class NoConvergenceError(NumericError):
    def __init__(self, residual_mm: float, iterations: int, frame: Optional[int] = None):
        self.residual_mm = residual_mm
        self.iterations = iterations
        self.frame = frame
        at = f" at frame {frame}" if frame is not None else ""
        super().__init__(
            f"NoConvergence{at}: inversion residual {residual_mm:.3g} mm "
            f"after {iterations} iterations"
        )
