"""Exception types shared across the pipeline."""


class LvSegError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(LvSegError, ValueError):
    pass


class InvalidSpec(LvSegError, ValueError):
    pass


class InvalidThreshold(LvSegError, ValueError):
    pass


class DomainError(LvSegError, ValueError):
    pass


class StaleCache(LvSegError, RuntimeError):
    """backward() was called without a matching forward()."""


class Diverged(LvSegError, ArithmeticError):
    """Training or evolution produced a non-finite loss/energy."""


class ImageTooSmall(LvSegError, ValueError):
    pass


class EmptyMask(LvSegError, ValueError):
    pass


class DegenerateMask(LvSegError, ValueError):
    pass


class DegenerateContour(LvSegError, ValueError):
    pass


class InterfaceLost(LvSegError, RuntimeError):
    """The level-set function no longer changes sign."""


class Collapsed(LvSegError, RuntimeError):
    """A snake shrank below a usable perimeter."""


class SingularSystem(LvSegError, ArithmeticError):
    pass


class OutOfBounds(LvSegError, ValueError):
    pass


class MalformedImage(LvSegError, ValueError):
    pass


class MalformedContour(LvSegError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MalformedFile(LvSegError, ValueError):
    pass


class ExtentMismatch(LvSegError, ValueError):
    pass


class TooFewStacks(LvSegError, ValueError):
    pass


class Undefined(LvSegError, ZeroDivisionError):
    """A metric is mathematically undefined for the given input."""
