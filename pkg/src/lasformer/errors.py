"""Exception types raised across the package."""


class LasformerError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LasformerError, ValueError):
    pass


class DegenerateRowError(LasformerError, ValueError):
    """A softmax row had no admissible position (empty selection set)."""


class GraphError(LasformerError, RuntimeError):
    """Misuse of the autograd graph (non-scalar loss, double backward)."""


class NumericError(LasformerError, ArithmeticError):
    pass


class DegenerateTargetError(LasformerError, ValueError):
    """A target sequence consisted only of padding."""


class DivergenceError(LasformerError, ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class InputError(LasformerError, ValueError):
    pass


class ConfigError(LasformerError, ValueError):
    pass


class SpecError(LasformerError, ValueError):
    """Task specification cannot be realised (e.g. vocabulary too small)."""


class EmptyReportError(LasformerError, ValueError):
    pass


class InstrumentationError(LasformerError, KeyError):
    pass
