"""Exception hierarchy shared by every module."""


class FedSubError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(FedSubError, ValueError):
    """An index, length or shape does not fit the model it refers to."""


class ConfigError(FedSubError, ValueError):
    """A configuration value is outside its admissible range."""


class UnsupportedOperation(FedSubError, NotImplementedError):
    """The task does not provide the requested oracle."""


class ResourceError(FedSubError, MemoryError):
    """A dense computation was requested above its size cap."""


class PreconditionViolation(FedSubError, ValueError):
    """Inputs violate a mathematical precondition of a check."""


class SingularMatrixError(FedSubError, ValueError):
    """Matrix is numerically singular; carries the smallest singular value."""

    def __init__(self, message: str, sigma_min: float):
        super().__init__(message)
        self.sigma_min = sigma_min


class DivergenceError(FedSubError, ArithmeticError):
    """Training produced non-finite or exploding values."""

    def __init__(self, message: str, round_index: int | None = None, iteration: int | None = None):
        super().__init__(message)
        self.round_index = round_index
        self.iteration = iteration

    def with_round(self, round_index: int) -> "DivergenceError":
        if self.round_index is not None:
            return self
        return DivergenceError(f"round {round_index}: {self}", round_index, self.iteration)


class MalformedInputError(FedSubError, ValueError):
    """Input file rows could not be parsed; ``line_numbers`` lists them (1-based)."""

    def __init__(self, message: str, line_numbers: list[int]):
        shown = ", ".join(str(n) for n in line_numbers[:20])
        more = "" if len(line_numbers) <= 20 else f" (+{len(line_numbers) - 20} more)"
        super().__init__(f"{message}: lines {shown}{more}")
        self.line_numbers = list(line_numbers)
