"""Exception hierarchy shared across the package."""


class CellgridError(Exception):
    """Base class for all package errors."""


class GridFileError(CellgridError):
    """Syntax or semantic error in a sectioned grid/config text file.

    Carries the 1-based line and column of the offending token when known.
    """

    def __init__(self, message: str, line: int | None = None, col: int | None = None,
                 path: str | None = None):
        self.message = message
        self.line = line
        self.col = col
        self.path = path
        loc = ""
        if path is not None:
            loc += f"{path}:"
        if line is not None:
            loc += f"{line}:"
            if col is not None:
                loc += f"{col}:"
        super().__init__(f"{loc} {message}" if loc else message)


class NetworkValidationError(GridFileError):
    """A structurally well-formed network violates a model invariant."""


class SingularJacobianError(CellgridError):
    """Newton iteration hit a singular (or numerically singular) Jacobian."""

    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        msg = f"singular Jacobian at iteration {iteration}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NotConvergedError(CellgridError):
    """An operation that requires a converged power flow got an unconverged one."""


class SetpointError(CellgridError):
    """Unknown generator or a reactive setpoint outside the generator limits."""


class ConfigError(CellgridError):
    """Invalid experiment configuration."""


class BusProtocolError(CellgridError):
    """Malformed message or protocol violation on the co-simulation bus."""
