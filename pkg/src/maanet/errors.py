"""Exception hierarchy shared across the package.

CLI exit codes are attached to the classes so the command layer can map an
exception straight to a process status.
"""


class MaanetError(Exception):
    exit_code = 1


class ConfigError(MaanetError, ValueError):
    exit_code = 2


class DataError(MaanetError):
    exit_code = 3


class NumericError(MaanetError, ArithmeticError):
    exit_code = 4


class ShapeError(MaanetError, ValueError):
    """Incompatible tensor dimensions for an operation."""

    exit_code = 4

    def __init__(self, op, *dims, detail=""):
        dims_txt = " vs ".join(str(list(d)) for d in dims)
        msg = f"{op}: incompatible dims {dims_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.dims = dims


class ContractError(MaanetError, RuntimeError):
    """A caller violated an operation's precondition."""


class OracleError(MaanetError, RuntimeError):
    """The gradient-check oracle could not be trusted (non-deterministic closure)."""


class UndefinedMetricError(MaanetError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
