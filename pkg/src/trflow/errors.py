"""Structured errors shared across the package.

Exit-code classes for the CLI: config errors map to 2, blow-up (including
chart-guard and totally-real failures during a flow) to 3, solver failures
to 4, and I/O problems to 5.
"""


class TrflowError(Exception):
    """Base class for all package errors."""


class ConfigError(TrflowError):
    """Invalid experiment configuration or preset parameters."""


class ChartGuardError(TrflowError):
    """A point left the admissible region of the single affine chart."""


class TotallyRealViolation(TrflowError):
    """The normal metric eta lost positive definiteness at some node."""

    def __init__(self, node, min_eig):
        self.node = tuple(int(k) for k in node)
        self.min_eig = float(min_eig)
        super().__init__(
            f"totally-real condition violated at node {self.node}: "
            f"min eig(eta) = {self.min_eig:.3e}"
        )


class ImmersionDegenerate(TrflowError):
    """The induced metric g lost positive definiteness at some node."""

    def __init__(self, node, min_eig):
        self.node = tuple(int(k) for k in node)
        self.min_eig = float(min_eig)
        super().__init__(
            f"induced metric degenerate at node {self.node}: "
            f"min eig(g) = {self.min_eig:.3e}"
        )


class BlowUpError(TrflowError):
    """The flow stepper could not continue (singularity reached)."""

    def __init__(self, time, cause):
        self.time = float(time)
        self.cause = str(cause)
        super().__init__(f"flow blow-up at t = {self.time:.6g}: {self.cause}")


class SolverError(TrflowError):
    """An iterative solver failed to converge."""


class SnapshotError(TrflowError):
    """Malformed snapshot file."""
