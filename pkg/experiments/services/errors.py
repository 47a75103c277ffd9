"""
Exception hierarchy for the deposition lab.

Every domain error derives from ``DepositionLabError`` so management commands
can translate them into exit codes in one place.
"""

from typing import Optional


class DepositionLabError(Exception):
    """Base class for all domain errors."""


class GraphError(DepositionLabError):
    """Invalid adhesion or driver graph input."""


class EmptyVertexSet(GraphError):
    pass


class VertexOutOfRange(GraphError):
    pass


class SelfLoop(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class DisconnectedGraph(GraphError):
    pass


class NotReachable(GraphError):
    """No directed path exists; the driver graph is not irreducible."""


class NotLazy(GraphError):
    pass


class NotIrreducible(GraphError):
    pass


class DriverSpecError(DepositionLabError):
    """Invalid probability vector, transition matrix or layer parameters."""


class DepthBoundTooSmall(DepositionLabError):
    pass


class StateCapExceeded(DepositionLabError):
    pass


class CertificateViolation(DepositionLabError):
    """A communication bound failed on the truncated chain."""

    def __init__(self, message: str, check=None):
        super().__init__(message)
        self.check = check


class NeumannDivergence(DepositionLabError):
    """The Neumann series for (1 - M22)^-1 is not certified to converge."""

    def __init__(self, message: str, norm: Optional[float] = None):
        super().__init__(message)
        self.norm = norm


class PerronFailure(DepositionLabError):
    pass


class CycleTimeout(DepositionLabError):
    pass


class SmallGraph(DepositionLabError):
    """The argmax-change indicator is only exact on more than two vertices."""


class BoundViolationBeyondNoise(DepositionLabError):
    pass


class ConfigError(DepositionLabError):
    """Experiment configuration problem with per-field diagnostics."""

    def __init__(self, errors: dict[str, str]):
        self.errors = dict(errors)
        detail = "; ".join(f"{field}: {msg}" for field, msg in sorted(self.errors.items()))
        super().__init__(f"Invalid experiment configuration: {detail}")
