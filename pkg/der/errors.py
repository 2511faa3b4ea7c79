"""Exception types raised across the package."""

from __future__ import annotations


class DERError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DERError, ValueError):
    """Tensor shapes are incompatible with an operation or a declared layout."""


class NonFiniteError(DERError, ValueError):
    """A NaN or infinite value reached a checked computation."""


class GraphError(DERError):
    """A computation graph is malformed or used incorrectly."""


class UnboundLeafError(GraphError):
    """A graph leaf had no tensor bound to it at evaluation time."""


class UnknownProbeError(DERError, KeyError):
    """A probe name was requested that the graph never registered."""


class ReplayError(DERError):
    """Invalid use of the replay buffer or the selection utilities."""


class InsufficientEpisodesError(ReplayError):
    """The buffer holds fewer episodes than the requested mini-batch."""


class EpisodeFinishedError(DERError, RuntimeError):
    """An environment was stepped after its episode terminated."""


class ConfigError(DERError):
    """A run configuration failed to parse or validate."""


class CheckpointError(DERError):
    """A checkpoint file is missing, incomplete or of another format version."""


class MetricsFormatError(DERError):
    """A metrics CSV file is malformed."""

    def __init__(self, path: str, line: int, reason: str) -> None:
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason
