"""Shared exception types.

Config/input problems raise ValueError subclasses; backend/transport
problems raise ProtocolError.  The CLI maps the former to exit code 2 and
the latter to exit code 3.
"""


class DistributionError(ValueError):
    """Invalid logits or probability vector (non-finite, wrong length, ...)."""


class AbsoluteContinuityError(DistributionError):
    """KL(P||Q) requested where some P(i) > 0 but Q(i) = 0."""


class SegmentationError(ValueError):
    """Segmentation violates the partition contract or fails to parse."""


class ScenarioError(ValueError):
    """Backend scenario file is malformed or incomplete."""


class MetricsError(ValueError):
    """Evaluation input files are malformed or inconsistent."""


class ProtocolError(RuntimeError):
    """Backend or wire-protocol failure (handshake, ordering, transport)."""
