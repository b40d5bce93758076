"""Typed errors shared across the package.

Grouped by the CLI exit code they map to; library code raises these
directly and the CLI translates them at the boundary.
"""

from __future__ import annotations


class VwsegError(Exception):
    """Base class for all package errors."""


# --- configuration problems (exit code 2) ---

class ConfigError(VwsegError):
    """Malformed, unknown, or out-of-range configuration."""


# --- missing inputs (exit code 3) ---

class MissingInput(VwsegError):
    """A required file or directory does not exist."""


# --- inconsistent data (exit code 4) ---

class DataError(VwsegError):
    """Inputs exist but do not fit together."""


class ShapeMismatch(DataError):
    pass


class MissingFrames(DataError):
    """Frame/mask sequences with gaps or mismatched counts."""


class LabelMismatch(DataError):
    """A mask label that the current model has no words for."""


class BadFrameShape(DataError):
    """Encoder input is not an HxWx3 image of workable size."""


class BadMagic(DataError):
    """File does not start with the expected format magic."""


class TruncatedFile(DataError):
    """File ends before the declared payload."""


class OversizedLabel(DataError):
    """Mask value exceeds the declared number of classes."""


class LengthMismatch(DataError):
    """Tensor container payload length disagrees with its header."""


# --- numeric / algorithmic failures (exit code 1 unless noted) ---

class NonFinite(VwsegError):
    """A NaN or infinity appeared in a primitive's output."""


class ZeroNormRow(VwsegError):
    """Cosine similarity asked of a (near-)zero vector."""


class NotScalarLoss(VwsegError):
    """backward() called on a non-scalar node."""


class EmptyInput(VwsegError):
    """An operation that needs at least one point got none."""


class EmptyClass(DataError):
    """A declared class has no pixels in the annotation."""


class AllIgnored(VwsegError):
    """Every pixel was excluded from the loss."""


class TooShortVideo(DataError):
    """Episode sampling needs at least two annotated frames."""


class TooFewFrames(VwsegError):
    """Decay-style metrics need at least four evaluated frames."""


class ObjectTooLarge(ConfigError):
    """A synthetic object cannot fit inside the frame at t=0."""


class EmptyBox(DataError):
    """A degenerate (zero-area) initialization box."""


class EmptyBackground(DataError):
    """Boxes cover the whole frame; no pixels left for background words."""


class AllClustersDiscarded(DataError):
    """Every in-box cluster resembled the background too closely."""


class TrainingAborted(VwsegError):
    """Training stopped because the loss went non-finite."""

    def __init__(self, episode_index: int, message: str = ""):
        self.episode_index = episode_index
        super().__init__(message or f"non-finite loss at episode {episode_index}")
