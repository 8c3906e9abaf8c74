from typing import Any, List


class KeypointSkillError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(KeypointSkillError, ValueError):
    pass


class FormatError(KeypointSkillError, ValueError):
    """A file on disk does not follow its documented layout."""


# Geometry
class DegenerateRotation(KeypointSkillError, ValueError):
    pass


class InvalidTransform(KeypointSkillError, ValueError):
    pass


class PixelOutOfBounds(KeypointSkillError, IndexError):
    pass


class CountExceedsCloud(KeypointSkillError, ValueError):
    pass


# Features
class ZeroVector(KeypointSkillError, ValueError):
    pass


class MissingFeatureFile(KeypointSkillError, FileNotFoundError):
    pass


class IndexMismatch(KeypointSkillError, ValueError):
    pass


# Keypoints
class EmptyScene(KeypointSkillError, ValueError):
    pass


class DistillationFailed(KeypointSkillError, RuntimeError):
    def __init__(self, message: str, reason: str = "exhausted_rounds", rounds: int = 0):
        super().__init__(message)
        self.reason = reason
        self.rounds = rounds


# Proposal backends
class SpecTooFine(KeypointSkillError, ValueError):
    pass


class UnknownLabel(KeypointSkillError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown label"


class BackendError(KeypointSkillError, RuntimeError):
    pass


class ParseError(KeypointSkillError, ValueError):
    """A backend response could not be turned into a proposal or a mask choice.

    `kind` is one of: missing_block, invalid_json, unknown_label, index_out_of_range.
    """

    def __init__(self, message: str, kind: str = "invalid_json"):
        super().__init__(message)
        self.kind = kind


class NoMasks(KeypointSkillError, ValueError):
    pass


class MissingMaskFile(KeypointSkillError, FileNotFoundError):
    pass


# Policy
class ShapeMismatch(KeypointSkillError, ValueError):
    pass


class DimensionMismatch(KeypointSkillError, ValueError):
    pass


# Planning / runtime
class StartInCollision(KeypointSkillError, ValueError):
    pass


class GoalInCollision(KeypointSkillError, ValueError):
    pass


class OutOfWorkspace(KeypointSkillError, ValueError):
    pass


class AllKeypointsNull(KeypointSkillError, RuntimeError):
    pass


class InferenceFailed(KeypointSkillError, RuntimeError):
    def __init__(self, message: str, reason: str = "exhausted", diagnostics: List[Any] | None = None):
        super().__init__(message)
        self.reason = reason
        self.diagnostics = list(diagnostics or [])
