"""Exception taxonomy shared by every robustkit module.

All failure modes surface as a subclass of :class:`RobustkitError`; callers
(including the CLI) can distinguish configuration problems from runtime
problems by type alone.
"""


class RobustkitError(Exception):
    """Base class for every error raised by robustkit."""


class ConfigError(RobustkitError):
    """Invalid configuration: bad shapes, bad hyperparameters, key mismatches."""


class ValidationError(RobustkitError):
    """Numerical input violates a documented precondition (e.g. soft-target row sums)."""


class UsageError(RobustkitError):
    """An API was driven out of contract (e.g. backward called twice on one tape)."""


class NonFiniteError(RobustkitError):
    """An engine operation produced NaN or Inf from finite inputs."""


class AttackError(RobustkitError):
    """Adversarial example generation failed (e.g. non-finite input gradient)."""


class ParseError(RobustkitError):
    """A byte-level file format violated its schema.

    ``offset`` carries the byte position of the first inconsistency when it
    is known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(RobustkitError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """Checkpoint file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture differs from the target model's."""

    def __init__(self, expected, actual):
        super().__init__(
            f"architecture mismatch: model is '{expected}' but checkpoint holds '{actual}'"
        )
        self.expected = expected
        self.actual = actual
