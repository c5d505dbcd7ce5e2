"""Exception hierarchy shared across the package.

The CLI maps these onto exit-code classes: configuration problems,
data problems, and everything else (runtime).
"""


class KwspotError(Exception):
    """Base class for all package errors."""


class ConfigError(KwspotError):
    """Invalid or unknown configuration (bad key, bad value, bad combination)."""


class DataError(KwspotError):
    """Problem with corpus files, manifests, stores, or audio input."""


class NoEnrollmentError(DataError):
    """A cross-utterance enrollment was requested for a speaker with no usable entry."""

    def __init__(self, speaker_id: str, detail: str = ""):
        msg = f"no usable enrollment for speaker {speaker_id!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.speaker_id = speaker_id


class DimensionError(KwspotError):
    """Operand shapes violate an operation's contract. Message names both shapes."""


class ValidationError(KwspotError):
    """A value is outside its documented domain (labels, probabilities, eps, ...)."""


class NonFiniteError(KwspotError):
    """An operation produced NaN or infinity. Message names the offending op."""


class UsageError(KwspotError):
    """An API was called in a way its contract forbids."""


class CheckpointError(KwspotError):
    """Base class for binary tensor-file problems."""


class CorruptFileError(CheckpointError):
    """File is truncated, has bad magic, or fails structural checks."""


class VersionError(CheckpointError):
    """File was written with an unsupported format version."""


class MismatchError(CheckpointError):
    """Stored config or array shapes do not match what the caller expects."""
