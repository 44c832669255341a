"""Exception hierarchy shared across the package.

Every error raised by earlin code is an ``EarlinError`` subclass; plain
``OSError`` from the filesystem is allowed to propagate unchanged so callers
can tell IO failures apart from data problems.
"""


class EarlinError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(EarlinError, ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(EarlinError):
    """A persisted artifact (tensor file, profile, manifest) is malformed."""


class MalformedHeaderError(FormatError):
    """File header is not recognizable (bad magic, field layout, or dtype)."""


class VersionMismatchError(MalformedHeaderError):
    """File declares a format version this code does not support."""


class PayloadMismatchError(FormatError):
    """Binary payload length disagrees with what the header declares."""


class NonFiniteDataError(FormatError):
    """Payload contains NaN or infinite values."""


class InvariantViolationError(FormatError):
    """A loaded object fails its structural invariants."""


class ManifestError(FormatError):
    """Dataset manifest is malformed or internally inconsistent."""


class BackendError(EarlinError):
    """Classifier backend failed to produce a label."""

    code = "backend_failure"


class UnknownSampleError(BackendError):
    """Lookup backend has no label registered for the payload digest."""

    code = "unknown_sample"
