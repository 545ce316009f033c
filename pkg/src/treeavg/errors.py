"""Exception types shared across the package."""


class TreeavgError(Exception):
    """Base class for all errors raised by this package."""


class EmptyInput(TreeavgError):
    """An operation received zero rows (or fewer rows than folds)."""


class WidthMismatch(TreeavgError):
    """A feature row does not match the width the model was fit on."""


class LengthMismatch(TreeavgError):
    """Two paired vectors have different lengths."""


class PositivityViolation(TreeavgError):
    """A treatment arm is entirely absent where both arms are required."""


class MissingModel(TreeavgError):
    """A site model required to build the augmented data is absent."""


class ModelDataMismatch(TreeavgError):
    """An ensemble model was paired with data it was not fit on."""


class SubsampleTooSmall(TreeavgError):
    """A per-tree subsample is too small to admit any split."""


class NoConsistentSubjects(TreeavgError):
    """No subject's observed treatment matches the decision rule."""


class InvalidConfig(TreeavgError):
    """A simulation configuration value is out of range or inconsistent."""


class ConfigError(TreeavgError):
    """A config file is unreadable, has unknown keys, or bad values."""


class DigestMismatch(TreeavgError):
    """A model envelope failed its integrity check on load."""


class UnsupportedVersion(TreeavgError):
    """A model envelope declares a format version this build cannot read."""


class SchemaError(TreeavgError):
    """A model envelope is structurally invalid."""
