"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter values."""


class UsageError(RuntimeError):
    """An object was used outside its lifecycle (e.g. stepping a finished episode)."""


class FormatError(ValueError):
    """A binary file has the wrong magic bytes or is otherwise malformed."""


class VersionError(FormatError):
    """A binary file declares an unsupported format version."""


class TruncationError(FormatError):
    """A binary file ended before its declared contents."""


class MissingArtifactError(FileNotFoundError):
    """A run directory lacks an artifact a command depends on."""
