"""Exception hierarchy shared by the pipeline stages."""


class UserFASError(Exception):
    """Base class for all package errors."""


class ConfigurationError(UserFASError):
    """Missing weights, unknown detector, bad config values."""


class ContractError(UserFASError, ValueError):
    """A documented precondition was violated by the caller."""


class IngestIOError(UserFASError, OSError):
    def __init__(self, path, reason="could not be decoded"):
        super().__init__(f"{path}: {reason}")
        self.path = path


class EmptySourceError(UserFASError):
    pass


class ManifestError(UserFASError):
    """Malformed crop tree or manifest file."""


class DuplicateRecordError(ManifestError):
    pass


class BackboneLoadError(UserFASError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingDivergedError(UserFASError):
    """Loss became non-finite; carries the last finite state."""

    def __init__(self, message, last_state=None, trace=None):
        super().__init__(message)
        self.last_state = last_state
        self.trace = trace or []


class PrerequisiteError(UserFASError):
    def __init__(self, stage, missing):
        super().__init__(f"stage '{stage}' needs '{missing}' to run first (run: userfas run {missing})")
        self.stage = stage
        self.missing = missing
