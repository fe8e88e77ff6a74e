"""Exception types shared across the toolkit."""


class RRMKitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(RRMKitError):
    """Tensor/layer shapes do not agree."""


class ConfigurationError(RRMKitError):
    """A config value or descriptor is invalid."""


class ContractError(RRMKitError):
    """An API precondition was violated (e.g. non-scalar backward sink)."""


class CheckpointError(RRMKitError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic/version does not match this toolkit."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before the declared payload."""


class DataFormatError(RRMKitError):
    """A binary dataset file is malformed."""
