"""Exception hierarchy shared by all shedd modules."""


class SheddError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SheddError):
    """Tensor extents are invalid or do not match an operation's contract."""


class GeometryError(ShapeError):
    """Image geometry (channels / spatial extents) does not match expectations."""


class ContractError(SheddError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConfigError(SheddError):
    """Invalid or incomplete experiment configuration."""


class DataError(SheddError):
    """Problems with dataset payloads or splits."""


class ManifestError(DataError):
    """Dataset manifest is malformed or inconsistent with its payload."""


class CorruptDatasetError(DataError):
    """Dataset payload bytes do not match the manifest (size or checksum)."""
