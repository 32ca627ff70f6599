"""Shared exception taxonomy.

The CLI maps these onto exit codes: configuration problems exit 2,
everything else raised from library code exits 1.
"""


class VrebertError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(VrebertError):
    """A caller violated a documented precondition."""


class DimensionError(VrebertError):
    """Array shapes are incompatible for the requested operation."""


class ValidationError(VrebertError):
    """A data record violates one of its invariants."""


class ConfigurationError(VrebertError):
    """Settings are internally inconsistent or incompatible with the data."""


class FormatError(VrebertError):
    """A file is malformed, truncated, or carries the wrong magic."""


class NotFoundError(VrebertError):
    """A requested item (e.g. an image id) is absent from the dataset."""
