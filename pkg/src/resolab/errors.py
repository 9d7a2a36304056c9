"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/compatibility/container
problems exit 2, numeric failures exit 3, usage errors exit 1.
"""


class ResolabError(Exception):
    """Base class for all package-raised errors."""


class ShapeError(ResolabError):
    """Operands or inputs have incompatible shapes; messages name the axis."""


class ResolutionError(ShapeError):
    """Spatial dims violate the model's divisibility requirement."""


class ConfigError(ResolabError):
    """Invalid configuration value or incompatible model/adapter pairing."""


class NumericError(ResolabError):
    """Non-finite values or a diverged computation."""


class ContainerError(ResolabError):
    """Malformed or incompatible serialized checkpoint/bundle file."""
