"""Exception hierarchy shared by the whole package.

The three concrete classes map onto the CLI exit codes: configuration
problems (2), numerical failures (3), and protocol violations (4).
"""


class WadcError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(WadcError):
    """Invalid configuration, case file, or argument combination."""

    exit_code = 2


class NumericalError(WadcError):
    """A numerical procedure failed (singularity, divergence, bad branch)."""

    exit_code = 3


class ProtocolError(WadcError):
    """The measurement/identification protocol was violated or incomplete."""

    exit_code = 4
