"""Exception hierarchy.  All library errors derive from :class:`TDSError`."""


class TDSError(Exception):
    pass


class NumericalFailure(TDSError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class UnsupportedCombination(TDSError, ValueError):
    """Method, likelihood or mode that cannot be used together."""


class DegenerateEnsemble(TDSError, ValueError):
    """All particle weights are zero (or non-finite)."""


class DomainError(TDSError, ValueError):
    """Input outside the domain of a map (near-antipodal log, grid too small)."""


class ConfigError(TDSError, ValueError):
    """Invalid configuration; the message names the offending key or line."""
