"""Exception types shared across the package."""


class GrokMuonError(Exception):
    """Base class for all package errors."""


class DimensionError(GrokMuonError, ValueError):
    pass


class ConfigError(GrokMuonError, ValueError):
    pass


class ContractError(GrokMuonError, ValueError):
    pass


class NumericInputError(GrokMuonError, ValueError):
    """Raised when an operation receives NaN or infinite input."""


class NumericFault(GrokMuonError, ArithmeticError):
    """A training step produced a non-finite loss."""


class AnalysisError(GrokMuonError, ValueError):
    pass
