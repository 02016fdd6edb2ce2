"""Exception types shared across the package."""


class FedMarketError(Exception):
    """Base class for all package errors."""


class DimensionError(FedMarketError, ValueError):
    """Parameter vector and data shapes do not agree."""


class EmptyInputError(FedMarketError, ValueError):
    """An operation that needs at least one sample got none."""


class CapacityError(FedMarketError):
    """Exact computation requested beyond its enumeration limit."""


class RoundLogError(FedMarketError, ValueError):
    """Round log is incomplete, inconsistent, or references unknown clients."""


class LedgerError(FedMarketError):
    """Base for ledger failures."""


class BlobNotFoundError(LedgerError, KeyError):
    pass


class TransactionRejected(LedgerError, ValueError):
    pass


class BlockRejected(LedgerError, ValueError):
    pass


class UnknownKindError(LedgerError, KeyError):
    pass


class MarketError(FedMarketError):
    """Base for smart-contract (deal) failures."""


class InvalidStateError(MarketError):
    pass


class InsufficientBalanceError(MarketError):
    pass


class SettlementPolicyError(MarketError, ValueError):
    pass


class ConfigError(FedMarketError, ValueError):
    pass


class InvariantViolation(FedMarketError):
    """A run finished but one of its internal consistency checks failed."""
