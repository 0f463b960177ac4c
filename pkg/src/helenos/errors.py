"""Exception types shared across the package."""


class HelenosError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(HelenosError):
    """Invalid configuration value or scenario file."""


class ProtocolError(HelenosError):
    """Malformed or semantically invalid frame."""


class RoutingError(HelenosError):
    """Frame addressed to a node that does not own the bucket."""


class AccessSetError(HelenosError):
    """A transaction touched a bucket outside its declared access set.

    This always indicates a broken access-set planner, so it aborts the
    whole run instead of the transaction.
    """


class RetryLimitError(HelenosError):
    """A transaction exceeded the configured attempt limit."""


class TxnStateError(HelenosError):
    """A transaction handle was used after commit, or misused."""


class ServerError(HelenosError):
    """An error reply received from a store node."""

    def __init__(self, code: int, message: str) -> None:
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


class VerificationError(HelenosError):
    """A recorded run failed an offline correctness check."""
