"""Error types raised by the forge pipeline."""


class ForgeError(Exception):
    """Base class for every error the pipeline raises on purpose"""


class ConfigurationError(ForgeError):
    """Invalid run configuration or missing credentials"""


class PreconditionError(ForgeError):
    """An operation was called on input that violates its contract"""


class RetriableError(ForgeError):
    """Marker base: the failed step may be attempted again"""


class ReplyParseError(RetriableError):
    """A model reply did not contain the expected JSON payload"""


class RoutingError(ForgeError):
    """A category has no instruction variant (others, knowledge)"""


class BackendError(ForgeError):
    def __init__(self, message, status_code=None):
        super().__init__(message)
        self.status_code = status_code


class TransientBackendError(BackendError, RetriableError):
    """5xx, timeouts, connection failures and empty replies"""


class PermanentBackendError(BackendError):
    """4xx-class rejections; retrying will not help"""


class ImageLoadError(ForgeError):
    """A source or target image could not be read or decoded"""


class IngestError(ForgeError):
    """An input file could not be read at all"""


class LedgerError(ForgeError):
    """The work-dir ledger is missing or an event breaks the status machine"""


class ResumeRefusedError(LedgerError):
    """The ledger was produced under a different config hash"""


class WorkDirLockedError(LedgerError):
    """Another process holds the work-dir lock"""


class InfeasibleBalanceError(ForgeError):
    def __init__(self, message, shortfall=None):
        super().__init__(message)
        self.shortfall = shortfall or {}


class OutputError(ForgeError):
    """The output directory could not be written"""


class StorageError(ForgeError):
    """The work-dir image store could not be written"""


class InstructionRejectedError(ForgeError):
    """Every attempt at an instruction failed leakage or format checks"""

    def __init__(self, message, reasons=(), attempts=0):
        super().__init__(message)
        self.reasons = list(reasons)
        self.attempts = attempts
