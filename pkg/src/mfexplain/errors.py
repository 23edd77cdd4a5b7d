"""Exception hierarchy shared by every module.

Each class carries the exit code the command line maps it to, so the CLI
never has to enumerate error types.
"""

from __future__ import annotations


class MfExplainError(Exception):
    exit_code = 1


class ConfigError(MfExplainError):
    exit_code = 2


class DataError(MfExplainError):
    exit_code = 3


class TransportError(MfExplainError):
    exit_code = 4


# -- data ingestion ---------------------------------------------------------

class MalformedRow(DataError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        super().__init__(f"malformed row at line {line}" + (f": {reason}" if reason else ""))


class EmptyFile(DataError):
    pass


class ItemMismatch(DataError):
    pass


class InsufficientItems(DataError):
    pass


class UnknownLabel(DataError):
    pass


# -- metadata enrichment ----------------------------------------------------

class AuthFailure(TransportError):
    pass


class RateLimited(TransportError):
    pass


class NetworkError(TransportError):
    pass


# -- factorization ----------------------------------------------------------

class NonFiniteInput(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DegenerateData(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


class EmptyInput(DataError):
    pass


# -- recommendation ---------------------------------------------------------

class NoUnratedItems(DataError):
    pass


# -- explanation ------------------------------------------------------------

class MissingMetadata(DataError):
    def __init__(self, item_id: int):
        self.item_id = item_id
        super().__init__(f"item {item_id} has no title in the catalog")


class MissingProfiles(ConfigError):
    pass


class EmptyHistory(ConfigError):
    pass


class Timeout(TransportError):
    pass


class HttpError(TransportError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}" + (f": {body[:200]}" if body else ""))


class NoBoxedAnswer(TransportError):
    pass


class PartialResult(TransportError):
    """Raised when only some latent types could be described.

    ``completed`` lists the type indices that succeeded and ``profiles`` holds
    their descriptions, so callers can persist what was obtained.
    """

    def __init__(self, completed, profiles, cause: Exception):
        self.completed = list(completed)
        self.profiles = list(profiles)
        self.cause = cause
        super().__init__(f"user-type interpretation stopped after types {self.completed}: {cause}")


# -- statistics -------------------------------------------------------------

class EmptyGroup(DataError):
    pass


class InsufficientData(DataError):
    pass


class AllValuesTied(DataError):
    pass


class InvalidParameter(DataError, ValueError):
    pass
