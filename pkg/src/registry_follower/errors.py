"""Exception hierarchy shared across the follower."""


class FollowerError(Exception):
    """Base class for all follower errors."""

    code = "error"


class ConfigError(FollowerError):
    code = "config-invalid"


class MalformedVersion(FollowerError, ValueError):
    code = "malformed-version"


class MalformedRange(FollowerError, ValueError):
    code = "malformed-range"


class FeedUnavailable(FollowerError):
    """Transient feed failure; caller retries with the same cursor."""

    code = "feed-unavailable"


class CursorExpired(FollowerError):
    """The feed no longer recognizes the cursor; a full resync is required."""

    code = "cursor-expired"


class InvalidDoc(FollowerError):
    """Unparseable change document; the event must be dead-lettered."""

    code = "invalid-doc"


class StoreUnavailable(FollowerError):
    code = "store-unavailable"


class BlobError(FollowerError):
    code = "blob-error"


class BlobNotFound(BlobError):
    code = "not-found"


class AlreadyStored(BlobError):
    """The key is already committed — an idempotent success signal, raised so
    callers that expected to write can short-circuit to the existing blob."""

    code = "already-stored"

    def __init__(self, key, location):
        super().__init__(f"{key} already stored at {location}")
        self.key = key
        self.location = location


class TicketExpired(BlobError):
    code = "ticket-expired"


class ChecksumMismatch(BlobError):
    code = "checksum-mismatch"


class BlobCorruption(BlobError):
    """Stored bytes no longer match the committed digest."""

    code = "corruption"


class StoreFull(BlobError):
    code = "store-full"


class ScenarioInvalid(FollowerError):
    code = "scenario-invalid"
