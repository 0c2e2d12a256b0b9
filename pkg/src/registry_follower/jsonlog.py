"""Structured logging: one JSON object per line on stderr.

Every record carries ts/level/logger/msg; anything passed via
``logger.info(..., extra={...})`` — feed sequence numbers, job ids, write
ticket ids, blob keys, worker names — is merged in verbatim so a grep for
``"job": 17`` follows one download across ingest, lease, retry and commit.
"""

from __future__ import annotations

import json
import logging
import sys
from typing import IO, Optional

# Attributes every LogRecord carries; anything else came from `extra`.
_STANDARD = frozenset(
    logging.LogRecord("", 0, "", 0, "", (), None).__dict__
) | {"message", "asctime", "taskName"}


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {
            "ts": round(record.created, 3),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key in _STANDARD or key in out:
                continue
            try:
                json.dumps(value)
            except (TypeError, ValueError):
                value = repr(value)
            out[key] = value
        if record.exc_info and record.exc_info[0] is not None:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out, separators=(",", ":"), sort_keys=False)


def setup(level: str = "INFO", stream: Optional[IO[str]] = None) -> logging.Logger:
    """Point the package's root logger at a JSON-lines handler.

    Idempotent: repeated calls reconfigure rather than stack handlers.
    """
    logger = logging.getLogger("registry_follower")
    logger.setLevel(level.upper())
    for h in list(logger.handlers):
        logger.removeHandler(h)
    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    logger.addHandler(handler)
    logger.propagate = False
    return logger
