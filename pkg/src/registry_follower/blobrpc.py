"""Manager wire protocol: length-prefixed JSON over TCP.

Framing: 4-byte big-endian payload length, then that many bytes of UTF-8
JSON. Requests are {"op": ..., ...}; responses are {"ok": true, ...} or
{"ok": false, "error": <code>, "message": ...}. Ops:

    {"op": "reserve", "key": K, "size": N}        -> {"ok": true, "ticket": {...}}
    {"op": "commit", "ticket_id": T, "checksum": C} -> {"ok": true, "location": {...}}
    {"op": "lookup", "key": K}                    -> {"ok": true, "location": {...}}
    {"op": "stats", "threshold": N | null}        -> {"ok": true, "stats": {...}}

The error code "already-stored" carries the existing location so writers can
treat it as success. Index bookkeeping is the only thing on the wire —
blob bytes move via direct segment-file I/O on the shared filesystem.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
from pathlib import Path
from typing import Optional, Union

from . import blobstore
from .blobstore import BlobIndex, BlobLocation, SizeStats, WriteTicket
from .errors import (
    AlreadyStored,
    BlobCorruption,
    BlobError,
    BlobNotFound,
    ChecksumMismatch,
    StoreFull,
    TicketExpired,
)

_LEN = struct.Struct(">I")
MAX_FRAME = 1 << 20  # index messages are tiny; anything bigger is a bug

_ERROR_CLASSES = {
    cls.code: cls
    for cls in (BlobNotFound, TicketExpired, ChecksumMismatch, StoreFull, BlobCorruption)
}


def send_frame(sock: socket.socket, obj: dict) -> None:
    payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(_LEN.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket) -> Optional[dict]:
    """Read one frame; None on clean EOF at a frame boundary."""
    header = _recv_exact(sock, _LEN.size)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise BlobError(f"frame of {length} bytes exceeds protocol maximum")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise BlobError("connection closed mid-frame")
    return json.loads(payload.decode("utf-8"))


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class _ManagerHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        index: BlobIndex = self.server.index  # type: ignore[attr-defined]
        while True:
            try:
                req = recv_frame(self.request)
            except (BlobError, json.JSONDecodeError, ConnectionError):
                return
            if req is None:
                return
            send_frame(self.request, self._dispatch(index, req))

    @staticmethod
    def _dispatch(index: BlobIndex, req: dict) -> dict:
        try:
            op = req.get("op")
            if op == "reserve":
                ticket = index.reserve(req["key"], int(req["size"]))
                return {"ok": True, "ticket": ticket.to_json()}
            if op == "commit":
                loc = index.commit(req["ticket_id"], req["checksum"])
                return {"ok": True, "location": loc.to_json()}
            if op == "lookup":
                loc = index.lookup(req["key"])
                return {"ok": True, "location": loc.to_json()}
            if op == "stats":
                st = index.stats(req.get("threshold"))
                return {"ok": True, "stats": st.to_json()}
            return {"ok": False, "error": "bad-request", "message": f"unknown op {op!r}"}
        except AlreadyStored as e:
            return {
                "ok": False,
                "error": e.code,
                "message": str(e),
                "key": e.key,
                "location": e.location.to_json(),
            }
        except BlobError as e:
            return {"ok": False, "error": e.code, "message": str(e)}
        except (KeyError, TypeError, ValueError) as e:
            return {"ok": False, "error": "bad-request", "message": repr(e)}


class BlobManagerServer:
    """Serves one BlobIndex over TCP; one thread per connection."""

    def __init__(self, index: BlobIndex, host: str = "127.0.0.1", port: int = 0):
        self.index = index
        self._server = socketserver.ThreadingTCPServer((host, port), _ManagerHandler)
        self._server.daemon_threads = True
        self._server.index = index  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "BlobManagerServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "BlobManagerServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class BlobClient:
    """Worker-side view of the store: manager RPC for the index, direct
    segment-file I/O for the bytes.

    Keeps one connection open and reconnects once on failure. Not safe to
    share between threads — give each worker its own client.
    """

    def __init__(self, address: tuple[str, int], root: Union[str, Path], timeout: float = 30.0):
        self.address = (address[0], int(address[1]))
        self.root = Path(root)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> "BlobClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _roundtrip(self, req: dict) -> Optional[dict]:
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
        send_frame(self._sock, req)
        return recv_frame(self._sock)

    def _call(self, req: dict) -> dict:
        fresh = self._sock is None
        try:
            resp = self._roundtrip(req)
            if resp is None and not fresh:
                raise BlobError("stale connection")
        except (OSError, BlobError):
            if fresh:
                self.close()
                raise
            # Stale socket (manager restarted, idle timeout): retry on a
            # fresh connection before giving up.
            self.close()
            resp = self._roundtrip(req)
        if resp is None:
            self.close()
            raise BlobError("manager closed connection")
        if resp.get("ok"):
            return resp
        code = resp.get("error", "blob-error")
        message = resp.get("message", code)
        if code == AlreadyStored.code:
            raise AlreadyStored(resp["key"], BlobLocation.from_json(resp["location"]))
        raise _ERROR_CLASSES.get(code, BlobError)(message)

    def reserve(self, key: str, size: int) -> WriteTicket:
        resp = self._call({"op": "reserve", "key": key, "size": size})
        return WriteTicket.from_json(resp["ticket"])

    def commit(self, ticket_id: str, checksum: str) -> BlobLocation:
        resp = self._call({"op": "commit", "ticket_id": ticket_id, "checksum": checksum})
        return BlobLocation.from_json(resp["location"])

    def lookup(self, key: str) -> BlobLocation:
        resp = self._call({"op": "lookup", "key": key})
        return BlobLocation.from_json(resp["location"])

    def stats(self, threshold: Optional[int] = None) -> SizeStats:
        resp = self._call({"op": "stats", "threshold": threshold})
        d = resp["stats"]
        return SizeStats(
            count=d["count"],
            total_bytes=d["total_bytes"],
            mean=d["mean"],
            median=d["median"],
            threshold=d.get("threshold"),
            retained_count_fraction=d.get("retained_count_fraction"),
            retained_byte_fraction=d.get("retained_byte_fraction"),
        )

    def store(self, key: str, data: bytes) -> BlobLocation:
        try:
            ticket = self.reserve(key, len(data))
        except AlreadyStored as e:
            return e.location
        checksum = blobstore.write_range(self.root, ticket, data)
        return self.commit(ticket.ticket_id, checksum)

    def fetch(self, key: str) -> bytes:
        return blobstore.read_range(self.root, self.lookup(key))
