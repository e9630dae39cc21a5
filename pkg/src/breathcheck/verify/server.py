"""In-process stand-in for the remote identity verifier.

The stub does no identity matching; it returns a configured verdict:

``accept-all``   accept every well-formed payload
``reject-all``   reject every well-formed payload
``match-token``  accept iff ``session_id`` equals the configured token
"""

from __future__ import annotations

import logging
import socketserver
import threading

from ..errors import BindFailure, ProtocolError
from . import protocol

log = logging.getLogger(__name__)

MODES = ("accept-all", "reject-all", "match-token")


def decide(mode: str, payload: protocol.SubmissionPayload, token: str | None = None) -> dict:
    if mode == "accept-all":
        return protocol.verdict_document("accepted", "stub_accept_all")
    if mode == "reject-all":
        return protocol.verdict_document("rejected", "stub_reject_all")
    if payload.session_id == token:
        return protocol.verdict_document("accepted", "token_match")
    return protocol.verdict_document("rejected", "token_mismatch")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: StubServer = self.server.owner
        sock = self.request
        while True:
            try:
                body = protocol.read_message(sock)
            except ProtocolError as exc:
                # cannot resynchronise after a bad length header
                protocol.write_message(sock, protocol.encode_document(
                    protocol.verdict_document("rejected", f"protocol_error: {exc}") | {"error": True}))
                return
            except (ConnectionError, OSError):
                return
            if body is None:
                return
            server.requests += 1
            try:
                payload = protocol.parse_payload(body)
                doc = decide(server.mode, payload, server.token)
            except ProtocolError as exc:
                server.protocol_errors += 1
                doc = protocol.verdict_document("rejected", f"protocol_error: {exc}") | {"error": True}
            try:
                protocol.write_message(sock, protocol.encode_document(doc))
            except OSError:
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class StubServer:
    """Threaded TCP stub; usable as a context manager."""

    def __init__(self, mode: str = "accept-all", token: str | None = None, host: str = "127.0.0.1", port: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown stub mode {mode!r}")
        if mode == "match-token" and not token:
            raise ValueError("match-token mode needs a token")
        self.mode = mode
        self.token = token
        self.requests = 0
        self.protocol_errors = 0
        try:
            self._server = _TCPServer((host, port), _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from None
        self._server.owner = self
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "StubServer":
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self._server.serve_forever, name="stub-verifier", daemon=True)
        self._thread.start()
        log.info("stub verifier (%s) listening on %s", self.mode, self.endpoint)
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def stub_server(mode: str = "accept-all", token: str | None = None, host: str = "127.0.0.1", port: int = 0) -> StubServer:
    """Start a stub verifier in a background thread and return its handle."""
    return StubServer(mode, token, host, port).start()
