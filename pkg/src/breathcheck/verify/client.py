"""Remote submission client with bounded exponential-backoff retries."""

from __future__ import annotations

import logging
import socket
import time
from typing import Callable

from ..errors import ProtocolError, RetryableError
from . import protocol
from .session import Outcome, State

log = logging.getLogger(__name__)

RETRIES = 3
BACKOFF_SECONDS = 0.2
TIMEOUT_SECONDS = 5.0


def parse_endpoint(endpoint: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def send_once(payload: protocol.SubmissionPayload, endpoint, timeout: float = TIMEOUT_SECONDS) -> dict:
    """One request/response exchange; transport failures raise RetryableError."""
    host, port = parse_endpoint(endpoint)
    body = protocol.serialize_payload(payload)
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            protocol.write_message(sock, body)
            reply = protocol.read_message(sock)
    except (OSError, ConnectionError) as exc:
        raise RetryableError(f"{host}:{port}: {exc}") from exc
    if reply is None:
        raise RetryableError(f"{host}:{port}: connection closed without a reply")
    doc = protocol.decode_document(reply)
    if not isinstance(doc, dict) or doc.get("verdict") not in ("accepted", "rejected"):
        raise ProtocolError(f"unexpected response {doc!r}")
    return doc


def submit_remote(payload: protocol.SubmissionPayload, endpoint, *, retries: int = RETRIES,
                  backoff: float = BACKOFF_SECONDS, timeout: float = TIMEOUT_SECONDS,
                  sleep: Callable[[float], None] = time.sleep,
                  send: Callable[..., dict] = send_once) -> Outcome:
    """Submit ``payload`` and map the verdict to a terminal state.

    Transport failures are retried ``retries`` times after the first attempt,
    sleeping ``backoff * 2**i`` between attempts; if every attempt fails the
    outcome is Rejected with reason ``unreachable``.
    """
    for attempt in range(retries + 1):
        try:
            doc = send(payload, endpoint, timeout)
        except RetryableError as exc:
            log.warning("submission attempt %d failed: %s", attempt + 1, exc)
            if attempt < retries:
                sleep(backoff * 2 ** attempt)
            continue
        except ProtocolError as exc:
            return Outcome(State.REJECTED, f"protocol_error: {exc}")
        if doc["verdict"] == "accepted":
            return Outcome(State.ACCEPTED, doc.get("reason", ""))
        return Outcome(State.REJECTED, doc.get("reason", "") or "rejected")
    return Outcome(State.REJECTED, "unreachable")
