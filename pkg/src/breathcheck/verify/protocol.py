"""Submission wire format.

Each message is a 4-byte big-endian length followed by a UTF-8 JSON
document.  Request::

    {"v": 1, "session_id": str,
     "frames": [{"timestamp_ms": int, "image": base64 JPEG,
                 "detections": [{"class", "confidence", "cx", "cy", "w", "h"}]}],
     "policy": {"k": int, "n": int, "floor": float},
     "short_evidence": bool}

Response: ``{"v": 1, "verdict": "accepted" | "rejected", "reason": str}``.
"""

from __future__ import annotations

import base64
import binascii
import json
import socket
import struct
from dataclasses import dataclass

from ..errors import ProtocolError
from ..head import Detection
from .session import EvidenceFrame, Frame

VERSION = 1
HEADER = struct.Struct(">I")
MAX_MESSAGE = 64 * 1024 * 1024


@dataclass(frozen=True)
class SubmissionPayload:
    session_id: str
    frames: tuple[EvidenceFrame, ...]
    k: int
    n: int
    floor: float
    short_evidence: bool = False

    def to_document(self) -> dict:
        return {
            "v": VERSION,
            "session_id": self.session_id,
            "frames": [
                {
                    "timestamp_ms": e.frame.timestamp_ms,
                    "image": base64.b64encode(e.frame.image).decode("ascii"),
                    "detections": [d.to_dict() for d in e.detections],
                }
                for e in self.frames
            ],
            "policy": {"k": self.k, "n": self.n, "floor": self.floor},
            "short_evidence": self.short_evidence,
        }

    @classmethod
    def from_document(cls, doc) -> "SubmissionPayload":
        if not isinstance(doc, dict):
            raise ProtocolError("payload must be a JSON object")
        if doc.get("v") != VERSION:
            raise ProtocolError(f"unsupported version {doc.get('v')!r}")
        try:
            session_id = doc["session_id"]
            policy = doc["policy"]
            k, n, floor = int(policy["k"]), int(policy["n"]), float(policy["floor"])
            frames = []
            last_ts = None
            for f in doc["frames"]:
                ts = int(f["timestamp_ms"])
                if last_ts is not None and ts <= last_ts:
                    raise ProtocolError("frame timestamps must be strictly increasing")
                last_ts = ts
                image = base64.b64decode(f["image"], validate=True)
                dets = tuple(Detection.from_dict(d) for d in f["detections"])
                frames.append(EvidenceFrame(Frame(image, ts), dets, True))
        except (KeyError, TypeError, ValueError, binascii.Error) as exc:
            raise ProtocolError(f"malformed payload: {exc!r}") from None
        if not isinstance(session_id, str) or not session_id:
            raise ProtocolError("session_id must be a non-empty string")
        if not frames:
            raise ProtocolError("payload carries no frames")
        if len(frames) > k:
            raise ProtocolError(f"{len(frames)} frames exceed k={k}")
        short = bool(doc.get("short_evidence", False))
        if len(frames) < k and not short:
            raise ProtocolError(f"{len(frames)} frames but k={k} and short_evidence unset")
        return cls(session_id, tuple(frames), k, n, floor, short)


def encode_document(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_document(data: bytes):
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"not a JSON document: {exc}") from None


def serialize_payload(payload: SubmissionPayload) -> bytes:
    return encode_document(payload.to_document())


def parse_payload(data: bytes) -> SubmissionPayload:
    return SubmissionPayload.from_document(decode_document(data))


def verdict_document(verdict: str, reason: str = "") -> dict:
    return {"v": VERSION, "verdict": verdict, "reason": reason}


# ---------------------------------------------------------------- framing


def frame_message(body: bytes) -> bytes:
    if len(body) > MAX_MESSAGE:
        raise ProtocolError(f"message of {len(body)} bytes exceeds limit")
    return HEADER.pack(len(body)) + body


def _recv_exactly(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 16))
        if not chunk:
            if remaining == n:
                return None
            raise ConnectionError("connection closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> bytes | None:
    """Read one framed message; ``None`` on clean EOF before a header."""
    header = _recv_exactly(sock, HEADER.size)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_MESSAGE:
        raise ProtocolError(f"announced message of {length} bytes exceeds limit")
    body = _recv_exactly(sock, length) if length else b""
    if body is None:
        raise ConnectionError("connection closed mid-message")
    return body


def write_message(sock: socket.socket, body: bytes) -> None:
    sock.sendall(frame_message(body))
