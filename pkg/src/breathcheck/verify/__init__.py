from .client import submit_remote
from .pipeline import run_verification
from .protocol import SubmissionPayload, parse_payload, serialize_payload
from .server import StubServer, stub_server
from .session import (
    BiometricStub,
    Capability,
    DevicePolicy,
    Frame,
    Outcome,
    State,
    VerificationSession,
    begin_session,
    co_present,
)

__all__ = [
    "BiometricStub", "Capability", "DevicePolicy", "Frame", "Outcome", "State", "StubServer",
    "SubmissionPayload", "VerificationSession", "begin_session", "co_present", "parse_payload",
    "run_verification", "serialize_payload", "stub_server", "submit_remote",
]
