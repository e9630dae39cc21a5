"""End-to-end driver: frames in, terminal session out."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

from ..errors import OracleUnavailable
from ..head import Detection
from .client import submit_remote
from .session import DevicePolicy, Frame, Outcome, State, VerificationSession, begin_session


def run_verification(frames: Iterable[tuple[Frame, Sequence[Detection]]], policy: DevicePolicy, *,
                     biometric: Callable[[VerificationSession], bool] | None = None,
                     endpoint=None, session_id: str | None = None,
                     submit: Callable = submit_remote) -> VerificationSession:
    """Observe frames until co-presence or timeout, then route and verify.

    ``frames`` may be lazy; iteration stops as soon as capture ends.  A
    missing biometric oracle or endpoint on the chosen route rejects.
    """
    session = begin_session(policy, session_id)
    for frame, detections in frames:
        session.observe_frame(frame, detections)
        if session.state is not State.CAPTURING:
            break
    if session.state is State.CAPTURING:
        session.expire()
    if session.state is not State.CO_PRESENT:
        return session
    session.route_decision()
    if session.state is State.ROUTED_LOCAL:
        if biometric is None:
            return session.local_biometric_check(_unavailable)
        return session.local_biometric_check(biometric)
    if endpoint is None:
        return session.apply_outcome(Outcome(State.REJECTED, "no_endpoint"))
    return session.apply_outcome(submit(session.build_submission(), endpoint))


def _unavailable(session):
    raise OracleUnavailable("no biometric oracle configured")
