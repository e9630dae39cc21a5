"""Co-presence verification session state machine.

Edges::

    Capturing --N consecutive co-present frames--> CoPresent
    Capturing --frame_budget frames without N--> TimedOut
    CoPresent --route_decision--> RoutedLocal | RoutedRemote
    RoutedLocal --biometric verdict--> Accepted | Rejected
    RoutedRemote --server verdict--> Accepted | Rejected

Every failure to obtain a verdict ends in Rejected.
"""

from __future__ import annotations

import enum
import secrets
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..errors import InvalidState, NoEvidence, OracleUnavailable, PolicyInvalid
from ..head import Detection

FACE = "face"
BREATHALYZER = "breathalyzer"


class Capability(enum.Enum):
    HAS_LOCAL_BIOMETRIC = "HasLocalBiometric"
    NO_LOCAL_BIOMETRIC = "NoLocalBiometric"


class State(enum.Enum):
    IDLE = "Idle"
    CAPTURING = "Capturing"
    CO_PRESENT = "CoPresent"
    ROUTED_LOCAL = "RoutedLocal"
    ROUTED_REMOTE = "RoutedRemote"
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"
    TIMED_OUT = "TimedOut"


TERMINAL = frozenset({State.ACCEPTED, State.REJECTED, State.TIMED_OUT})


@dataclass(frozen=True)
class DevicePolicy:
    capability: Capability = Capability.NO_LOCAL_BIOMETRIC
    co_presence_frames: int = 3
    confidence_floor: float = 0.5
    frame_budget: int = 30
    submission_frame_count: int = 5

    def validate(self) -> None:
        if self.co_presence_frames < 1:
            raise PolicyInvalid("co_presence_frames must be >= 1")
        if self.submission_frame_count < 1:
            raise PolicyInvalid("submission_frame_count must be >= 1")
        if not 0 < self.confidence_floor < 1:
            raise PolicyInvalid("confidence_floor must be in (0, 1)")
        if self.co_presence_frames > self.frame_budget:
            raise PolicyInvalid("co_presence_frames exceeds frame_budget")
        if self.submission_frame_count > self.frame_budget:
            raise PolicyInvalid("submission_frame_count exceeds frame_budget")


@dataclass(frozen=True)
class Frame:
    """One captured frame as encoded image bytes (JPEG)."""

    image: bytes
    timestamp_ms: int


@dataclass(frozen=True)
class EvidenceFrame:
    frame: Frame
    detections: tuple[Detection, ...]
    co_present: bool


@dataclass(frozen=True)
class Outcome:
    """Verdict from a verifier: Accepted or Rejected, with a reason."""

    state: State
    reason: str = ""


def co_present(detections: Sequence[Detection], floor: float) -> bool:
    """A face and a breathalyzer both detected at confidence >= ``floor``."""
    seen = {d.class_name for d in detections if d.confidence >= floor}
    return FACE in seen and BREATHALYZER in seen


@dataclass
class VerificationSession:
    policy: DevicePolicy
    session_id: str = field(default_factory=lambda: secrets.token_hex(8))
    state: State = State.IDLE
    consecutive_hits: int = 0
    frames_seen: int = 0
    reason: str = ""
    history: list[State] = field(default_factory=list)
    evidence: deque = field(init=False)

    def __post_init__(self):
        # holds every observed frame; selection happens in build_submission
        self.evidence = deque(maxlen=self.policy.frame_budget)
        self.history.append(self.state)

    # -- internals

    def _require(self, *states: State) -> None:
        if self.state not in states:
            wanted = " or ".join(s.value for s in states)
            raise InvalidState(f"session is {self.state.value}, expected {wanted}")

    def _move(self, state: State, reason: str = "") -> None:
        self.state = state
        self.history.append(state)
        if reason:
            self.reason = reason

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL

    # -- transitions

    def observe_frame(self, frame: Frame, detections: Sequence[Detection]) -> "VerificationSession":
        self._require(State.CAPTURING)
        if self.evidence and frame.timestamp_ms <= self.evidence[-1].frame.timestamp_ms:
            raise ValueError("frame timestamps must be strictly increasing")
        hit = co_present(detections, self.policy.confidence_floor)
        self.frames_seen += 1
        self.consecutive_hits = self.consecutive_hits + 1 if hit else 0
        self.evidence.append(EvidenceFrame(frame, tuple(detections), hit))
        if self.consecutive_hits >= self.policy.co_presence_frames:
            self._move(State.CO_PRESENT)
        elif self.frames_seen >= self.policy.frame_budget:
            self._move(State.TIMED_OUT, "no_co_presence")
        return self

    def expire(self, reason: str = "frames_exhausted") -> "VerificationSession":
        """End capture early (input ran out before the frame budget)."""
        self._require(State.CAPTURING)
        self._move(State.TIMED_OUT, reason)
        return self

    def route_decision(self) -> "VerificationSession":
        self._require(State.CO_PRESENT)
        if self.policy.capability is Capability.HAS_LOCAL_BIOMETRIC:
            self._move(State.ROUTED_LOCAL)
        else:
            self._move(State.ROUTED_REMOTE)
        return self

    def local_biometric_check(self, verdict_source: Callable[["VerificationSession"], bool]) -> "VerificationSession":
        """Ask the on-device biometric oracle whether the owner is in frame."""
        self._require(State.ROUTED_LOCAL)
        try:
            matched = bool(verdict_source(self))
        except OracleUnavailable:
            self._move(State.REJECTED, "oracle_unavailable")
            return self
        if matched:
            self._move(State.ACCEPTED, "biometric_match")
        else:
            self._move(State.REJECTED, "biometric_mismatch")
        return self

    def build_submission(self):
        """Payload with the K most recent co-present frames."""
        from .protocol import SubmissionPayload

        self._require(State.ROUTED_REMOTE)
        k = self.policy.submission_frame_count
        chosen = [e for e in self.evidence if e.co_present][-k:]
        if not chosen:
            raise NoEvidence("no co-present frames retained")
        return SubmissionPayload(
            session_id=self.session_id,
            frames=tuple(chosen),
            k=k,
            n=self.policy.co_presence_frames,
            floor=self.policy.confidence_floor,
            short_evidence=len(chosen) < k,
        )

    def apply_outcome(self, outcome: Outcome) -> "VerificationSession":
        self._require(State.ROUTED_REMOTE)
        if outcome.state is State.ACCEPTED:
            self._move(State.ACCEPTED, outcome.reason or "accepted")
        else:
            self._move(State.REJECTED, outcome.reason or "rejected")
        return self


def begin_session(policy: DevicePolicy | None = None, session_id: str | None = None) -> VerificationSession:
    """Prompt for a sample: validate the policy and start capturing."""
    policy = policy or DevicePolicy()
    policy.validate()
    session = VerificationSession(policy) if session_id is None else VerificationSession(policy, session_id)
    session._move(State.CAPTURING)
    return session


class BiometricStub:
    """Stand-in for the platform biometric API: ``match``, ``no-match`` or ``unavailable``."""

    def __init__(self, result: str = "match"):
        if result not in ("match", "no-match", "unavailable"):
            raise ValueError(f"unknown biometric stub result {result!r}")
        self.result = result
        self.calls = 0

    def __call__(self, session: VerificationSession) -> bool:
        self.calls += 1
        if self.result == "unavailable":
            raise OracleUnavailable("biometric service unavailable")
        return self.result == "match"
