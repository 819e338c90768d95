"""Shared domain types and the run status state machine. No I/O here."""

from __future__ import annotations

import dataclasses
import uuid
from dataclasses import dataclass, field
from enum import Enum


class RunStatus(str, Enum):
    RUNNING = "running"
    AWAITING_APPROVAL = "awaiting_approval"
    ROOT_ACHIEVED = "root_achieved"
    EXHAUSTED = "exhausted"
    ABORTED = "aborted"
    ERROR = "error"

    @property
    def terminal(self) -> bool:
        return self in _TERMINAL


_TERMINAL = frozenset(
    {RunStatus.ROOT_ACHIEVED, RunStatus.EXHAUSTED, RunStatus.ABORTED, RunStatus.ERROR}
)


class StatusEvent(str, Enum):
    PROPOSE = "propose"
    APPROVE = "approve"
    DENY = "deny"
    ROOT_DETECTED = "root_detected"
    ROUNDS_EXHAUSTED = "rounds_exhausted"
    ABORT = "abort"
    FAIL = "fail"


# Full transition table. Anything absent raises IllegalTransition.
# abort/fail are reachable from the approval gate as well so that an
# operator abort or a sink failure never strands a pending command.
TRANSITIONS: dict[tuple[RunStatus, StatusEvent], RunStatus] = {
    (RunStatus.RUNNING, StatusEvent.PROPOSE): RunStatus.AWAITING_APPROVAL,
    (RunStatus.RUNNING, StatusEvent.ROOT_DETECTED): RunStatus.ROOT_ACHIEVED,
    (RunStatus.RUNNING, StatusEvent.ROUNDS_EXHAUSTED): RunStatus.EXHAUSTED,
    (RunStatus.RUNNING, StatusEvent.ABORT): RunStatus.ABORTED,
    (RunStatus.RUNNING, StatusEvent.FAIL): RunStatus.ERROR,
    (RunStatus.AWAITING_APPROVAL, StatusEvent.APPROVE): RunStatus.RUNNING,
    (RunStatus.AWAITING_APPROVAL, StatusEvent.DENY): RunStatus.RUNNING,
    (RunStatus.AWAITING_APPROVAL, StatusEvent.ABORT): RunStatus.ABORTED,
    (RunStatus.AWAITING_APPROVAL, StatusEvent.FAIL): RunStatus.ERROR,
}


class IllegalTransition(Exception):
    """Raised when a status event is not permitted from the current status."""

    def __init__(self, status: RunStatus, event: StatusEvent):
        self.status = status
        self.event = event
        super().__init__(f"event {event.value!r} not permitted from status {status.value!r}")


class CredentialKind(str, Enum):
    PASSWORD = "password"
    KEY_PATH = "key_path"


@dataclass(frozen=True)
class Credential:
    kind: CredentialKind
    value: str


@dataclass(frozen=True)
class TargetSpec:
    host: str
    username: str
    credential: Credential
    port: int = 22
    connect_timeout_ms: int = 10_000
    command_timeout_ms: int = 30_000

    def __post_init__(self) -> None:
        if not (1 <= self.port <= 65535):
            raise ValueError(f"port out of range: {self.port}")
        if self.connect_timeout_ms <= 0 or self.command_timeout_ms <= 0:
            raise ValueError("timeouts must be positive")
        if not self.username:
            raise ValueError("username must be non-empty")


@dataclass(frozen=True)
class ExecutedCommand:
    cmd: str
    stdout: str
    stderr: str
    exit_code: int
    duration_ms: int
    truncated: bool = False

    def __post_init__(self) -> None:
        if not self.cmd:
            raise ValueError("cmd must be non-empty")
        if self.duration_ms < 0:
            raise ValueError("duration_ms must be >= 0")


@dataclass(frozen=True)
class Finding:
    description: str
    verification_command: str | None
    source_round: int

    def __post_init__(self) -> None:
        if not self.description:
            raise ValueError("description must be non-empty")
        if self.source_round < 1:
            raise ValueError("source_round must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    llm_backend_ref: str
    target_ref: str
    goal_template_id: str = "exec_v1"
    max_rounds: int = 10
    token_budget: int = 4096
    output_cap: int = 8192
    interactive: bool = False
    analysis_enabled: bool = True
    reflection_enabled: bool = False
    auto_verify: bool = False
    soften_retries: int = 1

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.token_budget < 512:
            raise ValueError("token_budget must be >= 512")
        if self.soften_retries < 0:
            raise ValueError("soften_retries must be >= 0")
        if self.output_cap < 1:
            raise ValueError("output_cap must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class PendingCommand:
    proposed: str
    raw_answer: str
    proposed_at: int  # UTC milliseconds

    def __post_init__(self) -> None:
        if not self.proposed:
            raise ValueError("proposed command must be non-empty")


@dataclass(frozen=True)
class RunState:
    run_id: str
    round: int = 0
    history: tuple[ExecutedCommand, ...] = ()
    findings: tuple[Finding, ...] = ()
    pending: PendingCommand | None = None
    status: RunStatus = RunStatus.RUNNING
    hints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.history) > self.round:
            raise ValueError("history longer than completed rounds")
        if (self.pending is not None) != (self.status == RunStatus.AWAITING_APPROVAL):
            raise ValueError("pending present iff status is awaiting_approval")

    def with_pending(self, pending: PendingCommand) -> "RunState":
        return dataclasses.replace(self, pending=pending)

    def with_hint(self, text: str) -> "RunState":
        return dataclasses.replace(self, hints=self.hints + (text,))

    def with_executed(self, cmd: ExecutedCommand) -> "RunState":
        return dataclasses.replace(self, history=self.history + (cmd,), round=self.round + 1)

    def round_consumed(self) -> "RunState":
        return dataclasses.replace(self, round=self.round + 1)

    def with_findings(self, findings: list[Finding]) -> "RunState":
        return dataclasses.replace(self, findings=self.findings + tuple(findings))


def new_run_id() -> str:
    return uuid.uuid4().hex


def transition(state: RunState, event: StatusEvent, pending: PendingCommand | None = None) -> RunState:
    """Apply one status event and return the successor state.

    `pending` is required for PROPOSE and ignored otherwise; leaving the
    approval gate always clears it. Round accounting is the loop's job,
    not the state machine's.
    """
    key = (state.status, StatusEvent(event))
    if key not in TRANSITIONS:
        raise IllegalTransition(state.status, StatusEvent(event))
    nxt = TRANSITIONS[key]
    if event == StatusEvent.PROPOSE:
        if pending is None:
            raise ValueError("propose requires a pending command")
        return dataclasses.replace(state, status=nxt, pending=pending)
    return dataclasses.replace(state, status=nxt, pending=None)
