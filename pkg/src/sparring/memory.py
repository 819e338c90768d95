"""Token-budgeted sliding-window memory over executed commands.

The token estimator is the byte/4 heuristic rather than a real
tokenizer: backend-agnostic, deterministic, and the budget is a safety
margin, not an exact fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .domain import ExecutedCommand

TRUNCATION_MARKER = "[...truncated]"

# Defaults: a 4k-token model minus prompt scaffolding and answer headroom.
DEFAULT_OUTPUT_CAP = 8192
DEFAULT_RESERVED_TOKENS = 1024
REFLECT_MAX_TOKENS = 200

_REFLECT_SYSTEM = (
    "You summarize a Linux command log for a security review. "
    "Extract only facts useful for privilege escalation (sudo rights, "
    "writable files, weak accounts, SUID binaries). "
    f"Answer in at most {REFLECT_MAX_TOKENS} tokens of plain text."
)


@dataclass
class ContextWindow:
    """Chronological (cmd, output excerpt) pairs that fit a token budget."""

    entries: list[tuple[str, str]] = field(default_factory=list)
    summary: str | None = None
    estimated_tokens: int = 0


def estimate_tokens(text: str) -> int:
    """ceil(utf-8 byte length / 4); 0 for empty text."""
    n = len(text.encode("utf-8"))
    return (n + 3) // 4


def truncate_output(output: str, cap: int) -> tuple[str, bool]:
    """Cap `output` at `cap` bytes, keeping the tail.

    Enumeration commands put the most recent / most specific results
    last, so the tail is the part worth keeping. The cut snaps back to a
    character boundary and the marker is prepended, so the result is at
    most cap + len(marker) bytes.
    """
    if cap <= 0:
        raise ValueError("cap must be > 0")
    raw = output.encode("utf-8")
    if len(raw) <= cap:
        return output, False
    tail = raw[-cap:]
    # Skip UTF-8 continuation bytes so the tail starts on a boundary.
    start = 0
    while start < len(tail) and (tail[start] & 0xC0) == 0x80:
        start += 1
    return TRUNCATION_MARKER + tail[start:].decode("utf-8"), True


def output_excerpt(cmd: ExecutedCommand) -> str:
    """The output text carried into prompts: stdout, or stderr when empty."""
    return cmd.stdout if cmd.stdout.strip() else cmd.stderr


def _entry_tokens(cmd: str, excerpt: str) -> int:
    return estimate_tokens(cmd) + estimate_tokens(excerpt)


def fit_history(
    history: list[ExecutedCommand] | tuple[ExecutedCommand, ...],
    budget: int,
    reserved: int = DEFAULT_RESERVED_TOKENS,
) -> ContextWindow:
    """Keep the newest contiguous suffix of history that fits the budget.

    Walks newest to oldest, adding (cmd, excerpt) pairs while the total
    stays within budget - reserved; a pair is never split. Entries come
    back in chronological order.
    """
    if reserved >= budget:
        raise ValueError("reserved must be smaller than budget")
    allowance = budget - reserved
    kept: list[tuple[str, str]] = []
    total = 0
    for cmd in reversed(history):
        excerpt = output_excerpt(cmd)
        cost = _entry_tokens(cmd.cmd, excerpt)
        if total + cost > allowance:
            break
        kept.append((cmd.cmd, excerpt))
        total += cost
    kept.reverse()
    return ContextWindow(entries=kept, estimated_tokens=total)


def render_history_text(history: list[ExecutedCommand] | tuple[ExecutedCommand, ...]) -> str:
    lines = []
    for cmd in history:
        lines.append(f"$ {cmd.cmd}")
        lines.append(output_excerpt(cmd))
    return "\n".join(lines)


def reflect(history, backend) -> str | None:
    """Ask the backend to compress the command log into escalation facts.

    Returns the summary text, or None when the model refuses. Transport
    failures propagate; the caller decides whether the loop continues
    without a summary. Scripted-regression errors (exhausted or drifted
    transcripts) always propagate.
    """
    from .llm import ChatMessage, CompletionRequest, complete
    from .prompts import classify_refusal

    if not history:
        raise ValueError("reflect requires a non-empty history")
    request = CompletionRequest(
        messages=[
            ChatMessage(role="system", content=_REFLECT_SYSTEM),
            ChatMessage(role="user", content=render_history_text(history)),
        ],
        max_answer_tokens=REFLECT_MAX_TOKENS,
    )
    answer = complete(backend, request)
    if classify_refusal(answer.text):
        return None
    return answer.text.strip() or None
