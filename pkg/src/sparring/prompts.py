"""Prompt construction, answer parsing, refusal detection and softening.

Templates are versioned data files, not code, so golden transcripts can
pin the exact wording they were recorded against.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .domain import ExecutedCommand, Finding, RunState, RunStatus
from .llm import ChatMessage
from .memory import ContextWindow, estimate_tokens, output_excerpt


class NoCommandFound(Exception):
    """The answer had no extractable shell command."""


class BudgetImpossible(Exception):
    """The non-droppable part of a prompt alone exceeds the token budget."""


DEFAULT_REFUSAL_LEXICON = (
    "i'm sorry",
    "i cannot",
    "i can't assist",
    "as an ai",
    "i must decline",
)


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    system_text: str
    user_preamble: str
    dejudgment_suffix: str
    goal: str = ""


@dataclass(frozen=True)
class SoftenMap:
    replacements: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        froms = [f for f, _ in self.replacements]
        if len(froms) != len(set(froms)):
            raise ValueError("from-phrases must be unique")


def _data_dir():
    return resources.files("sparring").joinpath("data")


def load_template(ref: str | Path) -> PromptTemplate:
    """Load a template by bundled id (e.g. "exec_v1") or file path."""
    path = Path(ref)
    if path.suffix == ".json" and path.exists():
        raw = path.read_text(encoding="utf-8")
    else:
        raw = _data_dir().joinpath(f"templates/{ref}.json").read_text(encoding="utf-8")
    obj = json.loads(raw)
    return PromptTemplate(
        id=obj["id"],
        system_text=obj["system_text"],
        user_preamble=obj.get("user_preamble", ""),
        dejudgment_suffix=obj.get("dejudgment_suffix", ""),
        goal=obj.get("goal", ""),
    )


def load_soften_map(ref: str | Path = "soften_v1") -> SoftenMap:
    """Load a soften map from JSONL {from, to} pairs (bundled id or path)."""
    path = Path(ref)
    if path.suffix == ".jsonl" and path.exists():
        raw = path.read_text(encoding="utf-8")
    else:
        raw = _data_dir().joinpath(f"templates/{ref}.jsonl").read_text(encoding="utf-8")
    pairs = []
    for line in raw.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        pairs.append((obj["from"], obj["to"]))
    return SoftenMap(replacements=tuple(pairs))


def render_system(template: PromptTemplate, username: str, goal: str | None = None) -> str:
    """Substitute {goal}/{username}; plain replace so shell braces survive."""
    text = template.system_text
    text = text.replace("{goal}", goal if goal is not None else template.goal)
    text = text.replace("{username}", username)
    if "{goal}" in text or "{username}" in text:
        raise ValueError(f"unresolved placeholder in template {template.id}")
    return text


def _command_block(cmd: str, excerpt: str) -> str:
    return f"$ {cmd}\n{excerpt}".rstrip()


def build_exec_prompt(
    state: RunState,
    template: PromptTemplate,
    context: ContextWindow,
    *,
    budget: int,
    username: str,
) -> list[ChatMessage]:
    """Assemble the next-command prompt within the token budget.

    Layout: rendered system message, optional reflection summary, then
    one assistant/user pair per remembered command (the user message
    carries the command and its output), then operator hints as user
    messages. History is dropped oldest-first if the budget demands it;
    the system message, summary and hints are never dropped.
    """
    if state.status != RunStatus.RUNNING:
        raise ValueError(f"exec prompt requires a running state, got {state.status.value}")
    system = ChatMessage(role="system", content=render_system(template, username))
    if estimate_tokens(system.content) > budget:
        raise BudgetImpossible(
            f"system message alone is {estimate_tokens(system.content)} tokens, budget {budget}"
        )

    fixed: list[ChatMessage] = [system]
    if context.summary:
        fixed.append(ChatMessage(role="user", content=f"Known so far: {context.summary}"))
    hint_messages = [ChatMessage(role="user", content=hint) for hint in state.hints]

    def total(msgs: list[ChatMessage]) -> int:
        return sum(estimate_tokens(m.content) for m in msgs)

    if total(fixed + hint_messages) > budget:
        raise BudgetImpossible("system message, summary and hints exceed the budget")

    entries = list(context.entries)
    while True:
        history_messages: list[ChatMessage] = []
        for i, (cmd, excerpt) in enumerate(entries):
            history_messages.append(ChatMessage(role="assistant", content=cmd))
            body = _command_block(cmd, excerpt)
            if i == 0 and template.user_preamble:
                body = f"{template.user_preamble}\n{body}"
            history_messages.append(ChatMessage(role="user", content=body))
        messages = fixed + history_messages + hint_messages
        if total(messages) <= budget:
            return messages
        entries.pop(0)


def build_analysis_prompt(
    cmd: ExecutedCommand,
    template: PromptTemplate,
    *,
    username: str = "user",
) -> list[ChatMessage]:
    """Prompt asking for vulnerabilities plus one verification command each.

    Carries the command output verbatim (stderr when stdout is empty)
    and always ends with the dejudgment suffix.
    """
    system = ChatMessage(role="system", content=render_system(template, username))
    excerpt = output_excerpt(cmd)
    body = (
        f"The command `{cmd.cmd}` returned (exit code {cmd.exit_code}):\n"
        f"{excerpt}\n\n"
        "List the potential security vulnerabilities this reveals as a numbered list. "
        "For each vulnerability, provide one verification command that demonstrates it."
    )
    if template.dejudgment_suffix:
        body = f"{body}\n{template.dejudgment_suffix}"
    return [system, ChatMessage(role="user", content=body)]


_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)\n?```", re.DOTALL)
_ITEM_RE = re.compile(r"^[ \t]*(?:\d+[.)]|[-*•])[ \t]+", re.MULTILINE)
_VERIFICATION_RE = re.compile(r"^[ \t]*verification\s*:?[ \t]*(.+)$", re.IGNORECASE | re.MULTILINE)


def _strip_glyphs(line: str) -> str:
    line = line.strip()
    for glyph in ("$ ", "# "):
        if line.startswith(glyph):
            line = line[len(glyph):].strip()
            break
    return line.strip("`").strip()


def _join_fence(block: str) -> str:
    lines = [ln.strip() for ln in block.splitlines()]
    return " && ".join(_strip_glyphs(ln) for ln in lines if ln)


def parse_command(answer: str) -> str:
    """Extract one shell command from a model answer.

    Priority: content of the first fenced code block (multi-line blocks
    joined with " && "), else the first nonempty line stripped of prompt
    glyphs and backticks. Prose refusals carry no command.
    """
    if not answer:
        raise ValueError("answer must be non-empty")
    fence = _FENCE_RE.search(answer)
    if fence:
        joined = _join_fence(fence.group(1))
        if joined:
            return joined
    if classify_refusal(answer):
        raise NoCommandFound("answer is a prose refusal")
    for line in answer.splitlines():
        if line.strip() and not line.strip().startswith("```"):
            cmd = _strip_glyphs(line)
            if cmd:
                return cmd
    raise NoCommandFound("no extractable content in answer")


def parse_findings(answer: str, round: int) -> list[Finding]:
    """Split an analysis answer into findings.

    Each numbered/bulleted item becomes one Finding; a fenced code block
    or a "Verification:" line inside the item becomes its verification
    command. Items without alphabetic content are dropped; an answer
    with no list markers becomes a single Finding.
    """
    if round < 1:
        raise ValueError("round must be >= 1")
    if not answer.strip():
        return []
    starts = [m.start() for m in _ITEM_RE.finditer(answer)]
    if starts:
        chunks = [answer[a:b] for a, b in zip(starts, starts[1:] + [len(answer)])]
    else:
        chunks = [answer]
    findings = []
    for chunk in chunks:
        finding = _finding_from_chunk(chunk, round)
        if finding is not None:
            findings.append(finding)
    return findings


def _finding_from_chunk(chunk: str, round: int) -> Finding | None:
    verification = None
    fence = _FENCE_RE.search(chunk)
    if fence:
        verification = _join_fence(fence.group(1)) or None
        chunk = chunk[: fence.start()] + chunk[fence.end():]
    if verification is None:
        ver_line = _VERIFICATION_RE.search(chunk)
        if ver_line:
            verification = _strip_glyphs(ver_line.group(1)) or None
            chunk = chunk[: ver_line.start()] + chunk[ver_line.end():]
    description = " ".join(_ITEM_RE.sub("", chunk).split()).strip()
    if not any(c.isalpha() for c in description):
        return None
    return Finding(description=description, verification_command=verification, source_round=round)


def classify_refusal(answer: str, lexicon: tuple[str, ...] = DEFAULT_REFUSAL_LEXICON) -> bool:
    """True iff the answer matches the refusal lexicon (case-insensitive)."""
    normalized = answer.lower().replace("’", "'")
    return any(phrase in normalized for phrase in lexicon)


def soften(
    messages: list[ChatMessage],
    soften_map: SoftenMap,
    template: PromptTemplate,
) -> list[ChatMessage]:
    """Rewrite trigger phrases and append the dejudgment suffix.

    Replacements apply to system/user contents only; the suffix lands on
    the last user message (appended as a new user message when the
    prompt has none). Idempotent with the shipped map.
    """
    out: list[ChatMessage] = []
    for message in messages:
        if message.role in ("system", "user"):
            content = message.content
            for frm, to in soften_map.replacements:
                content = content.replace(frm, to)
            out.append(ChatMessage(role=message.role, content=content))
        else:
            out.append(message)
    suffix = template.dejudgment_suffix
    if not suffix:
        return out
    last_user = None
    for i in range(len(out) - 1, -1, -1):
        if out[i].role == "user":
            last_user = i
            break
    if last_user is None:
        out.append(ChatMessage(role="user", content=suffix))
    elif suffix not in out[last_user].content:
        out[last_user] = ChatMessage(
            role="user", content=f"{out[last_user].content}\n{suffix}"
        )
    return out
