"""Command execution against a target: real SSH or a simulated profile.

The simulated target is a pure state machine loaded from a JSON profile:
identical command sequences yield identical results, which is what makes
whole runs replayable. Each run() models a fresh exec channel, so `cd`
does not persist between commands; profiles must not depend on cwd.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .domain import Credential, CredentialKind, ExecutedCommand, TargetSpec
from .memory import DEFAULT_OUTPUT_CAP, truncate_output

logger = logging.getLogger(__name__)

PROFILE_VERSION = 1


class TargetError(Exception):
    """Base for target/session failures."""


class AuthFailed(TargetError):
    pass


class Unreachable(TargetError):
    pass


class ChannelLost(TargetError):
    pass


class SessionClosed(TargetError):
    pass


class ProfileInvalid(TargetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


PATTERN_KINDS = ("exact", "prefix", "regex")


@dataclass(frozen=True)
class CommandPattern:
    kind: str
    value: str

    def matches(self, cmd: str) -> bool:
        if self.kind == "exact":
            return cmd == self.value
        if self.kind == "prefix":
            return cmd.startswith(self.value)
        return re.search(self.value, cmd) is not None


@dataclass(frozen=True)
class RuleResponse:
    stdout: str = ""
    stderr: str = ""
    exit_code: int = 0


@dataclass(frozen=True)
class ProfileRule:
    pattern: CommandPattern
    response: RuleResponse
    become_user: str | None = None


@dataclass(frozen=True)
class TargetProfile:
    name: str
    initial_user: str
    rules: tuple[ProfileRule, ...]
    sudo_allowed: tuple[str, ...] = ()
    weak_accounts: tuple[tuple[str, str], ...] = ()


# Shell-spawning invocation patterns for sudo-allowed programs, matched
# against the argument text after the program name. Spawning a shell via
# one of these under sudo yields a root shell.
GTFOBIN_SHELL_PATTERNS: dict[str, tuple[str, ...]] = {
    "awk": (r"BEGIN\s*\{\s*system\s*\(",),
    "gawk": (r"BEGIN\s*\{\s*system\s*\(",),
    "nawk": (r"BEGIN\s*\{\s*system\s*\(",),
    "env": (r"^['\"]?(\S*/)?(sh|bash|dash|zsh)\b",),
    "bash": (r"^$", r"^-(i|p|-login)\b"),
    "sh": (r"^$", r"^-i\b"),
    "dash": (r"^$",),
    "zsh": (r"^$",),
    "find": (r"-exec\s+['\"]?(\S*/)?(sh|bash)\b",),
    "python": (r"os\.system|pty\.spawn|os\.exec|subprocess",),
    "python3": (r"os\.system|pty\.spawn|os\.exec|subprocess",),
    "perl": (r"-e\s+.*(exec|system)",),
    "vim": (r"-c\s*['\"]?\s*:?!", r"--cmd"),
    "vi": (r"-c\s*['\"]?\s*:?!",),
}


def profiles_dir():
    return resources.files("sparring").joinpath("data/profiles")


def resolve_profile_path(ref: str | Path) -> Path:
    """Resolve a bundled profile name (e.g. "lin-security") or a path."""
    path = Path(ref)
    if path.exists():
        return path
    bundled = profiles_dir().joinpath(f"{ref}.json")
    if bundled.is_file():
        return Path(str(bundled))
    raise ProfileInvalid(f"profile not found: {ref}")


def _rule_start_lines(raw: str) -> list[int]:
    """1-based line numbers where each element of the "rules" array starts."""
    lines: list[int] = []
    line = 1
    depth = 0
    in_str = False
    esc = False
    buf: list[str] = []
    last_string = ""
    rules_depth: int | None = None
    for ch in raw:
        if ch == "\n":
            line += 1
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
                last_string = "".join(buf)
            else:
                buf.append(ch)
            continue
        if ch == '"':
            in_str = True
            buf = []
        elif ch in "{[":
            if ch == "[" and depth == 1 and last_string == "rules" and rules_depth is None:
                rules_depth = depth + 1
            if ch == "{" and rules_depth is not None and depth == rules_depth:
                lines.append(line)
            depth += 1
        elif ch in "}]":
            depth -= 1
            if rules_depth is not None and depth < rules_depth:
                break
    return lines


def _require(cond: bool, message: str, line: int | None = None) -> None:
    if not cond:
        raise ProfileInvalid(message, line)


def load_profile(path: str | Path) -> TargetProfile:
    """Parse and validate a profile file; errors carry a line number."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProfileInvalid(f"invalid JSON: {exc.msg}", exc.lineno) from exc

    _require(isinstance(doc, dict), "profile must be a JSON object", 1)
    _require(doc.get("profile_version") == PROFILE_VERSION,
             f"profile_version must be {PROFILE_VERSION}", 1)
    name = doc.get("name")
    _require(isinstance(name, str) and bool(name), "name must be a non-empty string", 1)
    initial_user = doc.get("initial_user")
    _require(isinstance(initial_user, str) and bool(initial_user),
             "initial_user must be a non-empty string", 1)
    _require(initial_user != "root", "initial_user must not be root", 1)
    raw_rules = doc.get("rules")
    _require(isinstance(raw_rules, list), "rules must be an array", 1)

    rule_lines = _rule_start_lines(raw)
    rules = []
    for i, rule in enumerate(raw_rules):
        line = rule_lines[i] if i < len(rule_lines) else None
        _require(isinstance(rule, dict), f"rules[{i}] must be an object", line)
        pattern = rule.get("pattern")
        _require(isinstance(pattern, dict), f"rules[{i}] is missing a pattern", line)
        kind = pattern.get("kind", "exact")
        value = pattern.get("value")
        _require(kind in PATTERN_KINDS, f"rules[{i}] has unknown pattern kind {kind!r}", line)
        _require(isinstance(value, str) and bool(value),
                 f"rules[{i}] pattern value must be non-empty", line)
        if kind == "regex":
            try:
                re.compile(value)
            except re.error as exc:
                raise ProfileInvalid(f"rules[{i}] has an invalid regex: {exc}", line) from exc
        response = rule.get("response", {})
        _require(isinstance(response, dict), f"rules[{i}] response must be an object", line)
        effects = rule.get("effects") or {}
        _require(isinstance(effects, dict), f"rules[{i}] effects must be an object", line)
        become_user = effects.get("become_user")
        if become_user is not None:
            _require(isinstance(become_user, str) and bool(become_user),
                     f"rules[{i}] become_user must be non-empty", line)
        rules.append(
            ProfileRule(
                pattern=CommandPattern(kind=kind, value=value),
                response=RuleResponse(
                    stdout=response.get("stdout", ""),
                    stderr=response.get("stderr", ""),
                    exit_code=int(response.get("exit_code", 0)),
                ),
                become_user=become_user,
            )
        )

    weak_accounts = []
    for entry in doc.get("weak_accounts", []):
        _require(isinstance(entry, (list, tuple)) and len(entry) == 2,
                 "weak_accounts entries must be [username, password] pairs", 1)
        weak_accounts.append((str(entry[0]), str(entry[1])))

    return TargetProfile(
        name=name,
        initial_user=initial_user,
        rules=tuple(rules),
        sudo_allowed=tuple(str(p) for p in doc.get("sudo_allowed", [])),
        weak_accounts=tuple(weak_accounts),
    )


def sudo_escalation_rule(profile: TargetProfile, cmd: str) -> str | None:
    """become_user effect for a sudo command, or None when it stays benign.

    The invoked program's basename must be sudo-allowed and its argument
    text must match that program's shell-spawning pattern set.
    """
    if not cmd.startswith("sudo "):
        raise ValueError("cmd must begin with 'sudo '")
    rest = cmd[len("sudo "):].strip()
    parts = rest.split(None, 1)
    if not parts:
        return None
    prog = os.path.basename(parts[0].strip("'\""))
    if prog not in profile.sudo_allowed:
        return None
    remainder = parts[1].strip() if len(parts) > 1 else ""
    for pattern in GTFOBIN_SHELL_PATTERNS.get(prog, ()):
        if re.search(pattern, remainder):
            return "root"
    return None


_SU_RE = re.compile(r"^su\s+(?:-l?\s+)?([A-Za-z_][\w-]*)\s*$")


class SimulatedSession:
    """Deterministic fake machine driven by a TargetProfile."""

    kind = "simulated"

    def __init__(self, profile: TargetProfile):
        self.profile = profile
        self.current_probe_user = profile.initial_user
        self.closed = False
        self._uids = {profile.initial_user: 1000}
        for i, (user, _) in enumerate(profile.weak_accounts):
            self._uids.setdefault(user, 1001 + i)

    def close(self) -> None:
        self.closed = True

    def run(
        self,
        cmd: str,
        timeout_ms: int | None = None,
        output_cap: int = DEFAULT_OUTPUT_CAP,
    ) -> ExecutedCommand:
        if self.closed:
            raise SessionClosed("session is closed")
        if not cmd:
            raise ValueError("cmd must be non-empty")
        stdout, stderr, exit_code = self._respond(cmd.strip())
        stdout, out_truncated = truncate_output(stdout, output_cap)
        stderr, err_truncated = truncate_output(stderr, output_cap)
        # Zero duration keeps simulated runs byte-identical across replays.
        return ExecutedCommand(
            cmd=cmd,
            stdout=stdout,
            stderr=stderr,
            exit_code=exit_code,
            duration_ms=0,
            truncated=out_truncated or err_truncated,
        )

    def _respond(self, cmd: str) -> tuple[str, str, int]:
        if cmd == "id":
            return self._id_line(), "", 0
        if cmd == "whoami":
            return self.current_probe_user, "", 0
        for rule in self.profile.rules:
            if rule.pattern.matches(cmd):
                if rule.become_user:
                    self.current_probe_user = rule.become_user
                r = rule.response
                return r.stdout, r.stderr, r.exit_code
        if cmd.startswith("sudo "):
            return self._sudo_response(cmd)
        su = _SU_RE.match(cmd)
        if su:
            user = su.group(1)
            if any(user == weak for weak, _ in self.profile.weak_accounts):
                self.current_probe_user = user
                return "", "", 0
            return "", "su: Authentication failure", 1
        first = cmd.split()[0]
        return "", f"{first}: command not found", 127

    def _sudo_response(self, cmd: str) -> tuple[str, str, int]:
        rest = cmd[len("sudo "):].strip()
        parts = rest.split(None, 1)
        if not parts:
            return "", "usage: sudo -h | -K | -k | -V", 1
        prog_token = parts[0]
        prog = os.path.basename(prog_token.strip("'\""))
        if prog.startswith("-"):
            return "", f"sudo: unrecognized option '{prog}'", 1
        if prog not in self.profile.sudo_allowed:
            return (
                "",
                f"Sorry, user {self.current_probe_user} is not allowed to run "
                f"'{prog_token}' as root on {self.profile.name}.",
                1,
            )
        become = sudo_escalation_rule(self.profile, cmd)
        if become:
            self.current_probe_user = become
        # A spawned shell over a non-tty exec channel produces no output;
        # benign allowed invocations also answer silently.
        return "", "", 0

    def _id_line(self) -> str:
        user = self.current_probe_user
        if user == "root":
            return "uid=0(root) gid=0(root) groups=0(root)"
        uid = self._uids.get(user, 2000)
        return f"uid={uid}({user}) gid={uid}({user}) groups={uid}({user})"


class SshSession:
    """Real target over SSH2 (password or private-key auth).

    Requires the optional paramiko dependency. Each run() opens a fresh
    exec channel; a command that exceeds its timeout is killed and comes
    back with partial output and the -1 exit-code sentinel.
    """

    kind = "ssh"

    def __init__(self, client, spec: TargetSpec):
        self._client = client
        self.spec = spec
        self.current_probe_user = spec.username
        self.closed = False

    @classmethod
    def connect(cls, spec: TargetSpec) -> "SshSession":
        try:
            import paramiko
        except ImportError as exc:
            raise TargetError(
                "SSH support requires the optional 'paramiko' dependency "
                "(pip install sparring[ssh])"
            ) from exc
        client = paramiko.SSHClient()
        client.load_system_host_keys()
        client.set_missing_host_key_policy(_accept_new_policy(paramiko))
        kwargs: dict = dict(
            hostname=spec.host,
            port=spec.port,
            username=spec.username,
            timeout=spec.connect_timeout_ms / 1000.0,
            allow_agent=False,
            look_for_keys=False,
        )
        if spec.credential.kind == CredentialKind.PASSWORD:
            kwargs["password"] = spec.credential.value
        else:
            kwargs["key_filename"] = spec.credential.value
        try:
            client.connect(**kwargs)
        except paramiko.AuthenticationException as exc:
            raise AuthFailed(str(exc)) from exc
        except (paramiko.SSHException, OSError) as exc:
            raise Unreachable(f"{spec.host}:{spec.port}: {exc}") from exc
        return cls(client, spec)

    def run(
        self,
        cmd: str,
        timeout_ms: int | None = None,
        output_cap: int = DEFAULT_OUTPUT_CAP,
    ) -> ExecutedCommand:
        import socket

        if self.closed:
            raise SessionClosed("session is closed")
        if not cmd:
            raise ValueError("cmd must be non-empty")
        timeout_s = (timeout_ms or self.spec.command_timeout_ms) / 1000.0
        started = time.monotonic()
        try:
            _, stdout_f, stderr_f = self._client.exec_command(cmd, timeout=timeout_s)
            timed_out = False
            try:
                stdout = stdout_f.read().decode("utf-8", "replace")
                stderr = stderr_f.read().decode("utf-8", "replace")
                exit_code = stdout_f.channel.recv_exit_status()
            except socket.timeout:
                timed_out = True
                stdout = _drain(stdout_f.channel)
                stderr = ""
                stdout_f.channel.close()
                exit_code = -1
        except Exception as exc:  # paramiko.SSHException and friends
            raise ChannelLost(str(exc)) from exc
        duration_ms = int((time.monotonic() - started) * 1000)
        stdout, out_trunc = truncate_output(stdout, output_cap)
        stderr, err_trunc = truncate_output(stderr, output_cap)
        if timed_out:
            logger.warning("command timed out after %.1fs: %s", timeout_s, cmd)
        return ExecutedCommand(
            cmd=cmd,
            stdout=stdout,
            stderr=stderr,
            exit_code=exit_code,
            duration_ms=duration_ms,
            truncated=out_trunc or err_trunc,
        )

    def close(self) -> None:
        self.closed = True
        self._client.close()


def _drain(channel) -> str:
    chunks = []
    while channel.recv_ready():
        chunks.append(channel.recv(65536))
    return b"".join(chunks).decode("utf-8", "replace")


def _accept_new_policy(paramiko):
    class AcceptNew(paramiko.MissingHostKeyPolicy):
        def missing_host_key(self, client, hostname, key):
            logger.info(
                "accepting new host key for %s: %s %s",
                hostname, key.get_name(), key.get_fingerprint().hex(),
            )
            client.get_host_keys().add(hostname, key.get_name(), key)

    return AcceptNew()


Session = SimulatedSession | SshSession


def connect(target: TargetSpec | str | Path) -> Session:
    """Open a session: TargetSpec goes over SSH, anything else is a
    simulated profile reference (bundled name or file path)."""
    if isinstance(target, TargetSpec):
        return SshSession.connect(target)
    return SimulatedSession(load_profile(resolve_profile_path(target)))


def probe_root(session: Session) -> bool:
    """Out-of-band root check; never lands in run history or LLM context."""
    result = session.run("id", output_cap=1024)
    return "uid=0(" in result.stdout
