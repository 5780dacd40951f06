"""Prompt assembly and the pluggable text-generation backends.

compose_prompt builds the four fixed sections: TaskRequirements (from the
task alone, byte-identical across iterations - the task statement is never
rewritten), DesignInstruction (output contract plus the current sub-goal),
RelevantKnowledge (retrieved playbook rules, injected verbatim), and
FailureFeedback (recent diagnostics, newest first, from iteration 2 on).

Backends share one call shape: generate(prompt) -> GenerationResult.  The
scripted backend replays canned responses keyed by (task_id, iteration),
with optional prompt-content gating so tests can model "succeeds once the
right rule is in the prompt".  The HTTP backend speaks the common chat
JSON shape over urllib; credentials come from an environment variable and
are never written to logs.
"""

from __future__ import annotations

import json
import math
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .memory import FeedbackBundle, PlaybookEntry, distill, make_entry, AdmissionBasis
from .model import Diagnostic, TaskInstance

CHARS_PER_TOKEN = 4
FEEDBACK_CAP = 3

SECTION_ORDER = ("TaskRequirements", "DesignInstruction",
                 "RelevantKnowledge", "FailureFeedback")

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\n(.*?)```", re.DOTALL)


class BudgetExceeded(Exception):
    pass


class BackendTimeout(Exception):
    pass


class BackendRefusal(Exception):
    pass


class QuotaExhausted(Exception):
    pass


class MalformedCuration(Exception):
    pass


@dataclass(frozen=True)
class Prompt:
    sections: tuple[tuple[str, str], ...]
    token_estimate: int
    composition_trace: tuple[str, ...]
    task_id: int = 0
    iteration: int = 1

    def text(self) -> str:
        parts = [f"## {heading}\n{body}" for heading, body in self.sections]
        return "\n\n".join(parts) + "\n"

    def section(self, heading: str) -> Optional[str]:
        for h, body in self.sections:
            if h == heading:
                return body
        return None


def _estimate_tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / CHARS_PER_TOKEN))


def _requirements_body(task: TaskInstance) -> str:
    lines = [f"Task {task.task_id} ({task.task_type}, {task.difficulty.value}):",
             task.instruction.strip()]
    omega = task.constraints
    if omega.required_node_names:
        lines.append("Required node names: " + ", ".join(omega.required_node_names))
    if omega.required_subcircuit_pins:
        for name, pins in omega.required_subcircuit_pins:
            lines.append(f"Required subcircuit '{name}' with pins in order: " + ", ".join(pins))
    if omega.simulator_settings:
        lines.append("Required analyses: " + ", ".join(omega.simulator_settings))
    lines.append("Functional targets:")
    for a in task.assertions:
        params = ", ".join(f"{k}={v:g}" for k, v in a.parameters)
        lines.append(f"- {a.kind.value} on '{a.target_signal}' ({params}, tolerance {a.tolerance:g})")
    return "\n".join(lines)


_OUTPUT_CONTRACT = (
    "Respond with exactly one fenced code block containing only netlist text: "
    "one device, model, or analysis directive per line, ending with .end. "
    "No prose inside the block.")


def compose_prompt(task: TaskInstance, retrieved: Sequence[PlaybookEntry],
                   feedback: Sequence[Diagnostic], iteration: int,
                   subgoal: str = "", feedback_cap: int = FEEDBACK_CAP,
                   context_budget: Optional[int] = None) -> Prompt:
    """Ordered, headed concatenation of the four sections.

    Retrieved rule text lands verbatim (substring-testable); feedback is
    newest-first and capped; the feedback section only exists from the
    second iteration.  BudgetExceeded fires when the two mandatory
    sections alone would blow the backend's context budget.
    """
    if iteration < 1:
        raise ValueError("iterations are 1-based")
    trace: list[str] = []

    requirements = _requirements_body(task)
    instruction = _OUTPUT_CONTRACT
    if subgoal:
        instruction += f"\nCurrent sub-goal: {subgoal}"

    if context_budget is not None:
        mandatory = _estimate_tokens(requirements) + _estimate_tokens(instruction)
        if mandatory > context_budget:
            raise BudgetExceeded(
                f"mandatory sections need ~{mandatory} tokens, budget is {context_budget}")

    if retrieved:
        knowledge_lines = []
        for e in retrieved:
            knowledge_lines.append(f"- {e.rule} (applies: {e.applicability})")
            trace.append(f"entry:{e.entry_id}")
        knowledge = "\n".join(knowledge_lines)
    else:
        knowledge = "(no stored rules yet)"

    sections = [("TaskRequirements", requirements),
                ("DesignInstruction", instruction),
                ("RelevantKnowledge", knowledge)]
    if iteration >= 2:
        recent = list(feedback)[-feedback_cap:][::-1]
        if recent:
            fb_lines = []
            for d in recent:
                line = f"- [{d.stage.value}] {d.signature}: {d.evidence}"
                if d.suggested_fix:
                    line += f" | fix: {d.suggested_fix}"
                fb_lines.append(line)
                trace.append(f"diag:{d.signature}")
            body = "\n".join(fb_lines)
        else:
            body = "(no feedback recorded)"
        sections.append(("FailureFeedback", body))

    prompt = Prompt(sections=tuple(sections), token_estimate=0,
                    composition_trace=tuple(trace),
                    task_id=task.task_id, iteration=iteration)
    return Prompt(sections=prompt.sections,
                  token_estimate=_estimate_tokens(prompt.text()),
                  composition_trace=prompt.composition_trace,
                  task_id=task.task_id, iteration=iteration)


def extract_netlist(text: str) -> str:
    """First fenced block wins; bare text is taken whole."""
    m = _FENCE.search(text)
    return (m.group(1) if m else text).strip() + "\n"


@dataclass(frozen=True)
class GenerationResult:
    source_text: str
    token_cost: int


@dataclass(frozen=True)
class ScriptedResponse:
    text: str
    if_prompt_contains: Optional[str] = None
    else_text: Optional[str] = None


TERMINAL_RESPONSE = "* script exhausted\n.end\n"


class ScriptedBackend:
    """Deterministic playback keyed by (task_id, iteration).

    Requests past the script's end return the terminal response instead of
    failing, so budget loops never crash.  A response may be gated on the
    prompt containing a given substring, which lets tests model a backend
    that only succeeds once a specific rule has been retrieved into the
    prompt.
    """

    def __init__(self, responses: dict[tuple[int, int], ScriptedResponse],
                 terminal: str = TERMINAL_RESPONSE):
        self.responses = dict(responses)
        self.terminal = terminal
        self.calls = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        return cls(*_parse_script(Path(path).read_text()))

    def generate(self, prompt: Prompt) -> GenerationResult:
        self.calls += 1
        rec = self.responses.get((prompt.task_id, prompt.iteration))
        if rec is None:
            text = self.terminal
        elif rec.if_prompt_contains is not None:
            hit = rec.if_prompt_contains in prompt.text()
            text = rec.text if hit else (rec.else_text or self.terminal)
        else:
            text = rec.text
        cost = _estimate_tokens(prompt.text()) + _estimate_tokens(text)
        return GenerationResult(source_text=text, token_cost=cost)


_HEADER = re.compile(r"^=== task (\d+) iter (\d+)(?: \?contains=(.*)| (!else))?$")


def _parse_script(text: str) -> tuple[dict[tuple[int, int], ScriptedResponse], str]:
    """Script file: '=== task N iter K' headers followed by response text.
    A '?contains=' header starts a gated record whose else-branch is the
    matching '!else' record; '=== terminal' overrides the exhausted text."""
    table: dict[tuple[int, int], ScriptedResponse] = {}
    terminal = TERMINAL_RESPONSE
    key: Optional[tuple] = None
    buf: list[str] = []

    def close() -> None:
        nonlocal key
        if key is None:
            return
        body = "\n".join(buf).strip() + "\n"
        kind, tid, it, arg = key
        if kind == "terminal":
            nonlocal terminal
            terminal = body
        elif kind == "else":
            prior = table.get((tid, it))
            if prior is None or prior.if_prompt_contains is None:
                raise ValueError(f"!else record for task {tid} iter {it} has no gated record")
            table[(tid, it)] = ScriptedResponse(prior.text, prior.if_prompt_contains, body)
        elif kind == "gated":
            table[(tid, it)] = ScriptedResponse(body, arg)
        else:
            table[(tid, it)] = ScriptedResponse(body)
        key = None

    for line in text.splitlines():
        if line.startswith("=== "):
            close()
            buf = []
            if line.strip() == "=== terminal":
                key = ("terminal", 0, 0, None)
                continue
            m = _HEADER.match(line.strip())
            if m is None:
                raise ValueError(f"bad script header {line!r}")
            tid, it = int(m.group(1)), int(m.group(2))
            if m.group(4):
                key = ("else", tid, it, None)
            elif m.group(3) is not None:
                key = ("gated", tid, it, m.group(3))
            else:
                key = ("plain", tid, it, None)
        else:
            buf.append(line)
    close()
    return table, terminal


class HttpBackend:
    """Generic chat-shaped HTTP adapter over urllib.

    The auth token is read from an environment variable at call time and
    redacted from any logged request bodies.  Timeouts, refusals, and
    quota responses map to typed exceptions the orchestrator treats as a
    consumed attempt, never a crash.
    """

    def __init__(self, endpoint: str, model: str = "default",
                 api_key_env: str = "CIRCUITLOOP_API_KEY",
                 timeout: float = 60.0, max_tokens: int = 2048,
                 temperature: float = 0.0, log_dir: Optional[Path] = None):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.log_dir = Path(log_dir) if log_dir else None
        self.calls = 0

    def generate(self, prompt: Prompt) -> GenerationResult:
        self.calls += 1
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt.text()}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        body = json.dumps(payload).encode()
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers)
        self._log("request", payload)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            if exc.code == 429:
                raise QuotaExhausted(f"backend returned 429: {exc.reason}") from exc
            raise BackendRefusal(f"backend returned {exc.code}: {exc.reason}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise BackendTimeout(f"backend unreachable: {exc}") from exc
        self._log("response", raw)
        try:
            text = raw["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendRefusal(f"response missing content: {exc}") from exc
        usage = raw.get("usage") or {}
        cost = usage.get("total_tokens") or (
            _estimate_tokens(prompt.text()) + _estimate_tokens(text))
        return GenerationResult(source_text=text, token_cost=int(cost))

    def _log(self, kind: str, payload: dict) -> None:
        if self.log_dir is None:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        path = self.log_dir / f"http_{self.calls:03d}_{kind}.json"
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def parse_backend_spec(spec: str, log_dir: Optional[Path] = None):
    """Backend spec strings: 'scripted:<path>' or 'http:<url>'."""
    kind, _, rest = spec.partition(":")
    if kind == "scripted" and rest:
        return ScriptedBackend.from_file(rest)
    if kind == "http" and rest:
        return HttpBackend(endpoint=rest, log_dir=log_dir)
    raise ValueError(f"unknown backend spec {spec!r}; use scripted:<path> or http:<url>")


# ----------------------------------------------------------------------
# curation
# ----------------------------------------------------------------------

_CURATION_FIELDS = ("rule", "scope", "trigger", "applicability")


def _parse_curation(text: str, bundle: FeedbackBundle, now: float) -> list[PlaybookEntry]:
    """Parse 'field: value' blocks separated by blank lines into entries."""
    entries = []
    blocks = [b for b in re.split(r"\n\s*\n", text) if b.strip()]
    for block in blocks:
        fields = {}
        for line in block.splitlines():
            k, sep, v = line.partition(":")
            if sep and k.strip().lower() in _CURATION_FIELDS:
                fields[k.strip().lower()] = v.strip()
        if "rule" not in fields:
            continue
        entries.append(make_entry(
            scope=fields.get("scope", bundle.task.task_type),
            trigger=fields.get("trigger", bundle.task.task_type),
            evidence="curator",
            rule=fields["rule"],
            applicability=fields.get("applicability", "curator-tagged"),
            task_id=bundle.task.task_id, iteration=0, timestamp=now,
            admission_basis=AdmissionBasis.StableDesignPractice))
    if not entries:
        raise MalformedCuration("no rule blocks found in curation response")
    return entries


def curate(backend, bundle: FeedbackBundle,
           signature_history=None, now: float = 0.0) -> list[PlaybookEntry]:
    """Distill playbook entries, optionally letting a live backend add more.

    The rule-based floor always runs.  A scripted backend IS the floor
    (deterministic by construction).  A live backend may contribute
    extra curator-tagged entries; unparseable output falls back to the
    floor alone.  Nothing here bypasses update's filter or dedup.
    """
    floor = distill(bundle, signature_history, now)
    if not isinstance(backend, HttpBackend):
        return floor
    lines = ["Distill at most three reusable circuit design rules from these failures.",
             "Format each as 'rule: ...' with optional 'scope:', 'trigger:', 'applicability:'.",
             ""]
    for iteration, d in bundle.diagnostics[-6:]:
        lines.append(f"iteration {iteration}: [{d.stage.value}] {d.signature}: {d.evidence}")
    probe = Prompt(sections=(("Curation", "\n".join(lines)),),
                   token_estimate=_estimate_tokens("\n".join(lines)),
                   composition_trace=(), task_id=bundle.task.task_id, iteration=0)
    try:
        result = backend.generate(probe)
        extra = _parse_curation(result.source_text, bundle, now)
    except (MalformedCuration, BackendTimeout, BackendRefusal, QuotaExhausted):
        return floor
    have = {e.entry_id for e in floor}
    return floor + [e for e in extra if e.entry_id not in have]
