"""The persistent rule playbook: distill, update, retrieve, persist.

Entries are compact single-line rules with provenance, admitted only on
evidence (a failure signature repeating across iterations or tasks, the
same checker rule violated more than once, or an explicitly tagged stable
practice).  The store is append-only: updates filter conflicting rules,
drop duplicates by normalized-text hash, and append survivors; version
moves forward iff something landed.

On disk the store is a single human-readable document with a trailing
checksum, written via atomic replace so readers never observe a torn
state.  Writers serialize through a lock file; readers never lock.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import re
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .model import (DesignCandidate, Diagnostic, ResultBundle, Stage,
                    TaskInstance)

log = logging.getLogger("circuitloop.memory")

GENERAL_SCOPE = "general"
RULE_CAP = 400                # chars; entries stay compact
EVIDENCE_CAP = 240
RETRIEVE_LIMIT = 12
RETRIEVE_CHAR_BUDGET = 2000

FORMAT_HEADER = "# circuitloop playbook v1"

# conventions registered at store creation: statement plus a negation
# pattern; any candidate rule matching the pattern contradicts it
DEFAULT_CONVENTIONS: tuple[tuple[str, str], ...] = (
    ("output nodes keep the exact names the task requires",
     r"outputs? (nodes? )?(may|can) (use|take|carry) any (node )?names?"),
    ("nmos bulk ties to its source node",
     r"nmos bulk (may|can) (float|tie to any|connect to any)"),
    ("pmos bulk ties to vdd",
     r"pmos bulk (may|can) (float|tie to any|connect to any)"),
    ("every node keeps a dc path to the reference",
     r"nodes? (may|can) (float|be left floating)"),
)


class CorruptStore(Exception):
    pass


class IOFailure(Exception):
    pass


class AdmissionBasis(enum.Enum):
    RepeatedFailure = "RepeatedFailure"
    CheckerViolationMultiple = "CheckerViolationMultiple"
    StableDesignPractice = "StableDesignPractice"


_WS = re.compile(r"\s+")
_DIGITS = re.compile(r"\d+")


def _flat(text: str) -> str:
    """Single-line, single-spaced; all stored fields go through this."""
    return _WS.sub(" ", text).strip()


def normalize_rule(text: str) -> str:
    return _DIGITS.sub("", _WS.sub(" ", text.lower())).strip()


def dedup_key(rule_text: str) -> str:
    return hashlib.sha256(normalize_rule(rule_text).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PlaybookEntry:
    entry_id: str
    scope: str                 # GENERAL_SCOPE or a task-type label
    trigger: str
    evidence: str
    rule: str
    applicability: str
    task_id: int
    iteration: int
    timestamp: float
    admission_basis: AdmissionBasis

    def __post_init__(self) -> None:
        if not self.rule.strip():
            raise ValueError("playbook entry needs non-empty rule text")
        if len(self.rule) > RULE_CAP:
            raise ValueError(f"rule text exceeds the {RULE_CAP}-char cap")
        for field in (self.trigger, self.evidence, self.rule, self.applicability):
            if "\n" in field or "\t" in field:
                raise ValueError("entry text fields must be single-line")


def make_entry(scope: str, trigger: str, evidence: str, rule: str,
               applicability: str, task_id: int, iteration: int,
               timestamp: float,
               admission_basis: AdmissionBasis) -> PlaybookEntry:
    rule = _flat(rule)[:RULE_CAP]
    evidence = _flat(evidence)[:EVIDENCE_CAP]
    return PlaybookEntry(
        entry_id=dedup_key(rule), scope=scope.lower(), trigger=_flat(trigger),
        evidence=evidence, rule=rule, applicability=_flat(applicability),
        task_id=task_id, iteration=iteration, timestamp=timestamp,
        admission_basis=admission_basis)


@dataclass(frozen=True)
class MemoryState:
    general: tuple[PlaybookEntry, ...] = ()
    by_type: tuple[tuple[str, tuple[PlaybookEntry, ...]], ...] = ()
    version: int = 0
    conventions: tuple[tuple[str, str], ...] = DEFAULT_CONVENTIONS

    def all_entries(self) -> tuple[PlaybookEntry, ...]:
        out = list(self.general)
        for _, entries in self.by_type:
            out.extend(entries)
        return tuple(out)

    def entry_ids(self) -> set[str]:
        return {e.entry_id for e in self.all_entries()}


def empty_state(conventions: Sequence[tuple[str, str]] = DEFAULT_CONVENTIONS) -> MemoryState:
    return MemoryState(conventions=tuple(conventions))


# ----------------------------------------------------------------------
# run feedback and distillation
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class FeedbackBundle:
    """Everything one run learned: the task, the last candidate, the error
    flags, and every diagnostic tagged with the iteration it came from."""

    task: TaskInstance
    candidate: Optional[DesignCandidate]
    program_error: bool
    simulator_error: bool
    diagnostics: tuple[tuple[int, Diagnostic], ...]
    measurements: ResultBundle
    passed: bool


def _rule_prefix(signature: str) -> str:
    return signature.split(":", 1)[0]


def distill(bundle: FeedbackBundle,
            signature_history: Optional[Mapping[str, int]] = None,
            now: float = 0.0) -> list[PlaybookEntry]:
    """Turn run feedback into candidate playbook entries.

    Admission needs evidence: a full signature seen in two or more distinct
    iterations (or previously in other tasks, per signature_history), or a
    checker rule violated at least twice anywhere in the run.  Passing runs
    produce nothing; promotion of good practices is an explicit curator
    action, not an automatic one.
    """
    if bundle.passed:
        return []
    history = signature_history or {}
    iters_by_sig: dict[str, set[int]] = {}
    count_by_rule: dict[str, int] = {}
    latest: dict[str, tuple[int, Diagnostic]] = {}
    for iteration, diag in bundle.diagnostics:
        iters_by_sig.setdefault(diag.signature, set()).add(iteration)
        if diag.stage is Stage.Requirement:
            count_by_rule[_rule_prefix(diag.signature)] = \
                count_by_rule.get(_rule_prefix(diag.signature), 0) + 1
        latest[diag.signature] = (iteration, diag)

    out: dict[str, PlaybookEntry] = {}
    for iteration, diag in bundle.diagnostics:
        sig = diag.signature
        repeated = len(iters_by_sig[sig]) + history.get(sig, 0) >= 2
        violated_twice = (diag.stage is Stage.Requirement
                          and count_by_rule.get(_rule_prefix(sig), 0) >= 2)
        if not repeated and not violated_twice:
            continue
        basis = (AdmissionBasis.RepeatedFailure if repeated
                 else AdmissionBasis.CheckerViolationMultiple)
        scope = (GENERAL_SCOPE if diag.stage is Stage.Requirement
                 else bundle.task.task_type)
        rule = diag.suggested_fix or (
            f"eliminate the failure class '{_rule_prefix(sig)}' before emitting the netlist")
        last_iter, last_diag = latest[sig]
        entry = make_entry(
            scope=scope,
            trigger=f"{bundle.task.task_type}; {sig}",
            evidence=last_diag.evidence,
            rule=rule,
            applicability=("any netlist" if scope == GENERAL_SCOPE
                           else f"when designing {bundle.task.task_type} circuits"),
            task_id=bundle.task.task_id, iteration=last_iter,
            timestamp=now, admission_basis=basis)
        out.setdefault(entry.entry_id, entry)
    return list(out.values())


# ----------------------------------------------------------------------
# the update operator: Dedup(Filter(m || delta))
# ----------------------------------------------------------------------

def _conflicts(rule_text: str, conventions: Iterable[tuple[str, str]]) -> Optional[str]:
    norm = _WS.sub(" ", rule_text.lower()).strip()
    for statement, pattern in conventions:
        if re.search(pattern, norm):
            return statement
    return None


def update(m: MemoryState, delta: Sequence[PlaybookEntry],
           omega=None) -> MemoryState:
    """Append the admissible subset of delta; never mutates m.

    Entries conflicting with the store's registered conventions are
    dropped, as are entries whose id is already present (or repeated
    within delta).  Version bumps only when something appended.
    The omega parameter is accepted for signature parity with callers
    that carry a constraint set; the conventions that matter were
    registered at store creation.
    """
    seen = m.entry_ids()
    general = list(m.general)
    by_type = {label: list(entries) for label, entries in m.by_type}
    appended = False
    for entry in delta:
        against = _conflicts(entry.rule, m.conventions)
        if against is not None:
            log.info("rejected rule %s: conflicts with convention %r",
                     entry.entry_id, against)
            continue
        if entry.entry_id in seen:
            log.info("rejected rule %s: duplicate", entry.entry_id)
            continue
        seen.add(entry.entry_id)
        appended = True
        if entry.scope == GENERAL_SCOPE:
            general.append(entry)
        else:
            by_type.setdefault(entry.scope, []).append(entry)
    if not appended:
        return m
    return replace(
        m, general=tuple(general),
        by_type=tuple((label, tuple(entries)) for label, entries in by_type.items()),
        version=m.version + 1)


# ----------------------------------------------------------------------
# retrieval (exact key, else minimal substring key, else general only)
# ----------------------------------------------------------------------

def retrieve(m: MemoryState, task_type: str,
             limit: int = RETRIEVE_LIMIT,
             char_budget: int = RETRIEVE_CHAR_BUDGET) -> tuple[PlaybookEntry, ...]:
    """General entries first, then the type-specific list chosen by:
    exact label match; else the minimal stored key that is a substring of
    the label (shortest, ties lexicographic); else nothing type-specific.
    Within each scope newest entries come first, and the combined output
    is truncated to the entry and character budgets."""
    tau = task_type.lower()
    table = dict(m.by_type)
    keyed: tuple[PlaybookEntry, ...] = ()
    if tau in table:
        keyed = table[tau]
    else:
        partial = sorted((k for k in table if k and k in tau),
                         key=lambda k: (len(k), k))
        if partial:
            keyed = table[partial[0]]
    ordered = (tuple(reversed(m.general)) + tuple(reversed(keyed)))
    out: list[PlaybookEntry] = []
    used = 0
    for entry in ordered:
        if len(out) >= limit:
            break
        if out and used + len(entry.rule) > char_budget:
            break
        out.append(entry)
        used += len(entry.rule)
    return tuple(out)


# ----------------------------------------------------------------------
# persistence: atomic, checksummed, single-writer
# ----------------------------------------------------------------------

def _render(m: MemoryState) -> str:
    lines = [FORMAT_HEADER, f"version: {m.version}", "[Conventions]"]
    for statement, pattern in m.conventions:
        lines.append(f"- rule: {statement}")
        lines.append(f"  deny: {pattern}")

    def emit_entries(entries: Iterable[PlaybookEntry]) -> None:
        for e in entries:
            lines.append(f"- id: {e.entry_id}")
            lines.append(f"  trigger: {e.trigger}")
            lines.append(f"  evidence: {e.evidence}")
            lines.append(f"  rule: {e.rule}")
            lines.append(f"  applicability: {e.applicability}")
            lines.append(f"  provenance: task={e.task_id} iteration={e.iteration} at={e.timestamp!r}")
            lines.append(f"  basis: {e.admission_basis.value}")

    lines.append("[General Rules]")
    emit_entries(m.general)
    for label, entries in m.by_type:
        lines.append(f"[Task-Type Rules: {label}]")
        emit_entries(entries)
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    return body + f"checksum: sha256:{digest}\n"


def persist(m: MemoryState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(_render(m))
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cannot persist store at {path}: {exc}") from exc


_FIELD = re.compile(r"^  ([a-z]+): ?(.*)$")
_PROV = re.compile(r"^task=(-?\d+) iteration=(\d+) at=(.+)$")


def load(path) -> MemoryState:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read store at {path}: {exc}") from exc
    lines = text.splitlines()
    if len(lines) < 2 or not lines[-1].startswith("checksum: sha256:"):
        raise CorruptStore("store is truncated: checksum line missing")
    body = "\n".join(lines[:-1]) + "\n"
    want = lines[-1][len("checksum: sha256:"):]
    got = hashlib.sha256(body.encode()).hexdigest()
    if got != want:
        raise CorruptStore("store checksum mismatch")
    if lines[0] != FORMAT_HEADER:
        raise CorruptStore(f"unknown store format header {lines[0]!r}")
    if not lines[1].startswith("version: "):
        raise CorruptStore("store missing version line")
    version = int(lines[1][len("version: "):])

    conventions: list[tuple[str, str]] = []
    general: list[PlaybookEntry] = []
    by_type: dict[str, list[PlaybookEntry]] = {}
    section: Optional[str] = None
    current: Optional[dict] = None

    def close_entry() -> None:
        nonlocal current
        if current is None:
            return
        if section == "[Conventions]":
            try:
                conventions.append((current["rule"], current["deny"]))
            except KeyError as exc:
                raise CorruptStore(f"convention missing field {exc}") from exc
            current = None
            return
        try:
            prov = _PROV.match(current["provenance"])
            if prov is None:
                raise CorruptStore(
                    f"bad provenance line {current['provenance']!r}")
            scope = (GENERAL_SCOPE if section == "[General Rules]"
                     else section[len("[Task-Type Rules: "):-1])
            entry = PlaybookEntry(
                entry_id=current["id"], scope=scope, trigger=current["trigger"],
                evidence=current["evidence"], rule=current["rule"],
                applicability=current["applicability"],
                task_id=int(prov.group(1)), iteration=int(prov.group(2)),
                timestamp=float(prov.group(3)),
                admission_basis=AdmissionBasis(current["basis"]))
        except (KeyError, ValueError) as exc:
            raise CorruptStore(f"malformed entry near {current!r}: {exc}") from exc
        if entry.entry_id != dedup_key(entry.rule):
            raise CorruptStore(f"entry id {entry.entry_id} does not match its rule text")
        if scope == GENERAL_SCOPE:
            general.append(entry)
        else:
            by_type.setdefault(scope, []).append(entry)
        current = None

    for line in lines[2:-1]:
        if line.startswith("["):
            close_entry()
            if line != "[Conventions]" and line != "[General Rules]" \
                    and not (line.startswith("[Task-Type Rules: ") and line.endswith("]")):
                raise CorruptStore(f"unknown section {line!r}")
            section = line
        elif line.startswith("- "):
            close_entry()
            key, _, value = line[2:].partition(": ")
            current = {key: value}
        elif line.startswith("  ") and current is not None:
            m_field = _FIELD.match(line)
            if m_field is None:
                raise CorruptStore(f"unparseable field line {line!r}")
            current[m_field.group(1)] = m_field.group(2)
        elif line.strip():
            raise CorruptStore(f"unexpected line {line!r}")
    close_entry()
    return MemoryState(
        general=tuple(general),
        by_type=tuple((label, tuple(entries)) for label, entries in by_type.items()),
        version=version, conventions=tuple(conventions))


@contextmanager
def write_lock(path, timeout: float = 10.0, poll: float = 0.05):
    """Cross-process writer exclusion via an O_EXCL lock file."""
    lock = Path(str(path) + ".lock")
    deadline = time.monotonic() + timeout
    while True:
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            if time.monotonic() > deadline:
                raise IOFailure(f"store writer lock is held: {lock}")
            time.sleep(poll)
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        try:
            lock.unlink()
        except FileNotFoundError:
            pass
