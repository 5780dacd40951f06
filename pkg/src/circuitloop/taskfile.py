"""Task file format: line-oriented key/value header plus [assertion] blocks.

A task file is plain text:

    # comment
    id: 26
    type: filter
    instruction: Design a first-order RC low-pass filter driven from 'vin'.
    instruction: Name the output node 'out'.
    require-node: out
    require-analysis: ac
    check-rule: <extra checker rule id>
    [assertion]
    kind: CornerFrequencyNear
    signal: out
    target_hz: 159.155
    tolerance: 0.05

Repeated `instruction:` lines join with newlines.  `require-subckt:` takes
a name followed by its pin order.  Assertion parameter keys are the ones
the assertion kind requires; `direction:` accepts increasing/decreasing.
"""

from __future__ import annotations

from pathlib import Path

from .model import (AssertionKind, ConstraintSet, Difficulty,
                    FunctionalAssertion, REQUIRED_PARAMS, TaskInstance,
                    difficulty_for_id)

DEFAULT_TOLERANCE = 0.05

_DIRECTIONS = {"increasing": 1.0, "decreasing": -1.0, "1": 1.0, "-1": -1.0}


class TaskFileError(Exception):
    def __init__(self, message: str, line_no: int = 0):
        super().__init__(f"line {line_no}: {message}" if line_no else message)
        self.line_no = line_no


def _lines(text: str):
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield no, line


def loads(text: str) -> TaskInstance:
    header: dict[str, object] = {
        "instruction": [], "require-node": [], "require-analysis": [],
        "require-subckt": [], "check-rule": [],
    }
    assertion_blocks: list[tuple[int, dict[str, str]]] = []
    current: dict[str, str] | None = None
    for no, line in _lines(text):
        if line == "[assertion]":
            current = {}
            assertion_blocks.append((no, current))
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise TaskFileError(f"expected 'key: value', got {line!r}", no)
        key, value = key.strip().lower(), value.strip()
        if current is not None:
            current[key] = value
        elif key in ("instruction", "require-node", "require-analysis",
                     "require-subckt", "check-rule"):
            header[key].append(value)
        elif key in ("id", "type", "difficulty"):
            if key in header and not isinstance(header[key], list):
                raise TaskFileError(f"duplicate '{key}' field", no)
            header[key] = value
        else:
            raise TaskFileError(f"unknown task field {key!r}", no)

    if "id" not in header:
        raise TaskFileError("task file needs an 'id' field")
    if "type" not in header:
        raise TaskFileError("task file needs a 'type' field")
    try:
        task_id = int(header["id"])
    except ValueError as exc:
        raise TaskFileError(f"id must be an integer, got {header['id']!r}") from exc
    if not header["instruction"]:
        raise TaskFileError("task file needs at least one 'instruction' line")

    difficulty = difficulty_for_id(task_id)
    if "difficulty" in header:
        try:
            difficulty = Difficulty(str(header["difficulty"]).capitalize())
        except ValueError as exc:
            raise TaskFileError(f"unknown difficulty {header['difficulty']!r}") from exc
    if difficulty is None:
        raise TaskFileError(f"task id {task_id} is outside the standard tier map; "
                            "add an explicit 'difficulty' field")

    subckt_pins = []
    for spec in header["require-subckt"]:
        parts = spec.split()
        if len(parts) < 2:
            raise TaskFileError(f"require-subckt needs a name and pins, got {spec!r}")
        subckt_pins.append((parts[0].lower(), tuple(p.lower() for p in parts[1:])))

    omega = ConstraintSet(
        required_node_names=tuple(n.lower() for n in header["require-node"]),
        required_subcircuit_pins=tuple(subckt_pins),
        simulator_settings=tuple(a.lower() for a in header["require-analysis"]),
        naming_rules=tuple(header["check-rule"]),
    )

    assertions = []
    for no, block in assertion_blocks:
        if "kind" not in block:
            raise TaskFileError("assertion block needs a 'kind' field", no)
        try:
            kind = AssertionKind(block["kind"])
        except ValueError as exc:
            raise TaskFileError(f"unknown assertion kind {block['kind']!r}", no) from exc
        signal = block.get("signal", "").lower()
        if not signal:
            raise TaskFileError("assertion block needs a 'signal' field", no)
        tolerance = float(block.get("tolerance", DEFAULT_TOLERANCE))
        params = []
        for pname in sorted(REQUIRED_PARAMS[kind]):
            if pname not in block:
                raise TaskFileError(f"{kind.value} assertion needs '{pname}'", no)
            raw = block[pname]
            if pname == "direction":
                if raw.lower() not in _DIRECTIONS:
                    raise TaskFileError(f"direction must be increasing or decreasing, got {raw!r}", no)
                params.append((pname, _DIRECTIONS[raw.lower()]))
            else:
                params.append((pname, float(raw)))
        assertions.append(FunctionalAssertion(
            kind=kind, target_signal=signal, parameters=tuple(params),
            tolerance=tolerance))

    return TaskInstance(
        task_id=task_id, task_type=str(header["type"]).lower(),
        instruction="\n".join(header["instruction"]),
        constraints=omega, assertions=tuple(assertions), difficulty=difficulty)


def load(path) -> TaskInstance:
    return loads(Path(path).read_text())


def load_dir(directory) -> list[TaskInstance]:
    """All *.task files in a directory, ordered by task id."""
    tasks = [load(p) for p in sorted(Path(directory).glob("*.task"))]
    tasks.sort(key=lambda t: t.task_id)
    return tasks
