"""Command-line surface: each subcommand's happy path and error exits."""

import json

from circuitloop import cli, evalkit, memory
from circuitloop.memory import AdmissionBasis

from conftest import CS_AMP

TASK = """\
id: 9
type: amplifier
instruction: Design a common-source amplifier with voltage gain of at least 5.
require-node: out
require-analysis: dc
[assertion]
kind: GainAtLeast
signal: out
min_gain: 5
tolerance: 0.05
"""

BAD_AMP = CS_AMP.replace("rd vdd out 5k\n", "rd vdd out 5k\nrd vdd out 5k\n")


def _write_inputs(tmp_path, response):
    task_path = tmp_path / "amp.task"
    task_path.write_text(TASK)
    script_path = tmp_path / "amp.script"
    script_path.write_text("=== task 9 iter 1\n" + response)
    return task_path, script_path


def test_run_reports_a_pass(tmp_path, capsys):
    task_path, script_path = _write_inputs(tmp_path, CS_AMP)
    workspace = tmp_path / "ws"
    rc = cli.main([
        "run", "--task", str(task_path),
        "--backend", f"scripted:{script_path}",
        "--store", str(tmp_path / "s.playbook"),
        "--K", "3", "--workspace", str(workspace)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "task 9 (amplifier): pass" in out
    assert "attempts: 1/3" in out
    assert "first success at: 1" in out
    assert "time to first success: 1" in out
    assert "cumulative tokens:" in out
    assert (workspace / "candidate_1.cir").read_text() == CS_AMP


def test_run_reports_a_fail_and_still_exits_zero(tmp_path, capsys):
    task_path, script_path = _write_inputs(tmp_path, BAD_AMP)
    rc = cli.main([
        "run", "--task", str(task_path),
        "--backend", f"scripted:{script_path}",
        "--store", str(tmp_path / "s.playbook"),
        "--K", "2", "--workspace", str(tmp_path / "ws")])
    out = capsys.readouterr().out
    assert rc == 0
    assert "task 9 (amplifier): fail" in out
    assert "attempts: 2/2" in out
    assert "first success at" not in out


def test_bench_writes_report_and_defaults(tmp_path, capsys):
    tasks_dir = tmp_path / "tasks"
    tasks_dir.mkdir()
    (tasks_dir / "amp.task").write_text(TASK)
    script_path = tmp_path / "amp.script"
    script_path.write_text("=== task 9 iter 1\n" + CS_AMP)
    report_path = tmp_path / "out" / "report.json"
    rc = cli.main([
        "bench", "--tasks", str(tasks_dir), "--n", "2", "--K", "3",
        "--report", str(report_path),
        "--backend", f"scripted:{script_path}", "--label", "demo"])
    out = capsys.readouterr().out
    assert rc == 0
    assert f"report written to {report_path}" in out
    assert "demo" in out

    doc = evalkit.ReportDocument.from_json(report_path.read_text())
    assert doc.render() in out
    # unset --store and --workspace land next to the report
    assert (report_path.parent / "bench.playbook").exists()
    assert (report_path.parent / "bench.work" / "state.json").exists()
    state = json.loads((report_path.parent / "bench.work" / "state.json").read_text())
    assert state["task9-run1"]["success"] and state["task9-run2"]["success"]


def test_bench_rejects_an_empty_task_directory(tmp_path, capsys):
    empty = tmp_path / "tasks"
    empty.mkdir()
    rc = cli.main([
        "bench", "--tasks", str(empty), "--report", str(tmp_path / "r.json"),
        "--backend", "scripted:/dev/null"])
    err = capsys.readouterr().err
    assert rc == 1
    assert "no .task files" in err


def _stocked_store(tmp_path):
    entry = memory.make_entry(
        scope=memory.GENERAL_SCOPE,
        trigger="amplifier; duplicate-identifier:rd",
        evidence="line 5: device 'rd' already defined at line 4",
        rule="give every device a unique identifier",
        applicability="any netlist", task_id=9, iteration=2, timestamp=1.0,
        admission_basis=AdmissionBasis.RepeatedFailure)
    state = memory.update(memory.empty_state(), [entry])
    store = tmp_path / "s.playbook"
    memory.persist(state, store)
    return store, entry


def test_memory_show_summarizes_the_store(tmp_path, capsys):
    store, entry = _stocked_store(tmp_path)
    rc = cli.main(["memory", "show", "--store", str(store)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "1 entries" in out
    assert f"[general] {entry.entry_id}  RepeatedFailure" in out
    assert "give every device a unique identifier" in out


def test_memory_export_round_trips_the_file(tmp_path, capsys):
    store, _ = _stocked_store(tmp_path)
    rc = cli.main(["memory", "export", "--store", str(store)])
    out = capsys.readouterr().out
    assert rc == 0
    assert out == store.read_text()


def test_eval_rerenders_at_chosen_k(tmp_path, capsys):
    tasks_dir = tmp_path / "tasks"
    tasks_dir.mkdir()
    (tasks_dir / "amp.task").write_text(TASK)
    script_path = tmp_path / "amp.script"
    script_path.write_text("=== task 9 iter 1\n" + CS_AMP)
    report_path = tmp_path / "report.json"
    assert cli.main([
        "bench", "--tasks", str(tasks_dir), "--n", "2", "--K", "2",
        "--report", str(report_path),
        "--backend", f"scripted:{script_path}", "--label", "demo"]) == 0
    capsys.readouterr()

    rc = cli.main(["eval", "--report", str(report_path), "--passk", "1,2"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "demo @1" in out and "demo @2" in out


def test_eval_rejects_bad_k_lists(tmp_path, capsys):
    report_path = tmp_path / "report.json"
    doc = evalkit.report([("demo", [[evalkit.TaskTally(
        task_id=1, n=2, c=1, per_attempt_success=((True,), (False,)),
        ttfs_samples=(1.0,), token_samples=(10,))]])], {1: "Easy"})
    report_path.write_text(doc.to_json())

    rc = cli.main(["eval", "--report", str(report_path), "--passk", "abc"])
    err = capsys.readouterr().err
    assert rc == 1 and "bad --passk value" in err

    rc = cli.main(["eval", "--report", str(report_path), "--passk", " , "])
    err = capsys.readouterr().err
    assert rc == 1 and "needs at least one k" in err
