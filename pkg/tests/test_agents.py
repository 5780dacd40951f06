"""Prompt composition, netlist extraction, backends, and curation."""

import io
import json
import math
import urllib.error
import urllib.request

import pytest

from circuitloop import agents
from circuitloop.agents import (BackendRefusal, BackendTimeout, BudgetExceeded,
                                HttpBackend, Prompt, QuotaExhausted,
                                ScriptedBackend, ScriptedResponse,
                                TERMINAL_RESPONSE, compose_prompt,
                                extract_netlist, parse_backend_spec)
from circuitloop.memory import (AdmissionBasis, FeedbackBundle, make_entry)
from circuitloop.model import Diagnostic, ResultBundle, Stage

from conftest import make_task


def _entry(rule, scope="general"):
    return make_entry(scope=scope, trigger="t", evidence="e", rule=rule,
                      applicability="any netlist", task_id=1, iteration=1,
                      timestamp=0.0,
                      admission_basis=AdmissionBasis.RepeatedFailure)


def _diag(sig, fix=None):
    return Diagnostic(stage=Stage.Functional, signature=sig,
                      evidence=f"evidence for {sig}", suggested_fix=fix)


# ----------------------------------------------------------------------
# prompt composition
# ----------------------------------------------------------------------

def test_sections_appear_in_fixed_order():
    task = make_task()
    p1 = compose_prompt(task, (), (), iteration=1)
    assert [h for h, _ in p1.sections] == [
        "TaskRequirements", "DesignInstruction", "RelevantKnowledge"]
    p2 = compose_prompt(task, (), (_diag("x"),), iteration=2)
    assert [h for h, _ in p2.sections] == list(agents.SECTION_ORDER)
    assert "## TaskRequirements" in p2.text()


def test_requirements_are_byte_identical_across_iterations():
    task = make_task()
    bodies = set()
    for i in range(1, 6):
        p = compose_prompt(task, (_entry(f"rule {i}"),),
                           (_diag(f"sig-{i}"),), iteration=i,
                           subgoal=f"goal {i}")
        bodies.add(p.section("TaskRequirements"))
    assert len(bodies) == 1


def test_retrieved_rules_land_verbatim():
    rules = ("tie the nmos bulk to its source, never to ground",
             "sweep the input across the full supply window")
    p = compose_prompt(make_task(), tuple(_entry(r) for r in rules), (),
                       iteration=1)
    for r in rules:
        assert r in p.text()
    assert all(t.startswith("entry:") for t in p.composition_trace)
    empty = compose_prompt(make_task(), (), (), iteration=1)
    assert "(no stored rules yet)" in empty.section("RelevantKnowledge")


def test_feedback_is_newest_first_and_capped():
    diags = [_diag(f"sig-{i}") for i in range(5)]
    p = compose_prompt(make_task(), (), diags, iteration=3, feedback_cap=3)
    body = p.section("FailureFeedback")
    assert body.index("sig-4") < body.index("sig-3") < body.index("sig-2")
    assert "sig-1" not in body and "sig-0" not in body
    withfix = compose_prompt(make_task(), (), (_diag("s", fix="do this"),),
                             iteration=2)
    assert "| fix: do this" in withfix.section("FailureFeedback")
    bare = compose_prompt(make_task(), (), (), iteration=2)
    assert bare.section("FailureFeedback") == "(no feedback recorded)"


def test_subgoal_rides_in_the_instruction():
    p = compose_prompt(make_task(), (), (), iteration=1,
                       subgoal="resolve: required-node:out")
    assert "resolve: required-node:out" in p.section("DesignInstruction")


def test_budget_and_iteration_validation():
    with pytest.raises(BudgetExceeded):
        compose_prompt(make_task(), (), (), iteration=1, context_budget=10)
    with pytest.raises(ValueError):
        compose_prompt(make_task(), (), (), iteration=0)


def test_token_estimate_tracks_length():
    p = compose_prompt(make_task(), (), (), iteration=1)
    assert p.token_estimate == math.ceil(len(p.text()) / agents.CHARS_PER_TOKEN)


# ----------------------------------------------------------------------
# extraction
# ----------------------------------------------------------------------

def test_extract_netlist_prefers_the_first_fence():
    text = "Here is the design:\n```spice\nr1 a 0 1k\n.end\n```\nand\n```\nr2 b 0 2k\n.end\n```"
    assert extract_netlist(text) == "r1 a 0 1k\n.end\n"
    assert extract_netlist("r1 a 0 1k\n.end") == "r1 a 0 1k\n.end\n"


# ----------------------------------------------------------------------
# scripted backend
# ----------------------------------------------------------------------

def test_scripted_gating_and_terminal():
    backend = ScriptedBackend({
        (1, 1): ScriptedResponse("good\n.end\n", if_prompt_contains="magic",
                                 else_text="bad\n.end\n"),
        (1, 2): ScriptedResponse("plain\n.end\n"),
    })
    hit = Prompt(sections=(("K", "the magic word"),), token_estimate=1,
                 composition_trace=(), task_id=1, iteration=1)
    miss = Prompt(sections=(("K", "nothing here"),), token_estimate=1,
                  composition_trace=(), task_id=1, iteration=1)
    assert backend.generate(hit).source_text == "good\n.end\n"
    assert backend.generate(miss).source_text == "bad\n.end\n"
    plain = Prompt(sections=(), token_estimate=1, composition_trace=(),
                   task_id=1, iteration=2)
    assert backend.generate(plain).source_text == "plain\n.end\n"
    off_script = Prompt(sections=(), token_estimate=1, composition_trace=(),
                        task_id=9, iteration=9)
    assert backend.generate(off_script).source_text == TERMINAL_RESPONSE
    assert backend.calls == 4
    assert backend.generate(hit).token_cost >= 2


def test_script_file_round_trip(tmp_path):
    script = """\
=== task 1 iter 1 ?contains=needle
gated body
.end
=== task 1 iter 1 !else
else body
.end
=== task 2 iter 1
plain body
.end
=== terminal
all gone
.end
"""
    path = tmp_path / "demo.script"
    path.write_text(script)
    backend = ScriptedBackend.from_file(path)
    rec = backend.responses[(1, 1)]
    assert rec.if_prompt_contains == "needle"
    assert rec.text == "gated body\n.end\n"
    assert rec.else_text == "else body\n.end\n"
    assert backend.responses[(2, 1)].text == "plain body\n.end\n"
    assert backend.terminal == "all gone\n.end\n"


def test_script_file_rejects_bad_structure(tmp_path):
    bad = tmp_path / "bad.script"
    bad.write_text("=== task one iter 1\nbody\n")
    with pytest.raises(ValueError, match="bad script header"):
        ScriptedBackend.from_file(bad)
    orphan = tmp_path / "orphan.script"
    orphan.write_text("=== task 1 iter 1 !else\nbody\n")
    with pytest.raises(ValueError, match="no gated record"):
        ScriptedBackend.from_file(orphan)


def test_parse_backend_spec(tmp_path):
    path = tmp_path / "s.script"
    path.write_text("=== task 1 iter 1\nbody\n")
    assert isinstance(parse_backend_spec(f"scripted:{path}"), ScriptedBackend)
    b = parse_backend_spec("http:https://example.invalid/v1/chat")
    assert isinstance(b, HttpBackend)
    assert b.endpoint == "https://example.invalid/v1/chat"
    with pytest.raises(ValueError):
        parse_backend_spec("carrier-pigeon:coop")


# ----------------------------------------------------------------------
# http backend (urlopen stubbed out)
# ----------------------------------------------------------------------

class _FakeResponse:
    def __init__(self, payload):
        self._data = json.dumps(payload).encode()

    def read(self):
        return self._data

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _prompt():
    return Prompt(sections=(("K", "hello"),), token_estimate=2,
                  composition_trace=(), task_id=1, iteration=1)


def test_http_success_reads_content_and_usage(monkeypatch, tmp_path):
    seen = {}

    def fake_urlopen(req, timeout=None):
        seen["req"] = req
        seen["timeout"] = timeout
        return _FakeResponse({
            "choices": [{"message": {"content": "netlist text"}}],
            "usage": {"total_tokens": 77}})

    monkeypatch.setattr(urllib.request, "urlopen", fake_urlopen)
    monkeypatch.setenv("CIRCUITLOOP_API_KEY", "sk-secret")
    backend = HttpBackend("https://example.invalid/v1", model="m-1",
                          log_dir=tmp_path / "logs")
    got = backend.generate(_prompt())
    assert got.source_text == "netlist text"
    assert got.token_cost == 77
    req = seen["req"]
    assert req.get_header("Authorization") == "Bearer sk-secret"
    body = json.loads(req.data.decode())
    assert body["model"] == "m-1"
    assert body["messages"][0]["content"] == _prompt().text()
    # request and response both logged as json files
    logged = sorted(p.name for p in (tmp_path / "logs").iterdir())
    assert logged == ["http_001_request.json", "http_001_response.json"]


def test_http_estimates_cost_without_usage(monkeypatch):
    monkeypatch.setattr(
        urllib.request, "urlopen",
        lambda req, timeout=None: _FakeResponse(
            {"choices": [{"message": {"content": "abcd" * 10}}]}))
    got = HttpBackend("https://example.invalid").generate(_prompt())
    assert got.token_cost > 0


def test_http_error_mapping(monkeypatch):
    def raise_http(code):
        def fake(req, timeout=None):
            raise urllib.error.HTTPError("u", code, "reason", {}, io.BytesIO())
        return fake

    backend = HttpBackend("https://example.invalid")
    monkeypatch.setattr(urllib.request, "urlopen", raise_http(429))
    with pytest.raises(QuotaExhausted):
        backend.generate(_prompt())
    monkeypatch.setattr(urllib.request, "urlopen", raise_http(500))
    with pytest.raises(BackendRefusal):
        backend.generate(_prompt())
    monkeypatch.setattr(
        urllib.request, "urlopen",
        lambda req, timeout=None: (_ for _ in ()).throw(
            urllib.error.URLError("no route")))
    with pytest.raises(BackendTimeout):
        backend.generate(_prompt())
    monkeypatch.setattr(
        urllib.request, "urlopen",
        lambda req, timeout=None: _FakeResponse({"choices": []}))
    with pytest.raises(BackendRefusal, match="missing content"):
        backend.generate(_prompt())


# ----------------------------------------------------------------------
# curation
# ----------------------------------------------------------------------

def _failed_bundle():
    d = _diag("assert-GainAtLeast:out", fix="raise the load resistor value")
    return FeedbackBundle(task=make_task(), candidate=None,
                          program_error=False, simulator_error=False,
                          diagnostics=((1, d), (2, d)),
                          measurements=ResultBundle(), passed=False)


def test_scripted_backend_curates_the_floor_only():
    backend = ScriptedBackend({})
    got = agents.curate(backend, _failed_bundle())
    assert [e.rule for e in got] == ["raise the load resistor value"]
    assert backend.calls == 0


def test_http_backend_adds_curator_entries(monkeypatch):
    backend = HttpBackend("https://example.invalid")
    reply = ("rule: decouple the supply near the output stage\n"
             "scope: amplifier\n\n"
             "rule: raise the load resistor value\n")
    monkeypatch.setattr(
        backend, "generate",
        lambda prompt: agents.GenerationResult(reply, token_cost=5))
    got = agents.curate(backend, _failed_bundle())
    rules = [e.rule for e in got]
    # the floor comes first; the duplicate curator rule is dropped
    assert rules == ["raise the load resistor value",
                     "decouple the supply near the output stage"]
    extra = got[1]
    assert extra.scope == "amplifier"
    assert extra.admission_basis is AdmissionBasis.StableDesignPractice


def test_http_curation_failures_fall_back_to_the_floor(monkeypatch):
    backend = HttpBackend("https://example.invalid")
    monkeypatch.setattr(
        backend, "generate",
        lambda prompt: agents.GenerationResult("no structured rules here",
                                               token_cost=1))
    got = agents.curate(backend, _failed_bundle())
    assert [e.rule for e in got] == ["raise the load resistor value"]
    monkeypatch.setattr(
        backend, "generate",
        lambda prompt: (_ for _ in ()).throw(BackendTimeout("down")))
    got = agents.curate(backend, _failed_bundle())
    assert [e.rule for e in got] == ["raise the load resistor value"]
