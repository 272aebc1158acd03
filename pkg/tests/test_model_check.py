"""Process-model checker: the six assertions, mutations, counterexamples."""

from __future__ import annotations

import random

import pytest

from cspfarm.model_check import (BadMutation, CheckResult, StateLimit, TERM,
                                 build_system, check_all, check_deadlock,
                                 check_determinism, check_divergence,
                                 check_failures_refinement,
                                 check_trace_refinement, format_event, replay)


@pytest.mark.parametrize("clusters", [1, 2, 3])
def test_all_assertions_pass_on_correct_model(clusters):
    results = check_all(build_system(clusters))
    assert [r.name for r in results] == [
        "trace-refinement", "failures-refinement",
        "failures-divergences-refinement", "deadlock-free", "divergence-free",
        "deterministic"]
    assert all(r.passed for r in results), [r.line() for r in results]


def test_state_count_grows_with_cluster_count():
    counts = [check_deadlock(build_system(n)).states for n in (1, 2, 3)]
    assert counts[0] < counts[1] < counts[2]


def test_initial_state_enables_only_the_first_emission():
    model = build_system(2)
    events = [e for e, _ in model.transitions(model.initial())]
    assert events == [("emit", None, "A")]


def test_hand_derived_complete_trace_replays_at_one_cluster():
    model = build_system(1)
    trace = [("emit", None, "A")]
    order = ["A", "B", "C", "D", "E"]
    for obj in order:
        nxt = order[order.index(obj) + 1] if obj != "E" else TERM
        trace += [("request", 0, "S"), ("issue", 0, obj), ("work", 0, obj),
                  ("result", 0, obj), ("gather", None, obj), ("emit", None, nxt)]
    trace += [("request", 0, "S"), ("issue", 0, TERM), ("work", 0, TERM),
              ("result", 0, TERM), ("gather", None, TERM),
              ("finished", None, True)]
    states = replay(model, trace)
    assert len(states) == 1
    # quiescent: only finished.True remains enabled, forever
    events = [e for e, _ in model.transitions(next(iter(states)))]
    assert events == [("finished", None, True)]


def test_replay_rejects_disabled_event():
    model = build_system(1)
    with pytest.raises(ValueError):
        replay(model, [("request", 0, "S")])


def test_object_conservation_over_random_complete_traces():
    rng = random.Random(99)
    for clusters in (1, 2, 3):
        model = build_system(clusters)
        for _ in range(40):
            counts: dict = {}
            state = model.initial()
            while True:
                trans = model.transitions(state)
                assert trans, "correct model can never be stuck"
                event, state = rng.choice(trans)
                if event == ("finished", None, True):
                    break
                counts[event[0], event[2]] = counts.get((event[0], event[2]), 0) + 1
            for obj in ("A", "B", "C", "D", "E"):
                assert counts[("emit", obj)] == 1
                assert counts[("gather", obj)] == 1
            assert counts[("emit", TERM)] == 1
            assert counts[("gather", TERM)] == 1
            assert counts[("issue", TERM)] == clusters
            assert counts[("work", TERM)] == clusters
            assert counts[("result", TERM)] == clusters
            assert counts[("request", "S")] == 5 + clusters


def test_terminator_short_mutation_deadlocks():
    model = build_system(2, "terminator-short")
    result = check_deadlock(model)
    assert not result.passed
    assert result.counterexample, "deadlock verdict must carry a trace"
    finals = replay(model, result.counterexample)
    assert len(finals) == 1
    assert model.transitions(next(iter(finals))) == []


def test_terminator_short_fails_failures_refinement():
    model = build_system(2, "terminator-short")
    result = check_failures_refinement(model)
    assert not result.passed
    replay(model, result.counterexample)


def test_collector_echo_mutation_diverges():
    model = build_system(2, "collector-echo")
    result = check_divergence(model)
    assert not result.passed
    replay(model, result.counterexample)
    # the correct checks unaffected by the loop itself
    assert check_trace_refinement(model).passed
    assert check_deadlock(model).passed


class _RingModel:
    """Synthetic transition system: a visible step into a 3-state hidden ring.

    Exercises the cycle detector on a cycle longer than a self-loop, which no
    farm mutation produces."""

    def initial(self):
        return "start"

    def transitions(self, state):
        table = {
            "start": [(("finished", None, True), "start"),
                      (("emit", None, "A"), "r0")],
            "r0": [(("work", 0, "A"), "r1")],
            "r1": [(("work", 0, "B"), "r2")],
            "r2": [(("work", 0, "C"), "r0"),
                   (("finished", None, True), "r2")],
        }
        return table[state]


def test_divergence_detects_multi_state_hidden_cycle():
    model = _RingModel()
    result = check_divergence(model)
    assert not result.passed
    assert len(result.counterexample) >= 4  # entry plus the 3-event ring
    replay(model, result.counterexample)
    # the ring is harmless to the other verdicts
    assert check_deadlock(model).passed
    assert check_trace_refinement(model).passed


def test_finished_false_mutation_breaks_trace_refinement():
    model = build_system(2, "finished-false")
    result = check_trace_refinement(model)
    assert not result.passed
    assert result.counterexample[-1] == ("finished", None, False)
    replay(model, result.counterexample)


def test_nondet_emit_mutation_breaks_determinism():
    model = build_system(2, "nondet-emit")
    result = check_determinism(model)
    assert not result.passed
    # trace up to the offending event replays (the event is enabled)
    replay(model, result.counterexample)
    # every other verdict is unaffected by this fault
    assert check_deadlock(model).passed
    assert check_divergence(model).passed
    assert check_trace_refinement(model).passed


def test_correct_model_is_deterministic():
    for n in (1, 2):
        assert check_determinism(build_system(n)).passed


def test_unknown_mutation_rejected():
    with pytest.raises(BadMutation):
        build_system(2, "no-such-fault")


def test_state_cap_enforced():
    with pytest.raises(StateLimit):
        check_deadlock(build_system(3), state_cap=100)


def test_check_result_line_format():
    line = CheckResult("deadlock-free", True, 42).line()
    assert line == "deadlock-free: pass (states=42)"
    failing = CheckResult("deadlock-free", False, 7,
                          [("emit", None, "A")], detail="stuck")
    assert "FAIL" in failing.line() and "emit.A" in failing.line()


def test_format_event():
    assert format_event(("emit", None, "A")) == "emit.A"
    assert format_event(("request", 1, "S")) == "request.1.S"
    assert format_event(("finished", None, True)) == "finished.True"
