"""Explicit-state checker for the farm's process model.

The model is the finite abstraction of the running farm: an emitter feeds
five objects A..E plus a terminator through a request-driven server to N
clients, each with a relay worker; a reducer fans results back into a
collector which, once terminated, loops forever on a ``finished`` event.
Composition is alphabetized parallel: an event fires only if every process
owning it can take it.  Channels:

    emit          emitter -> server           (objects)
    request.i     client i -> server          (request signal)
    issue.i       server -> client i          (objects)
    work.i        client i -> worker i        (objects)
    result.i      worker i -> reducer         (objects)
    gather        reducer -> collector        (objects)
    finished      collector alone             (True)

The checks are plain breadth-first exploration: deadlock freedom, divergence
freedom (no cycle of hidden events), trace and failures refinement against
the one-state specification that only ever performs ``finished.True``, and
failures-level determinism via subset construction.  A mutation id injects a
known fault for counterexample exercises.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

OBJECTS = ("A", "B", "C", "D", "E")
TERM = "TERM"

HIDDEN_CHANNELS = frozenset({"emit", "request", "issue", "work", "result", "gather"})
FINISHED = ("finished", None, True)

MUTATIONS = {
    "terminator-short": "server terminates after handing the terminator to "
                        "only N-1 clients",
    "collector-echo": "terminated collector re-emits the terminator to itself "
                      "forever (hidden self-loop)",
    "finished-false": "terminated collector can also signal finished.False "
                      "(second visible event)",
    "nondet-emit": "the first emission has two same-label branches "
                   "(constructed nondeterminism)",
}

DEFAULT_STATE_CAP = 10_000_000


class BadMutation(Exception):
    pass


class StateLimit(Exception):
    pass


Event = tuple  # (channel, index or None, value)


def _succ(obj: str) -> str:
    i = OBJECTS.index(obj)
    return OBJECTS[i + 1] if i + 1 < len(OBJECTS) else TERM


@dataclass(frozen=True)
class FarmModel:
    """Transition system for N clients, optionally with an injected fault."""

    clusters: int
    mutation: Optional[str] = None

    def initial(self):
        n = self.clusters
        return (("emit", "A"), ("read",), (("req",),) * n, (("recv",),) * n,
                ("run", frozenset()), ("run",))

    def _term_target(self) -> int:
        n = self.clusters
        return n - 1 if self.mutation == "terminator-short" else n

    def transitions(self, state) -> list[tuple[Event, tuple]]:
        emit, server, clients, workers, reducer, collect = state
        n = self.clusters
        out: list[tuple[Event, tuple]] = []

        def mk(emit=emit, server=server, clients=clients, workers=workers,
               reducer=reducer, collect=collect):
            return (emit, server, clients, workers, reducer, collect)

        # emitter -> server
        if emit[0] == "emit" and server == ("read",):
            obj = emit[1]
            if obj == TERM:
                target = self._term_target()
                server2 = ("done",) if target == 0 else ("term", frozenset())
                out.append((("emit", None, TERM), mk(emit=("done",), server=server2)))
            else:
                nexts = [("emit", _succ(obj))]
                if self.mutation == "nondet-emit" and obj == "A":
                    nexts.append(("emit", TERM))
                for emit2 in nexts:
                    out.append((("emit", None, obj),
                                mk(emit=emit2, server=("choice", obj))))

        # client requests accepted by the serving or terminating server
        for i in range(n):
            if clients[i] != ("req",):
                continue
            if server[0] == "choice":
                out.append((("request", i, "S"),
                            mk(server=("send", i, server[1]),
                               clients=_put(clients, i, ("recv",)))))
            elif server[0] == "term" and i not in server[1]:
                out.append((("request", i, "S"),
                            mk(server=("term_send", i, server[1]),
                               clients=_put(clients, i, ("recv",)))))

        # server hands an object (or the terminator) to the requesting client
        if server[0] == "send":
            _, i, obj = server
            if clients[i] == ("recv",):
                out.append((("issue", i, obj),
                            mk(server=("read",),
                               clients=_put(clients, i, ("fwd", obj)))))
        elif server[0] == "term_send":
            _, i, served = server
            if clients[i] == ("recv",):
                served2 = served | {i}
                server2 = ("done",) if len(served2) >= self._term_target() \
                    else ("term", served2)
                out.append((("issue", i, TERM),
                            mk(server=server2,
                               clients=_put(clients, i, ("fwd", TERM)))))

        # client hands its buffered object to its worker
        for i in range(n):
            if clients[i][0] == "fwd" and workers[i] == ("recv",):
                obj = clients[i][1]
                client2 = ("done",) if obj == TERM else ("req",)
                out.append((("work", i, obj),
                            mk(clients=_put(clients, i, client2),
                               workers=_put(workers, i, ("send", obj)))))

        # worker hands its object to the reducer
        if reducer[0] == "run":
            terminated = reducer[1]
            for i in range(n):
                if workers[i][0] == "send" and i not in terminated:
                    obj = workers[i][1]
                    worker2 = ("done",) if obj == TERM else ("recv",)
                    if obj == TERM:
                        t2 = terminated | {i}
                        reducer2 = ("final",) if len(t2) == n else ("run", t2)
                    else:
                        reducer2 = ("fwd", obj, terminated)
                    out.append((("result", i, obj),
                                mk(workers=_put(workers, i, worker2),
                                   reducer=reducer2)))

        # reducer forwards to the collector
        if reducer[0] == "fwd" and collect == ("run",):
            out.append((("gather", None, reducer[1]),
                        mk(reducer=("run", reducer[2]))))
        elif reducer == ("final",) and collect == ("run",):
            out.append((("gather", None, TERM),
                        mk(reducer=("done",), collect=("end",))))

        # terminated collector
        if collect == ("end",):
            out.append((FINISHED, state))
            if self.mutation == "finished-false":
                out.append((("finished", None, False), state))
            if self.mutation == "collector-echo":
                out.append((("gather", None, TERM), state))
        return out


def _put(tup: tuple, i: int, value) -> tuple:
    return tup[:i] + (value,) + tup[i + 1:]


def build_system(clusters: int, mutation: Optional[str] = None) -> FarmModel:
    if clusters < 1:
        raise ValueError("cluster count must be >= 1")
    if mutation is not None and mutation not in MUTATIONS:
        raise BadMutation(f"unknown mutation {mutation!r}; "
                          f"known: {sorted(MUTATIONS)}")
    return FarmModel(clusters, mutation)


@dataclass
class CheckResult:
    name: str
    passed: bool
    states: int
    counterexample: Optional[list[Event]] = None
    detail: str = ""

    def line(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        s = f"{self.name}: {verdict} (states={self.states})"
        if self.detail:
            s += f" {self.detail}"
        if self.counterexample is not None:
            s += "\n  trace: " + " ".join(format_event(e)
                                          for e in self.counterexample)
        return s


def format_event(e: Event) -> str:
    channel, index, value = e
    if index is None:
        return f"{channel}.{value}"
    return f"{channel}.{index}.{value}"


class _Exploration:
    """Reachable graph with BFS parents for shortest-path counterexamples."""

    def __init__(self, model: FarmModel, state_cap: int) -> None:
        self.model = model
        init = model.initial()
        self.parents: dict = {init: None}
        self.adj: dict = {}
        order = deque([init])
        while order:
            state = order.popleft()
            trans = model.transitions(state)
            self.adj[state] = trans
            for event, nxt in trans:
                if nxt not in self.parents:
                    if len(self.parents) >= state_cap:
                        raise StateLimit(f"more than {state_cap} states")
                    self.parents[nxt] = (state, event)
                    order.append(nxt)

    @property
    def states(self) -> int:
        return len(self.parents)

    def path_to(self, state) -> list[Event]:
        events: list[Event] = []
        cur = state
        while self.parents[cur] is not None:
            prev, event = self.parents[cur]
            events.append(event)
            cur = prev
        events.reverse()
        return events


def _explore(model: FarmModel, state_cap: int) -> _Exploration:
    return _Exploration(model, state_cap)


def check_deadlock(model: FarmModel,
                   state_cap: int = DEFAULT_STATE_CAP,
                   exploration: Optional[_Exploration] = None) -> CheckResult:
    """Fail iff some reachable state has no enabled event.  The collector
    never terminates, so a correctly quiescent system always still offers
    ``finished.True``."""
    ex = exploration or _explore(model, state_cap)
    for state, trans in ex.adj.items():
        if not trans:
            return CheckResult("deadlock-free", False, ex.states,
                               ex.path_to(state), detail="deadlocked state reached")
    return CheckResult("deadlock-free", True, ex.states)


def check_divergence(model: FarmModel, hidden: frozenset = HIDDEN_CHANNELS,
                     state_cap: int = DEFAULT_STATE_CAP,
                     exploration: Optional[_Exploration] = None) -> CheckResult:
    """Fail iff a reachable cycle consists solely of hidden events."""
    ex = exploration or _explore(model, state_cap)
    WHITE, GRAY, BLACK = 0, 1, 2
    colour = {s: WHITE for s in ex.adj}
    for root in ex.adj:
        if colour[root] != WHITE:
            continue
        stack = [(root, iter(ex.adj[root]))]
        colour[root] = GRAY
        trail: list[Event] = []
        while stack:
            state, it = stack[-1]
            advanced = False
            for event, nxt in it:
                if event[0] not in hidden:
                    continue
                if colour[nxt] == GRAY:
                    # hidden cycle: close it off for the counterexample
                    cycle_states = [s for s, _ in stack]
                    start = cycle_states.index(nxt)
                    cycle = trail[start:] + [event]
                    return CheckResult(
                        "divergence-free", False, ex.states,
                        ex.path_to(nxt) + cycle,
                        detail=f"hidden cycle of {len(cycle)} events")
                if colour[nxt] == WHITE:
                    colour[nxt] = GRAY
                    stack.append((nxt, iter(ex.adj[nxt])))
                    trail.append(event)
                    advanced = True
                    break
            if not advanced:
                colour[state] = BLACK
                stack.pop()
                if trail:
                    trail.pop()
    return CheckResult("divergence-free", True, ex.states)


def check_trace_refinement(model: FarmModel, hidden: frozenset = HIDDEN_CHANNELS,
                           state_cap: int = DEFAULT_STATE_CAP,
                           exploration: Optional[_Exploration] = None) -> CheckResult:
    """With the farm channels hidden, the only visible event the system may
    ever offer is ``finished.True``."""
    ex = exploration or _explore(model, state_cap)
    for state, trans in ex.adj.items():
        for event, _ in trans:
            if event[0] not in hidden and event != FINISHED:
                return CheckResult(
                    "trace-refinement", False, ex.states,
                    ex.path_to(state) + [event],
                    detail=f"visible event {format_event(event)} outside the spec")
    return CheckResult("trace-refinement", True, ex.states)


def check_failures_refinement(model: FarmModel, hidden: frozenset = HIDDEN_CHANNELS,
                              state_cap: int = DEFAULT_STATE_CAP,
                              exploration: Optional[_Exploration] = None
                              ) -> CheckResult:
    """Every stable state (no hidden event enabled) must offer
    ``finished.True``; assumes divergence freedom has been established."""
    ex = exploration or _explore(model, state_cap)
    for state, trans in ex.adj.items():
        stable = all(event[0] not in hidden for event, _ in trans)
        if stable and not any(event == FINISHED for event, _ in trans):
            return CheckResult(
                "failures-refinement", False, ex.states, ex.path_to(state),
                detail="stable state refuses finished.True")
    return CheckResult("failures-refinement", True, ex.states)


def check_determinism(model: FarmModel, hidden: frozenset = frozenset(),
                      state_cap: int = DEFAULT_STATE_CAP,
                      exploration: Optional[_Exploration] = None) -> CheckResult:
    """Failures-level determinism by subset construction: after no trace may
    the system be able both to perform an event and, in some stable state
    reached by the same trace, to refuse it.  The contract case is the
    unhidden system (``hidden`` empty, so every state is stable)."""
    ex = exploration or _explore(model, state_cap)

    def closure(states: frozenset) -> frozenset:
        seen = set(states)
        work = list(states)
        while work:
            s = work.pop()
            for event, nxt in ex.adj[s]:
                if event[0] in hidden and nxt not in seen:
                    seen.add(nxt)
                    work.append(nxt)
        return frozenset(seen)

    init = closure(frozenset([ex.model.initial()]))
    seen_macro: dict[frozenset, Optional[tuple]] = {init: None}
    queue = deque([init])
    while queue:
        macro = queue.popleft()
        visible: dict[Event, set] = {}
        for s in macro:
            for event, nxt in ex.adj[s]:
                if event[0] not in hidden:
                    visible.setdefault(event, set()).add(nxt)
        for event, nexts in visible.items():
            refused_somewhere = False
            for s in macro:
                trans = ex.adj[s]
                stable = all(e[0] not in hidden for e, _ in trans)
                if stable and all(e != event for e, _ in trans):
                    refused_somewhere = True
                    break
            if refused_somewhere:
                trace = _macro_trace(seen_macro, macro) + [event]
                return CheckResult(
                    "deterministic", False, len(ex.adj), trace,
                    detail=f"after this trace {format_event(event)} can be "
                           "both performed and refused")
            nxt_macro = closure(frozenset(nexts))
            if nxt_macro not in seen_macro:
                seen_macro[nxt_macro] = (macro, event)
                queue.append(nxt_macro)
    return CheckResult("deterministic", True, len(ex.adj))


def _macro_trace(parents: dict, macro: frozenset) -> list[Event]:
    events: list[Event] = []
    cur = macro
    while parents[cur] is not None:
        prev, event = parents[cur]
        events.append(event)
        cur = prev
    events.reverse()
    return events


def check_all(model: FarmModel, state_cap: int = DEFAULT_STATE_CAP
              ) -> list[CheckResult]:
    """The six assertions: refinement in traces, failures and
    failures-divergences, then deadlock, divergence and determinism."""
    ex = _explore(model, state_cap)
    traces = check_trace_refinement(model, exploration=ex)
    divergence = check_divergence(model, exploration=ex)
    failures = check_failures_refinement(model, exploration=ex)
    fd = CheckResult("failures-divergences-refinement",
                     failures.passed and divergence.passed, ex.states,
                     failures.counterexample or divergence.counterexample,
                     detail=failures.detail or divergence.detail)
    deadlock = check_deadlock(model, exploration=ex)
    determinism = check_determinism(model, exploration=ex)
    return [traces, failures, fd, deadlock, divergence, determinism]


def replay(model: FarmModel, events: Iterable[Event]) -> frozenset:
    """Drive the transition function along an event list; raises ValueError if
    any event is not enabled.  Tracks the set of states the system may be in
    (same-label branches keep all successors); returns the final set."""
    states = frozenset([model.initial()])
    for i, event in enumerate(events):
        nxt = frozenset(n for s in states
                        for e, n in model.transitions(s) if e == tuple(event))
        if not nxt:
            raise ValueError(f"event {i} ({format_event(event)}) not enabled")
        states = nxt
    return states
