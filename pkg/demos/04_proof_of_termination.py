"""Proving the farm deadlock- and livelock-free by explicit-state search.

The finite model feeds five objects plus a terminator through the same
request-driven structure as the running farm.  Exhaustive exploration checks
the six assertions; injecting a fault shows what a counterexample looks like.
"""

from cspfarm.model_check import (MUTATIONS, build_system, check_all,
                                 check_deadlock, replay)

for n in (1, 2, 3):
    print(f"--- {n} node(s) ---")
    for result in check_all(build_system(n)):
        print(" ", result.line())

# now break the terminator protocol: the server hands the poison token to
# only N-1 of its clients
print("\n--- fault injection: terminator-short at N=2 ---")
print("known faults:", ", ".join(sorted(MUTATIONS)))
mutated = build_system(2, "terminator-short")
verdict = check_deadlock(mutated)
print(verdict.line())

# the counterexample replays against the transition function, step by step,
# into a state with no enabled events
final = replay(mutated, verdict.counterexample)
assert len(final) == 1 and mutated.transitions(next(iter(final))) == []
print(f"replayed {len(verdict.counterexample)} events into a stuck state: "
      f"one client never receives its terminator")
