"""A whole cluster in one process: full load protocol over loopback.

Host and nodes run the same lifecycles they would run across machines:
registration, plan distribution, the channel-setup barrier, the run itself,
and per-node timing rows gathered back at the host.
"""

from cspfarm import local_run, parse_spec

spec = parse_spec("""
//@emit 127.0.0.1
source mandelbrot args [1400, 250]
//@cluster 2
workers 2
//@collect
sink mandelbrot
""")

result = local_run(spec)

print(result.timings.to_csv())
s = result.summary
print(f"points={s.points:,} white={s.white:,} black={s.black:,} "
      f"iterations={s.total_iterations:,}")

# the terminator flows once from emit, once per node out of the server,
# once per worker out of each client, and collapses back to a single one
c = result.counters
print(f"\nemitted {c.emitted} lines, collected {c.collected}")
print(f"server sent {c.server_terminators} terminators (one per node)")
print(f"clients sent {dict(c.client_terminators)} (one per worker)")
print(f"per-node lines processed: "
      f"{ {i: sum(v) for i, v in c.worker_processed.items()} }")
