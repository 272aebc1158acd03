"""Host plus two nodes over real TCP sockets on this machine.

Each lifecycle gets its own network instance, exactly as separate machines
would; the nodes here listen on distinct ports.  Afterwards every socket,
listener and service thread is verifiably gone.
"""

from cspfarm import TcpNetwork, build_plans, parse_spec
from cspfarm.activities import Activity, join_all
from cspfarm.deploy import run_host, run_node

spec = parse_spec("""
//@emit 127.0.0.1
source mandelbrot args [700, 200]
//@cluster 2
workers 2
//@collect
sink mandelbrot
""")
host_plan, _ = build_plans(spec, load_port=20000, app_port=21000)

host_net = TcpNetwork()
node_nets = [TcpNetwork(), TcpNetwork()]

host = Activity(run_host, host_net, host_plan, name="host")
nodes = [Activity(run_node, node_nets[i], host_plan.load_input, "127.0.0.1",
                  20001 + i, 21001 + i, name=f"node{i}")
         for i in range(2)]
join_all([host] + nodes, timeout=120)

result = host.result()
print(result.timings.to_csv())
s = result.summary
print(f"points={s.points:,} white={s.white:,} iterations={s.total_iterations:,}")

for name, net in [("host", host_net)] + [(f"node{i}", n)
                                         for i, n in enumerate(node_nets)]:
    assert net.wait_idle(5.0)
    assert all(v == 0 for v in net.open_handles().values())
print("all sockets, listeners and service threads released")
