"""The topology language: from an annotated spec to deployable plans.

A cluster application is described in a small line-oriented file: constants,
the host address, the source binding, the cluster size, workers per node,
and the sink binding.  Building it yields two plan manifests: one for the
host, one generic node plan that any node can execute.
"""

from cspfarm import build_plans, parse_spec, render_spec, validate_spec, registry
from cspfarm.topology import host_plan_to_manifest, node_plan_to_manifest

text = """
const clusters = 2
const cores = 4
const maxIterations = 1000
const width = 5600

//@emit 192.168.1.176
source mandelbrot args [width, maxIterations]

//@cluster clusters
workers cores

//@collect
sink mandelbrot
"""

spec = validate_spec(parse_spec(text), registry())
print(f"host {spec.host_ip}, {spec.clusters} nodes x {spec.workers_per_node} workers,"
      f" workload {spec.source.workload_name}{list(spec.source.init_args)}")

# the canonical rendering reparses to the same spec
assert parse_spec(render_spec(spec)) == spec

host_plan, node_templates = build_plans(spec, load_port=2000, app_port=3000)
print("\n--- host plan ---")
print(host_plan_to_manifest(host_plan))
print("--- node plan template (application independent) ---")
print(node_plan_to_manifest(node_templates[0]))

# once node 0 registers from 192.168.1.20, its template is completed:
completed = node_templates[0].completed(0, "192.168.1.20", 3000)
print("--- node 0, completed after registration ---")
print(node_plan_to_manifest(completed))
