"""Command line entry points.

    csp-farm build <spec.cgpp> [-o DIR] [--load-port P] [--app-port P]
    csp-farm host <host.plan> [--timeout S] [--image OUT.pgm]
    csp-farm node <host-ip[:load-port]> [--load-port P] [--app-port P]
    csp-farm local <spec.cgpp> [--clusters N] [--workers W] [--width W]
                   [--escape E] [--runs K] [--image OUT.pgm]
    csp-farm check --clusters N [--mutate FAULT] [--state-cap M]
    csp-farm render <spec.cgpp> --out OUT.pgm [overrides...]

Exit codes: 0 success, 2 spec error, 3 protocol error, 4 workload fault,
5 check failure.

For ``node``, ``--load-port``/``--app-port`` are the node's own listening
ports (defaults 2000/3000); the positional argument carries the host's
address, with the host load port after a colon when it is not 2000.

Plan manifests are one ``key: value`` per line.  Host plans carry ``plan``,
``load_input``, ``request_input``, ``result_input`` (as ``ip:port/channel``
addresses), ``nodes``, ``workers``, ``source``, ``source_args`` and
``sink``; node plans carry ``plan``, ``host_load``, ``host_request``,
``host_result``, ``workers``, ``workload``, ``init_args`` and, once
completed at load time, ``node_index`` and ``data_input``.
"""

from __future__ import annotations

import argparse
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from . import deploy, dsl, mandelbrot, model_check, netchan, topology, workload

EXIT_SPEC = 2
EXIT_PROTOCOL = 3
EXIT_WORKLOAD = 4
EXIT_CHECK = 5


def _load_spec(path: str) -> dsl.NetworkSpec:
    text = Path(path).read_text(encoding="utf-8")
    spec = dsl.parse_spec(text)
    return dsl.validate_spec(spec, workload.registry())


def _apply_overrides(spec: dsl.NetworkSpec, args) -> dsl.NetworkSpec:
    if getattr(args, "clusters", None):
        spec = replace(spec, clusters=args.clusters)
    if getattr(args, "workers", None):
        spec = replace(spec, workers_per_node=args.workers)
    init_args = list(spec.source.init_args)
    if getattr(args, "width", None):
        init_args[0] = args.width
    if getattr(args, "escape", None):
        init_args[1] = args.escape
    if tuple(init_args) != spec.source.init_args:
        spec = replace(spec, source=replace(spec.source, init_args=tuple(init_args)))
    return spec


def cmd_build(args) -> int:
    spec = _load_spec(args.spec)
    host_plan, node_plans = topology.build_plans(spec, args.load_port, args.app_port)
    stem = Path(args.spec).stem
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    host_path = outdir / f"{stem}.host.plan"
    node_path = outdir / f"{stem}.node.plan"
    host_path.write_text(topology.host_plan_to_manifest(host_plan), encoding="utf-8")
    node_path.write_text(topology.node_plan_to_manifest(node_plans[0]),
                         encoding="utf-8")
    print(f"wrote {host_path}")
    print(f"wrote {node_path}")
    return 0


def cmd_host(args) -> int:
    plan = topology.host_plan_from_manifest(
        Path(args.plan).read_text(encoding="utf-8"))
    net = netchan.TcpNetwork()
    result = deploy.run_host(net, plan, image_mode=args.image is not None,
                             timeout=args.timeout)
    _report(result.summary, result.timings)
    if args.image is not None:
        mandelbrot.write_pgm(result.summary, args.image)
        print(f"wrote {args.image}")
    net.wait_idle()
    return 0


def cmd_node(args) -> int:
    host_ip, _, port_text = args.host.partition(":")
    host_load_port = int(port_text) if port_text else topology.DEFAULT_LOAD_PORT
    host_addr = topology.ChannelAddress(host_ip, host_load_port,
                                        topology.LOAD_CHANNEL)
    net = netchan.TcpNetwork()
    own_ip = args.bind or _own_ip(host_ip)
    result = deploy.run_node(net, host_addr, own_ip, args.load_port, args.app_port)
    print(f"node {result.node_index}: load {result.load_ms} ms, "
          f"run {result.run_ms} ms, {result.delivered} units")
    net.wait_idle()
    return 0


def _own_ip(host_ip: str) -> str:
    if host_ip.startswith("127."):
        return "127.0.0.1"
    import socket
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        s.connect((host_ip, 9))       # no traffic; just picks the local address
        return s.getsockname()[0]
    finally:
        s.close()


def cmd_local(args) -> int:
    spec = _apply_overrides(_load_spec(args.spec), args)
    image_mode = args.image is not None
    run_times = []
    result = None
    for _ in range(max(1, args.runs)):
        result = deploy.local_run(spec, load_port=args.load_port,
                                  app_port=args.app_port, image_mode=image_mode)
        run_times.append(result.timings.rows[0].run_ms)
    _report(result.summary, result.timings)
    if args.runs > 1:
        mean = statistics.mean(run_times)
        sd = statistics.stdev(run_times)
        print(f"run_ms over {args.runs} runs: mean {mean:.1f}, stdev {sd:.1f}")
    if image_mode:
        mandelbrot.write_pgm(result.summary, args.image)
        print(f"wrote {args.image}")
    return 0


def cmd_check(args) -> int:
    model = model_check.build_system(args.clusters, args.mutate)
    results = model_check.check_all(model, state_cap=args.state_cap)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else EXIT_CHECK


def cmd_render(args) -> int:
    spec = _apply_overrides(_load_spec(args.spec), args)
    result = deploy.local_run(spec, load_port=args.load_port,
                              app_port=args.app_port, image_mode=True)
    mandelbrot.write_pgm(result.summary, args.out)
    _report(result.summary, result.timings)
    print(f"wrote {args.out}")
    return 0


def _report(summary, timings: deploy.TimingReport) -> None:
    print(timings.to_csv(), end="")
    if isinstance(summary, mandelbrot.MandelSummary):
        print(f"points={summary.points} white={summary.white} "
              f"black={summary.black} iterations={summary.total_iterations}")
    else:
        print(f"summary: {summary}")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csp-farm", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add_ports(sp):
        sp.add_argument("--load-port", type=int, default=topology.DEFAULT_LOAD_PORT)
        sp.add_argument("--app-port", type=int, default=topology.DEFAULT_APP_PORT)

    b = sub.add_parser("build", help="compile a spec into plan manifests")
    b.add_argument("spec")
    b.add_argument("-o", "--outdir", default=".")
    add_ports(b)
    b.set_defaults(fn=cmd_build)

    h = sub.add_parser("host", help="run the host lifecycle from a plan")
    h.add_argument("plan")
    h.add_argument("--timeout", type=float, default=None,
                   help="registration timeout in seconds (default: wait forever)")
    h.add_argument("--image", default=None, help="write the result image (PGM)")
    h.set_defaults(fn=cmd_host)

    n = sub.add_parser("node", help="run one node against a host")
    n.add_argument("host", help="host ip, optionally ip:load-port")
    n.add_argument("--bind", default=None,
                   help="this node's own address (default: auto-detect)")
    add_ports(n)
    n.set_defaults(fn=cmd_node)

    l = sub.add_parser("local", help="run host plus all nodes in this process")
    l.add_argument("spec")
    l.add_argument("--clusters", type=int, default=None)
    l.add_argument("--workers", type=int, default=None)
    l.add_argument("--width", type=int, default=None)
    l.add_argument("--escape", type=int, default=None)
    l.add_argument("--runs", type=int, default=1)
    l.add_argument("--image", default=None)
    add_ports(l)
    l.set_defaults(fn=cmd_local)

    c = sub.add_parser("check", help="model-check the farm process model")
    c.add_argument("--clusters", type=int, required=True)
    c.add_argument("--mutate", default=None,
                   help=f"inject a fault: {', '.join(sorted(model_check.MUTATIONS))}")
    c.add_argument("--state-cap", type=int, default=model_check.DEFAULT_STATE_CAP)
    c.set_defaults(fn=cmd_check)

    r = sub.add_parser("render", help="run locally in image mode and write a PGM")
    r.add_argument("spec")
    r.add_argument("--out", required=True)
    r.add_argument("--clusters", type=int, default=None)
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--width", type=int, default=None)
    r.add_argument("--escape", type=int, default=None)
    add_ports(r)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except OSError as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except dsl.SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except topology.TopologyError as exc:
        print(f"plan error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except model_check.BadMutation as exc:
        print(f"check error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except workload.WorkloadFault as exc:
        print(f"workload fault: {exc}", file=sys.stderr)
        return EXIT_WORKLOAD
    except netchan.ChannelError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
