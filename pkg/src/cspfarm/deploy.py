"""Two-phase load protocol and the host/node lifecycles built on it.

Load phase, in order: nodes create their private load input end, register
with the host (one REGISTER frame each, payload ``ip:loadport:appport``),
receive their completed plan, create their application input ends, report
CHANNELS_READY, and wait for START.  The host connects an output end only to
input ends that provably exist at that point in the protocol, so the
input-before-output rule holds without races.  After the run, each node
reports DONE followed by one TIMING frame (two u64 big-endian millisecond
counts, load then run); the host merges them with its own row.

Phase timing convention: load time runs from process start to receipt (or
dispatch) of START, run time from START to local farm termination.
Sub-millisecond phases round up to 1 ms.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, replace
from functools import partial
from typing import Optional

from . import netchan
from .activities import Activity, join_all
from .farm import (FarmCounters, client_loop, collect_loop, emit_loop,
                   host_fan_loop, node_fan_loop, server_loop, worker_loop)
from .netchan import (MANY_TO_ONE, ONE_TO_ONE, AllWritersClosed, Frame,
                      LoopbackNetwork, PeerClosed, ProtocolViolation)
from .topology import (LOAD_CHANNEL, ChannelAddress, HostPlan, NodePlan,
                       build_plans, node_plan_from_manifest,
                       node_plan_to_manifest)
from .workload import SinkFault, SourceFault, Status, get_workload

PHASE_CHANNELS_READY = b"CHANNELS_READY"
PHASE_START = b"START"
PHASE_DONE = b"DONE"

_TIMING = struct.Struct(">QQ")


class DuplicateNode(ProtocolViolation):
    """Two registrations claimed the same (ip, load port)."""


@dataclass(frozen=True)
class NodeRegistration:
    assigned_index: int       # order of arrival
    node_ip: str
    load_port: int
    app_port: int
    writer_id: int            # load-network connection, used for attribution


@dataclass(frozen=True)
class TimingRow:
    origin: str               # "host" or the node index as a string
    load_ms: int
    run_ms: int


@dataclass
class TimingReport:
    rows: list[TimingRow]

    def to_csv(self) -> str:
        lines = ["origin,load_ms,run_ms"]
        lines += [f"{r.origin},{r.load_ms},{r.run_ms}" for r in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class NodeResult:
    node_index: int
    load_ms: int
    run_ms: int
    delivered: int
    client_terminators: int
    worker_processed: list[int]
    fan_forwarded: int
    fan_terminators_in: int


@dataclass
class HostResult:
    timings: TimingReport
    summary: object
    counters: FarmCounters


def _ms_since(t0: float) -> int:
    return max(1, math.ceil((time.monotonic() - t0) * 1000.0))


def format_registration(ip: str, load_port: int, app_port: int) -> bytes:
    return f"{ip}:{load_port}:{app_port}".encode("utf-8")


def parse_registration(payload: bytes) -> tuple[str, int, int]:
    try:
        ip, load_port, app_port = payload.decode("utf-8").split(":")
        return ip, int(load_port), int(app_port)
    except (UnicodeDecodeError, ValueError):
        raise ProtocolViolation(f"malformed registration payload {payload!r}")


# ---------------------------------------------------------------------------
# Host side

def host_registration(load_in, expected: int,
                      timeout: Optional[float] = None) -> list[NodeRegistration]:
    """Collect exactly ``expected`` registrations, indexed by arrival order."""
    regs: list[NodeRegistration] = []
    seen: set[tuple[str, int]] = set()
    while len(regs) < expected:
        frame, wid = load_in.read_frame(auto_ack=False, timeout=timeout)
        if frame.kind != netchan.REGISTER:
            load_in.reject_writer(wid)
            raise ProtocolViolation(
                f"expected REGISTER during registration, got kind {frame.kind:#04x}")
        ip, load_port, app_port = parse_registration(frame.payload)
        if (ip, load_port) in seen:
            load_in.reject_writer(wid)
            raise DuplicateNode(f"{ip}:{load_port} registered twice")
        seen.add((ip, load_port))
        regs.append(NodeRegistration(len(regs), ip, load_port, app_port, wid))
        load_in.ack_writer(wid)
    return regs


def distribute_plans(load_outs, plans: list[NodePlan]) -> None:
    """Send each node its completed plan as a PLAN frame."""
    for i, (out, plan) in enumerate(zip(load_outs, plans)):
        manifest = node_plan_to_manifest(plan).encode("utf-8")
        try:
            out.write_frame(Frame(netchan.PLAN, out.address.channel, manifest))
        except PeerClosed as exc:
            raise PeerClosed(f"node {i} closed before receiving its plan") from exc


def await_channels_ready(load_in, registrations: list[NodeRegistration]) -> None:
    """Block until every node has reported CHANNELS_READY.  Late REGISTER
    frames are answered with an error ack and their connection dropped."""
    by_wid = {r.writer_id: r.assigned_index for r in registrations}
    ready: set[int] = set()
    while len(ready) < len(registrations):
        frame, wid = load_in.read_frame(auto_ack=False)
        if frame.kind == netchan.REGISTER:
            load_in.reject_writer(wid)
            continue
        if frame.kind != netchan.SYNC or frame.payload != PHASE_CHANNELS_READY:
            raise ProtocolViolation(
                f"expected CHANNELS_READY sync, got kind {frame.kind:#04x} "
                f"payload {frame.payload!r}")
        idx = by_wid.get(wid)
        if idx is None or idx in ready:
            raise ProtocolViolation(f"unexpected CHANNELS_READY from writer {wid}")
        ready.add(idx)
        load_in.ack_writer(wid)


def send_start(load_outs) -> None:
    for out in load_outs:
        out.write_frame(Frame(netchan.SYNC, out.address.channel, PHASE_START))


def gather_timings(load_in, registrations: list[NodeRegistration],
                   host_load_ms: int, host_run_ms: int) -> TimingReport:
    """Read one DONE sync plus one TIMING frame per node; rows are the host
    row followed by the node rows in index order."""
    by_wid = {r.writer_id: r.assigned_index for r in registrations}
    done: set[int] = set()
    times: dict[int, tuple[int, int]] = {}
    while len(times) < len(registrations):
        try:
            frame, wid = load_in.read_frame(auto_ack=False)
        except AllWritersClosed as exc:
            missing = sorted(set(by_wid.values()) - set(times))
            raise PeerClosed(f"nodes {missing} closed before reporting timings") from exc
        if frame.kind == netchan.REGISTER:
            load_in.reject_writer(wid)
            continue
        idx = by_wid.get(wid)
        if idx is None:
            raise ProtocolViolation(f"frame from unregistered writer {wid}")
        if frame.kind == netchan.SYNC and frame.payload == PHASE_DONE:
            if idx in done:
                raise ProtocolViolation(f"node {idx} reported DONE twice")
            done.add(idx)
            load_in.ack_writer(wid)
        elif frame.kind == netchan.TIMING:
            if idx not in done:
                raise ProtocolViolation(f"node {idx} sent TIMING before DONE")
            if idx in times:
                raise ProtocolViolation(f"node {idx} sent TIMING twice")
            if len(frame.payload) != _TIMING.size:
                raise ProtocolViolation(
                    f"TIMING payload must be {_TIMING.size} bytes, "
                    f"got {len(frame.payload)}")
            times[idx] = _TIMING.unpack(frame.payload)
            load_in.ack_writer(wid)
        else:
            raise ProtocolViolation(
                f"unexpected frame kind {frame.kind:#04x} during timing gather")
    rows = [TimingRow("host", host_load_ms, host_run_ms)]
    rows += [TimingRow(str(i), *times[i]) for i in sorted(times)]
    return TimingReport(rows)


def _node_templates(plan: HostPlan) -> list[NodePlan]:
    template = NodePlan(
        host_load=plan.load_input,
        host_request=plan.request_input,
        host_result=plan.result_input,
        workers=plan.workers_per_node,
        workload_name=plan.source_workload,
        init_args=list(plan.source_init_args),
    )
    return [replace(template, init_args=list(template.init_args))
            for _ in range(plan.node_count)]


def run_host(network, plan: HostPlan, *, image_mode: bool = False,
             timeout: Optional[float] = None,
             retry_window: float = 10.0) -> HostResult:
    """The complete host lifecycle: load protocol, application run, gather."""
    t0 = time.monotonic()
    ends: list = []
    internal = LoopbackNetwork()

    def close_all():
        for end in ends:
            try:
                end.close()
            except Exception:
                pass

    load_in = network.create_input_end(plan.load_input, MANY_TO_ONE)
    ends.append(load_in)
    try:
        regs = host_registration(load_in, plan.node_count, timeout)
        completed = [t.completed(r.assigned_index, r.node_ip, r.app_port)
                     for t, r in zip(_node_templates(plan), regs)]
        load_outs = []
        for r in regs:
            out = network.connect_output_end(
                ChannelAddress(r.node_ip, r.load_port, LOAD_CHANNEL), retry_window)
            ends.append(out)
            load_outs.append(out)
        distribute_plans(load_outs, completed)

        request_in = network.create_input_end(plan.request_input, MANY_TO_ONE)
        ends.append(request_in)
        result_in = network.create_input_end(plan.result_input, MANY_TO_ONE)
        ends.append(result_in)

        await_channels_ready(load_in, regs)
        data_outs = []
        for node_plan in completed:
            out = network.connect_output_end(node_plan.own_data_input, retry_window)
            ends.append(out)
            data_outs.append(out)
        send_start(load_outs)
        load_ms = _ms_since(t0)

        t1 = time.monotonic()
        source = get_workload(plan.source_workload).make_source()
        if source.init(plan.source_init_args) is Status.FAULT:
            raise SourceFault(f"{plan.source_workload} init signalled a fault")
        sink = get_workload(plan.sink_workload).make_sink(image_mode)
        if sink.init() is Status.FAULT:
            raise SinkFault(f"{plan.sink_workload} init signalled a fault")

        emit_addr = ChannelAddress("127.0.0.1", 1, 1)
        collect_addr = ChannelAddress("127.0.0.1", 1, 2)
        emit_in = internal.create_input_end(emit_addr, ONE_TO_ONE)
        collect_in = internal.create_input_end(collect_addr, ONE_TO_ONE)
        emit_out = internal.connect_output_end(emit_addr)
        collect_out = internal.connect_output_end(collect_addr)
        ends += [emit_in, collect_in, emit_out, collect_out]

        acts = [
            Activity(emit_loop, source, emit_out, plan.source_workload,
                     name="emit"),
            Activity(server_loop, emit_in, request_in, data_outs, name="server"),
            Activity(host_fan_loop, result_in, collect_out, plan.node_count,
                     name="host_fan"),
            Activity(collect_loop, collect_in, sink, source.decode, name="collect"),
        ]
        join_all(acts, abort=close_all)
        emitted = acts[0].result()
        dispatched, server_terms = acts[1].result()
        fan_forwarded, fan_terms = acts[2].result()
        summary, collected = acts[3].result()
        run_ms = _ms_since(t1)

        report = gather_timings(load_in, regs, load_ms, run_ms)
        counters = FarmCounters(
            emitted=emitted, collected=collected,
            server_dispatched=dispatched, server_terminators=server_terms,
            host_fan_forwarded=fan_forwarded, host_fan_terminators_in=fan_terms,
        )
        return HostResult(report, summary, counters)
    finally:
        close_all()


# ---------------------------------------------------------------------------
# Node side

def node_register(network, host_load: ChannelAddress, own_ip: str,
                  own_load_port: int, own_app_port: int,
                  retry_window: float = 10.0):
    """Create the node's load input end, then register with the host.  The
    input end exists before the REGISTER frame is sent; if creating it fails,
    no REGISTER goes out."""
    load_in = network.create_input_end(
        ChannelAddress(own_ip, own_load_port, LOAD_CHANNEL), ONE_TO_ONE)
    try:
        host_out = network.connect_output_end(host_load, retry_window)
        host_out.write_frame(Frame(netchan.REGISTER, host_load.channel,
                                   format_registration(own_ip, own_load_port,
                                                       own_app_port)))
    except Exception:
        load_in.close()
        raise
    return load_in, host_out


def run_node(network, host_load: ChannelAddress, own_ip: str,
             own_load_port: int, own_app_port: int, *,
             retry_window: float = 10.0) -> NodeResult:
    """The complete node lifecycle: register, receive plan, set up channels,
    run the farm processes, report timings."""
    t0 = time.monotonic()
    ends: list = []
    internal = LoopbackNetwork()

    def close_all():
        for end in ends:
            try:
                end.close()
            except Exception:
                pass

    load_in, host_out = node_register(network, host_load, own_ip,
                                      own_load_port, own_app_port, retry_window)
    ends += [load_in, host_out]
    try:
        frame, _ = load_in.read_frame()
        if frame.kind != netchan.PLAN:
            raise ProtocolViolation(
                f"expected PLAN after registration, got kind {frame.kind:#04x}")
        plan = node_plan_from_manifest(frame.payload.decode("utf-8"))
        if plan.node_index is None or plan.own_data_input is None:
            raise ProtocolViolation("received an incomplete node plan")

        data_in = network.create_input_end(plan.own_data_input, ONE_TO_ONE)
        ends.append(data_in)
        host_out.write_frame(Frame(netchan.SYNC, host_load.channel,
                                   PHASE_CHANNELS_READY))
        frame, _ = load_in.read_frame()
        if frame.kind != netchan.SYNC or frame.payload != PHASE_START:
            raise ProtocolViolation(
                f"expected START sync, got kind {frame.kind:#04x} "
                f"payload {frame.payload!r}")
        load_ms = _ms_since(t0)

        t1 = time.monotonic()
        hooks = get_workload(plan.workload_name).make_source()
        if hooks.init(plan.init_args) is Status.FAULT:
            raise SourceFault(f"{plan.workload_name} init signalled a fault")

        request_out = network.connect_output_end(plan.host_request, retry_window)
        ends.append(request_out)
        result_out = network.connect_output_end(plan.host_result, retry_window)
        ends.append(result_out)

        feed_ins, feed_outs, back_ins, back_outs = [], [], [], []
        for w in range(plan.workers):
            feed_addr = ChannelAddress("127.0.0.1", 1, w + 1)
            back_addr = ChannelAddress("127.0.0.1", 2, w + 1)
            feed_ins.append(internal.create_input_end(feed_addr, ONE_TO_ONE))
            back_ins.append(internal.create_input_end(back_addr, ONE_TO_ONE))
            feed_outs.append(internal.connect_output_end(feed_addr))
            back_outs.append(internal.connect_output_end(back_addr))
        ends += feed_ins + back_ins + feed_outs + back_outs

        acts = [Activity(client_loop, plan.node_index, request_out, data_in,
                         feed_outs, name=f"client{plan.node_index}")]
        acts += [Activity(worker_loop, feed_ins[w], back_outs[w], hooks,
                          name=f"worker{plan.node_index}.{w}")
                 for w in range(plan.workers)]
        acts.append(Activity(node_fan_loop, back_ins, result_out, plan.workers,
                             name=f"node_fan{plan.node_index}"))
        join_all(acts, abort=close_all)
        delivered, client_terms = acts[0].result()
        processed = [acts[1 + w].result() for w in range(plan.workers)]
        fan_forwarded, fan_terms = acts[-1].result()
        run_ms = _ms_since(t1)

        host_out.write_frame(Frame(netchan.SYNC, host_load.channel, PHASE_DONE))
        host_out.write_frame(Frame(netchan.TIMING, host_load.channel,
                                   _TIMING.pack(load_ms, run_ms)))
        return NodeResult(node_index=plan.node_index, load_ms=load_ms,
                          run_ms=run_ms, delivered=delivered,
                          client_terminators=client_terms,
                          worker_processed=processed,
                          fan_forwarded=fan_forwarded,
                          fan_terminators_in=fan_terms)
    finally:
        close_all()


# ---------------------------------------------------------------------------
# Single-process cluster over the loopback transport

@dataclass
class LocalResult:
    timings: TimingReport
    summary: object
    counters: FarmCounters
    nodes: list[NodeResult]


def local_run(spec, *, load_port: int = 2000, app_port: int = 3000,
              image_mode: bool = False, network=None,
              timeout: Optional[float] = None) -> LocalResult:
    """Run host plus all nodes in one process over the loopback transport,
    full load protocol included."""
    net = network if network is not None else LoopbackNetwork()
    local_spec = replace(spec, host_ip="127.0.0.1")
    host_plan, _ = build_plans(local_spec, load_port, app_port)

    host_act = Activity(partial(run_host, net, host_plan, image_mode=image_mode),
                        name="host")
    node_acts = [
        Activity(run_node, net, host_plan.load_input, "127.0.0.1",
                 load_port + 1 + i, app_port + 1 + i, name=f"node{i}")
        for i in range(spec.clusters)
    ]
    join_all([host_act] + node_acts, timeout=timeout)
    host_result: HostResult = host_act.result()
    nodes = sorted((a.result() for a in node_acts), key=lambda r: r.node_index)

    counters = host_result.counters
    for r in nodes:
        counters.client_delivered[r.node_index] = r.delivered
        counters.client_terminators[r.node_index] = r.client_terminators
        counters.worker_processed[r.node_index] = r.worker_processed
        counters.node_fan_forwarded[r.node_index] = r.fan_forwarded
        counters.node_fan_terminators_in[r.node_index] = r.fan_terminators_in
    return LocalResult(host_result.timings, host_result.summary, counters, nodes)
