"""Shared harness: a synthetic counting workload and a hand-wired farm."""

from __future__ import annotations

import struct
import time

from cspfarm import workload
from cspfarm.activities import Activity, join_all
from cspfarm.farm import (client_loop, collect_loop, emit_loop, host_fan_loop,
                          node_fan_loop, server_loop, worker_loop)
from cspfarm.netchan import MANY_TO_ONE, ONE_TO_ONE, LoopbackNetwork
from cspfarm.topology import ChannelAddress
from cspfarm.workload import SinkHooks, SourceHooks, Status

_UNIT = struct.Struct(">I")


def counting_source(total: int, work_delay: float = 0.0) -> SourceHooks:
    """Source of ``total`` integer units; the function hook marks its unit
    processed (optionally sleeping first, to model slow workers)."""
    state = {"cursor": 0, "total": total}

    def init(args) -> Status:
        if args:
            state["total"] = int(args[0])
        state["cursor"] = 0
        return Status.OK

    def create():
        if state["cursor"] >= state["total"]:
            return Status.TERMINATE, None
        unit = {"index": state["cursor"], "processed": False}
        state["cursor"] += 1
        return Status.CONTINUE, unit

    def function(unit) -> Status:
        if work_delay:
            time.sleep(work_delay)
        unit["processed"] = True
        return Status.OK

    def encode(unit) -> bytes:
        return _UNIT.pack(unit["index"] * 2 + (1 if unit["processed"] else 0))

    def decode(data: bytes):
        raw = _UNIT.unpack(data)[0]
        return {"index": raw >> 1, "processed": bool(raw & 1)}

    return SourceHooks(init=init, create=create, function=function,
                       encode=encode, decode=decode)


def counting_sink() -> SinkHooks:
    seen: list[int] = []

    def init() -> Status:
        return Status.OK

    def collect(unit) -> Status:
        assert unit["processed"], "unit reached the sink unprocessed"
        seen.append(unit["index"])
        return Status.OK

    def finalise():
        return sorted(seen)

    return SinkHooks(init=init, collect=collect, finalise=finalise)


def register_tally_workload() -> None:
    """A registry-backed version of the counting workload (init arg: units)."""
    if "tally" in workload.registry():
        return
    workload.register_workload(workload.WorkloadDef(
        name="tally",
        init_arity=1,
        source_roles=("set_total", "next_unit", "mark_processed"),
        sink_roles=("reset", "record", "sorted_indices"),
        make_source=lambda: counting_source(0),
        make_sink=lambda image_mode: counting_sink(),
    ))


register_tally_workload()


class ManualFarmResult:
    def __init__(self) -> None:
        self.emitted = 0
        self.collected_indices: list[int] = []
        self.server_terminators = 0
        self.client_terminators: dict[int, int] = {}
        self.worker_processed: dict[int, list[int]] = {}
        self.node_fan_terminators: dict[int, int] = {}
        self.host_fan_terminators = 0


def run_manual_farm(clusters: int, workers: int, lines: int,
                    node_delay: dict[int, float] | None = None,
                    timeout: float = 60.0) -> ManualFarmResult:
    """Wire the seven farm loops directly over one loopback network, bypassing
    the load protocol, and run to quiescence."""
    net = LoopbackNetwork()
    node_delay = node_delay or {}

    def addr(port, channel):
        return ChannelAddress("127.0.0.1", port, channel)

    emit_in = net.create_input_end(addr(10, 1), ONE_TO_ONE)
    collect_in = net.create_input_end(addr(10, 2), ONE_TO_ONE)
    request_in = net.create_input_end(addr(11, 1), MANY_TO_ONE)
    result_in = net.create_input_end(addr(11, 2), MANY_TO_ONE)
    emit_out = net.connect_output_end(addr(10, 1))
    collect_out = net.connect_output_end(addr(10, 2))

    data_ins, data_outs = [], []
    feeds, backs = [], []
    for i in range(clusters):
        data_ins.append(net.create_input_end(addr(20 + i, 1), ONE_TO_ONE))
        data_outs.append(net.connect_output_end(addr(20 + i, 1)))
        f_ins, f_outs, b_ins, b_outs = [], [], [], []
        for w in range(workers):
            f_ins.append(net.create_input_end(addr(100 + i, w + 1), ONE_TO_ONE))
            b_ins.append(net.create_input_end(addr(200 + i, w + 1), ONE_TO_ONE))
            f_outs.append(net.connect_output_end(addr(100 + i, w + 1)))
            b_outs.append(net.connect_output_end(addr(200 + i, w + 1)))
        feeds.append((f_ins, f_outs))
        backs.append((b_ins, b_outs))

    source = counting_source(lines)
    source.init([lines])
    sink = counting_sink()
    sink.init()

    acts = [
        Activity(emit_loop, source, emit_out, "tally", name="emit"),
        Activity(server_loop, emit_in, request_in, data_outs, name="server"),
        Activity(host_fan_loop, result_in, collect_out, clusters, name="host_fan"),
        Activity(collect_loop, collect_in, sink, source.decode, name="collect"),
    ]
    node_acts = {}
    for i in range(clusters):
        hooks = counting_source(lines, work_delay=node_delay.get(i, 0.0))
        f_ins, f_outs = feeds[i]
        b_ins, b_outs = backs[i]
        request_out = net.connect_output_end(addr(11, 1))
        client = Activity(client_loop, i, request_out, data_ins[i], f_outs,
                          name=f"client{i}")
        workers_acts = [Activity(worker_loop, f_ins[w], b_outs[w], hooks,
                                 name=f"worker{i}.{w}") for w in range(workers)]
        result_out = net.connect_output_end(addr(11, 2))
        fan = Activity(node_fan_loop, b_ins, result_out, workers, name=f"fan{i}")
        node_acts[i] = (client, workers_acts, fan)
        acts += [client] + workers_acts + [fan]

    join_all(acts, timeout=timeout)

    res = ManualFarmResult()
    res.emitted = acts[0].result()
    _, res.server_terminators = acts[1].result()
    _, res.host_fan_terminators = acts[2].result()
    indices, _ = acts[3].result()
    res.collected_indices = indices
    for i, (client, workers_acts, fan) in node_acts.items():
        _, res.client_terminators[i] = client.result()
        res.worker_processed[i] = [w.result() for w in workers_acts]
        _, res.node_fan_terminators[i] = fan.result()
    return res
