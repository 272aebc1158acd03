"""The application process network: emit -> server -> per-node client ->
workers -> node fan-in -> host fan-in -> collect.

Work distribution is request driven.  Each node's client sends a one-slot
request to the server and receives exactly one envelope per request, so the
server can always hand work to whichever node has capacity.  Termination is
by terminator envelope: emit sends one, the server answers one request per
node with it, each client broadcasts one to each of its workers, and the
fan-in stages forward a single one downstream once all their feeders have
terminated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .netchan import TERMINATOR, Envelope, ProtocolViolation, select_read, select_write
from .workload import SinkHooks, SourceHooks, SinkFault, SourceFault, Status, WorkFault

_REQUEST = struct.Struct(">H")


def request_envelope(node_index: int) -> Envelope:
    return Envelope(body=_REQUEST.pack(node_index))


def request_index(env: Envelope) -> int:
    if env.terminator or len(env.body) != _REQUEST.size:
        raise ProtocolViolation("malformed request envelope")
    return _REQUEST.unpack(env.body)[0]


@dataclass
class FarmCounters:
    """Envelope and terminator flow observed at quiescence.

    At quiescence: emitted == collected; the server hands out one terminator
    per node; each client hands one to each of its workers; each fan-in stage
    absorbs its feeders' terminators and forwards exactly one.
    """

    emitted: int = 0
    collected: int = 0
    server_dispatched: int = 0
    server_terminators: int = 0
    host_fan_forwarded: int = 0
    host_fan_terminators_in: int = 0
    client_delivered: dict[int, int] = field(default_factory=dict)
    client_terminators: dict[int, int] = field(default_factory=dict)
    worker_processed: dict[int, list[int]] = field(default_factory=dict)
    node_fan_forwarded: dict[int, int] = field(default_factory=dict)
    node_fan_terminators_in: dict[int, int] = field(default_factory=dict)


def emit_loop(source: SourceHooks, out, workload_name: str = "") -> int:
    """Create and send instances until the source terminates; returns the
    number of non-terminator envelopes written."""
    emitted = 0
    while True:
        status, instance = source.create()
        if status is Status.TERMINATE:
            out.write(TERMINATOR)
            return emitted
        if status is not Status.CONTINUE:
            raise SourceFault(f"source create returned {status}")
        out.write(Envelope(workload_name=workload_name,
                           body=source.encode(instance)))
        emitted += 1


def server_loop(emit_in, request_in, data_outs) -> tuple[int, int]:
    """One-at-a-time service: read an envelope, read one request, answer it.
    After the source's terminator, answer one request per distinct node with
    a terminator, then return (dispatched, terminators sent)."""
    nodes = len(data_outs)
    dispatched = 0
    while True:
        env = emit_in.read()
        if env.terminator:
            break
        req = request_index(request_in.read())
        data_outs[req].write(env)
        dispatched += 1
    served: set[int] = set()
    while len(served) < nodes:
        req = request_index(request_in.read())
        if req in served:
            raise ProtocolViolation(
                f"node {req} requested again after receiving the terminator")
        data_outs[req].write(TERMINATOR)
        served.add(req)
    return dispatched, len(served)


def client_loop(node_index: int, request_out, data_in, worker_outs) -> tuple[int, int]:
    """One-place buffer: request, receive, hand to whichever worker is idle
    (lowest index on ties); a new request only goes out once the buffered
    envelope has been taken.  On the terminator, hand one to every worker."""
    delivered = 0
    while True:
        request_out.write(request_envelope(node_index))
        env = data_in.read()
        if env.terminator:
            for out in worker_outs:
                out.write(TERMINATOR)
            return delivered, len(worker_outs)
        select_write(worker_outs, env)
        delivered += 1


def worker_loop(in_end, out_end, hooks: SourceHooks) -> int:
    """Apply the workload function to each envelope; forward the terminator."""
    processed = 0
    while True:
        env = in_end.read()
        if env.terminator:
            out_end.write(TERMINATOR)
            return processed
        instance = hooks.decode(env.body)
        status = hooks.function(instance)
        if status is not Status.OK:
            raise WorkFault(f"workload function returned {status}")
        out_end.write(Envelope(workload_name=env.workload_name,
                               body=hooks.encode(instance)))
        processed += 1


def node_fan_loop(worker_ins, result_out, workers: int) -> tuple[int, int]:
    """Forward results from any ready worker; after all workers have
    terminated, send exactly one terminator downstream."""
    forwarded = 0
    terminators = 0
    while terminators < workers:
        _, env = select_read(worker_ins)
        if env.terminator:
            terminators += 1
        else:
            result_out.write(env)
            forwarded += 1
    result_out.write(TERMINATOR)
    return forwarded, terminators


def host_fan_loop(result_in, collect_out, clusters: int) -> tuple[int, int]:
    """Forward node results in arrival order; after every node has
    terminated, send exactly one terminator to the collector."""
    forwarded = 0
    terminators = 0
    while terminators < clusters:
        env = result_in.read()
        if env.terminator:
            terminators += 1
        else:
            collect_out.write(env)
            forwarded += 1
    collect_out.write(TERMINATOR)
    return forwarded, terminators


def collect_loop(in_end, sink: SinkHooks, decode) -> tuple[object, int]:
    """Run the collect hook per envelope; on the terminator, finalise and
    return (summary, collected count)."""
    collected = 0
    while True:
        env = in_end.read()
        if env.terminator:
            return sink.finalise(), collected
        status = sink.collect(decode(env.body))
        if status is not Status.OK:
            raise SinkFault(f"sink collect returned {status}")
        collected += 1
