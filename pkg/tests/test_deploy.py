"""Load protocol: registration, plan distribution, barrier, timing gather."""

from __future__ import annotations

import struct
import time

import pytest

from cspfarm import netchan
from cspfarm.activities import Activity
from cspfarm.deploy import (PHASE_CHANNELS_READY, PHASE_DONE, PHASE_START,
                            DuplicateNode, NodeRegistration, TimingReport,
                            TimingRow, format_registration, gather_timings,
                            host_registration, local_run, node_register,
                            run_host, run_node)
from cspfarm.dsl import parse_spec
from cspfarm.netchan import (MANY_TO_ONE, AckRejected, EventLog, Frame,
                             LoopbackNetwork, PeerClosed, ProtocolViolation,
                             ReadTimeout)
from cspfarm.topology import ChannelAddress, build_plans

SPEC = parse_spec("""
//@emit 127.0.0.1
source tally args [12]
//@cluster 2
workers 2
//@collect
sink tally
""")


def load_addr(port):
    return ChannelAddress("127.0.0.1", port, 1)


def register_from(net, host_port, own_port, app_port=9000):
    _, out = node_register(net, load_addr(host_port), "127.0.0.1", own_port,
                           app_port)
    return out


# ---------------------------------------------------------------------------
# Registration

def test_registration_indexed_by_arrival_order():
    net = LoopbackNetwork()
    load_in = net.create_input_end(load_addr(300), MANY_TO_ONE)
    Activity(register_from, net, 300, 301, name="n20")
    time.sleep(0.05)
    Activity(register_from, net, 300, 302, name="n21")
    regs = host_registration(load_in, 2)
    assert [(r.assigned_index, r.load_port) for r in regs] == [(0, 301), (1, 302)]
    load_in.close()


def test_single_registration():
    net = LoopbackNetwork()
    load_in = net.create_input_end(load_addr(310), MANY_TO_ONE)
    Activity(register_from, net, 310, 311, name="n")
    regs = host_registration(load_in, 1)
    assert len(regs) == 1 and regs[0].assigned_index == 0
    load_in.close()


def test_duplicate_node_rejected():
    # the same claimed ip:load-port arriving over two distinct connections
    net = LoopbackNetwork()
    load_in = net.create_input_end(load_addr(330), MANY_TO_ONE)

    def raw_register(name):
        out = net.connect_output_end(load_addr(330))
        out.write_frame(Frame(netchan.REGISTER, 1,
                              format_registration("10.0.0.9", 2000, 3000)))

    Activity(raw_register, "a", name="a")
    time.sleep(0.05)
    second = Activity(raw_register, "b", name="b")
    with pytest.raises(DuplicateNode):
        host_registration(load_in, 2)
    with pytest.raises(AckRejected):
        second.join(5.0)
    load_in.close()


def test_node_load_input_exists_before_register_sent():
    log = EventLog()
    net = LoopbackNetwork(event_log=log)
    load_in = net.create_input_end(load_addr(340), MANY_TO_ONE)
    reg = Activity(register_from, net, 340, 341, name="n")
    host_registration(load_in, 1)
    reg.join(5.0)
    kinds = [(k, d) for _, k, d in log.events()]
    created = next(i for i, (k, d) in enumerate(kinds)
                   if k == "input_created" and d[0].port == 341)
    sent = next(i for i, (k, d) in enumerate(kinds)
                if k == "sent" and d[0].port == 340)
    assert created < sent
    load_in.close()


def test_registration_timeout():
    net = LoopbackNetwork()
    load_in = net.create_input_end(load_addr(350), MANY_TO_ONE)
    with pytest.raises(ReadTimeout):
        host_registration(load_in, 1, timeout=0.1)
    load_in.close()


def test_busy_load_port_stops_registration_before_it_starts():
    # if the node cannot create its own load input, no REGISTER goes out
    net = LoopbackNetwork()
    host_in = net.create_input_end(load_addr(355), MANY_TO_ONE)
    squatter = net.create_input_end(load_addr(356), MANY_TO_ONE)
    with pytest.raises(netchan.AddressInUse):
        node_register(net, load_addr(355), "127.0.0.1", 356, 357)
    with pytest.raises(ReadTimeout):
        host_in.read_frame(timeout=0.2)   # nothing was sent
    squatter.close()
    host_in.close()


def test_extra_registration_rejected_with_error_ack():
    # an (N+1)th REGISTER arriving during a later phase is answered with an
    # error ack and its connection closed; the protocol continues
    import threading

    from cspfarm.deploy import await_channels_ready

    net = LoopbackNetwork()
    load_in = net.create_input_end(load_addr(360), MANY_TO_ONE)
    proceed = threading.Event()

    def full_node():
        # registers, then reports CHANNELS_READY on the same connection
        _, out = node_register(net, load_addr(360), "127.0.0.1", 361, 362)
        assert proceed.wait(5.0)
        out.write_frame(Frame(netchan.SYNC, 1, PHASE_CHANNELS_READY))

    n0 = Activity(full_node, name="n0")
    regs = host_registration(load_in, 1)
    late = Activity(register_from, net, 360, 363, name="late")
    deadline = time.monotonic() + 5.0
    while time.monotonic() < deadline:  # wait for the late REGISTER to queue
        with net._cond:
            if load_in._impl.queue:
                break
        time.sleep(0.005)
    proceed.set()
    await_channels_ready(load_in, regs)
    with pytest.raises(AckRejected):
        late.join(5.0)
    n0.join(5.0)
    load_in.close()


# ---------------------------------------------------------------------------
# Full lifecycles over loopback

def run_cluster(spec, net=None, image_mode=False):
    return local_run(spec, load_port=400, app_port=500, network=net,
                     image_mode=image_mode)


def test_local_cluster_runs_to_completion():
    res = run_cluster(SPEC)
    assert res.summary == list(range(12))
    assert res.counters.emitted == res.counters.collected == 12


def test_timing_report_has_node_count_plus_one_rows():
    res = run_cluster(SPEC)
    rows = res.timings.rows
    assert len(rows) == 3
    assert [r.origin for r in rows] == ["host", "0", "1"]
    assert all(r.load_ms >= 1 and r.run_ms >= 1 for r in rows)


def test_timing_csv_shape():
    report = TimingReport([TimingRow("host", 10, 8200), TimingRow("0", 120, 8000),
                           TimingRow("1", 130, 8100)])
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "origin,load_ms,run_ms"
    assert lines[1:] == ["host,10,8200", "0,120,8000", "1,130,8100"]


def test_single_node_cluster():
    spec = parse_spec("""
//@emit 127.0.0.1
source tally args [5]
//@cluster 1
workers 1
//@collect
sink tally
""")
    res = run_cluster(spec)
    assert res.summary == list(range(5))
    assert len(res.timings.rows) == 2


def test_load_and_app_phases_use_disjoint_ports():
    net = LoopbackNetwork(event_log=EventLog())
    res = run_cluster(SPEC, net=net)
    assert res.summary == list(range(12))
    load_ports = {400, 401, 402}
    app_ports = {500, 501, 502}
    seen_ports = {d[0].port for _, k, d in net.event_log.events()
                  if k == "input_created"}
    assert seen_ports == load_ports | app_ports


def test_every_data_input_created_before_host_connects():
    log = EventLog()
    net = LoopbackNetwork(event_log=log)
    run_cluster(SPEC, net=net)
    events = log.events()
    for port in (501, 502):  # the nodes' data inputs
        created = next(t for t, k, d in events
                       if k == "input_created" and d[0].port == port)
        attached = next(t for t, k, d in events
                        if k == "attached" and d[0].port == port)
        assert created < attached


def test_all_handles_released_after_local_run():
    net = LoopbackNetwork()
    run_cluster(SPEC, net=net)
    handles = net.open_handles()
    assert all(v == 0 for v in handles.values()), handles


def test_start_before_channels_ready_is_a_violation():
    # a host that skips the plan and immediately sends START breaks the
    # phase order; the node must flag it
    net = LoopbackNetwork()
    host_in = net.create_input_end(load_addr(600), MANY_TO_ONE)

    def bogus_host():
        frame, wid = host_in.read_frame(auto_ack=False)
        host_in.ack_writer(wid)
        ip, load_port, _ = frame.payload.decode().split(":")
        out = net.connect_output_end(load_addr(int(load_port)))
        out.write_frame(Frame(netchan.SYNC, 1, PHASE_START))

    host = Activity(bogus_host, name="bogus")
    with pytest.raises(ProtocolViolation):
        run_node(net, load_addr(600), "127.0.0.1", 601, 602)
    host.join(5.0)
    host_in.close()


def test_node_closed_before_plan_names_the_node():
    net = LoopbackNetwork()
    spec = parse_spec("""
//@emit 127.0.0.1
source tally args [4]
//@cluster 1
workers 1
//@collect
sink tally
""")
    host_plan, _ = build_plans(spec, 610, 620)

    def half_node():
        load_in, out = node_register(net, host_plan.load_input, "127.0.0.1",
                                     611, 621)
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:   # let the host attach first
            with net._cond:
                if load_in._impl.conns:
                    break
            time.sleep(0.005)
        load_in.close()  # dies before reading the plan
        out.close()

    host = Activity(run_host, net, host_plan, name="host")
    Activity(half_node, name="halfnode")
    with pytest.raises(PeerClosed) as err:
        host.join(10.0)
    assert "node 0" in str(err.value)


# ---------------------------------------------------------------------------
# Timing gather details

def make_load_pair(net, port):
    load_in = net.create_input_end(load_addr(port), MANY_TO_ONE)
    out = net.connect_output_end(load_addr(port))
    return load_in, out


def test_gather_combines_host_and_node_rows():
    net = LoopbackNetwork()
    load_in, out = make_load_pair(net, 630)

    def node_side():
        out.write_frame(Frame(netchan.SYNC, 1, PHASE_DONE))
        out.write_frame(Frame(netchan.TIMING, 1, struct.pack(">QQ", 120, 8000)))

    regs = [NodeRegistration(0, "127.0.0.1", 631, 641, 0)]
    n = Activity(node_side, name="n")
    report = gather_timings(load_in, regs, host_load_ms=10, host_run_ms=8200)
    n.join(5.0)
    assert report.rows == [TimingRow("host", 10, 8200), TimingRow("0", 120, 8000)]
    load_in.close()


def test_gather_timing_before_done_is_violation():
    net = LoopbackNetwork()
    load_in, out = make_load_pair(net, 650)
    Activity(out.write_frame,
             Frame(netchan.TIMING, 1, struct.pack(">QQ", 1, 1)), name="w")
    regs = [NodeRegistration(0, "127.0.0.1", 651, 661, 0)]
    with pytest.raises(ProtocolViolation):
        gather_timings(load_in, regs, 1, 1)
    load_in.close()


def test_gather_reports_missing_node():
    net = LoopbackNetwork()
    load_in, out = make_load_pair(net, 670)

    def node_side():
        out.write_frame(Frame(netchan.SYNC, 1, PHASE_DONE))
        out.close()  # dies before TIMING

    regs = [NodeRegistration(0, "127.0.0.1", 671, 681, 0)]
    n = Activity(node_side, name="n")
    with pytest.raises(PeerClosed) as err:
        gather_timings(load_in, regs, 1, 1)
    assert "[0]" in str(err.value)
    n.join(5.0)
    load_in.close()
