"""Work-farm process networks over rendezvous channels.

A small topology language compiles into a deployable host-plus-nodes process
network; work units flow through synchronized, unbuffered channels over TCP
(or an in-process loopback twin), terminate by poison token, and the farm's
process model ships with an explicit-state checker proving it deadlock- and
livelock-free.
"""

from . import mandelbrot  # registers the built-in workload
from .dsl import NetworkSpec, parse_spec, render_spec, validate_spec
from .deploy import LocalResult, TimingReport, local_run, run_host, run_node
from .model_check import build_system, check_all
from .netchan import (Envelope, EventLog, Frame, LoopbackNetwork, TcpNetwork,
                      decode_frame, encode_frame)
from .topology import ChannelAddress, build_plans, format_address, parse_address
from .workload import registry

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec", "parse_spec", "render_spec", "validate_spec",
    "LocalResult", "TimingReport", "local_run", "run_host", "run_node",
    "build_system", "check_all",
    "Envelope", "EventLog", "Frame", "LoopbackNetwork", "TcpNetwork",
    "decode_frame", "encode_frame",
    "ChannelAddress", "build_plans", "format_address", "parse_address",
    "registry", "__version__",
]
