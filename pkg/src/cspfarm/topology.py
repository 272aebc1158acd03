"""Expansion of a parsed network spec into concrete channel plans.

A channel is named by the address of its input end, ``ip:port/channel``.
The load network and the application network live on different ports; the
fixed channel-number convention is:

* load port, channel 1  -- host registration input (many-to-one) and each
  node's private load input (one-to-one, written by the host)
* app port,  channel 1  -- host request input (many-to-one)
* app port,  channel 2  -- host result input (many-to-one)
* each node's app port, channel 1 -- that node's data input (one-to-one)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional

LOAD_CHANNEL = 1
REQUEST_CHANNEL = 1
RESULT_CHANNEL = 2
DATA_CHANNEL = 1

DEFAULT_LOAD_PORT = 2000
DEFAULT_APP_PORT = 3000


class TopologyError(Exception):
    pass


class BadAddress(TopologyError):
    """A channel address string does not match ``ip:port/channel``."""


class PortClash(TopologyError):
    """Load port and application port must differ."""


_ADDRESS_RE = re.compile(r"^(\d{1,3}(?:\.\d{1,3}){3}):(\d{1,5})/(\d{1,5})$")


def valid_ip(ip: str) -> bool:
    parts = ip.split(".")
    if len(parts) != 4:
        return False
    for p in parts:
        if not p.isdigit() or not 0 <= int(p) <= 255:
            return False
    return True


@dataclass(frozen=True)
class ChannelAddress:
    """The ``ip:port/channel`` triple naming a net-channel input end."""

    ip: str
    port: int
    channel: int

    def __post_init__(self) -> None:
        if not valid_ip(self.ip):
            raise BadAddress(f"bad ip in address: {self.ip!r}")
        if not 0 < self.port <= 0xFFFF:
            raise BadAddress(f"port out of range: {self.port}")
        if not 0 <= self.channel <= 0xFFFF:
            raise BadAddress(f"channel out of range: {self.channel}")


def format_address(a: ChannelAddress) -> str:
    return f"{a.ip}:{a.port}/{a.channel}"


def parse_address(s: str) -> ChannelAddress:
    m = _ADDRESS_RE.match(s)
    if not m:
        raise BadAddress(f"malformed channel address: {s!r}")
    ip, port, channel = m.group(1), int(m.group(2)), int(m.group(3))
    if not valid_ip(ip):
        raise BadAddress(f"bad ip in address: {s!r}")
    return ChannelAddress(ip, port, channel)


@dataclass
class HostPlan:
    """Host-side wiring: where the host listens and what it coordinates."""

    load_input: ChannelAddress
    request_input: ChannelAddress
    result_input: ChannelAddress
    node_count: int
    workers_per_node: int
    source_workload: str
    source_init_args: list[int]
    sink_workload: str


@dataclass
class NodePlan:
    """Per-node wiring and process roster.

    ``node_index`` and ``own_data_input`` are unset in the template produced
    by :func:`build_plans`; they are filled in once the node has registered
    and its address is known.
    """

    host_load: ChannelAddress
    host_request: ChannelAddress
    host_result: ChannelAddress
    workers: int
    workload_name: str
    init_args: list[int] = field(default_factory=list)
    node_index: Optional[int] = None
    own_data_input: Optional[ChannelAddress] = None

    def completed(self, index: int, node_ip: str, node_app_port: int) -> "NodePlan":
        return replace(
            self,
            node_index=index,
            own_data_input=ChannelAddress(node_ip, node_app_port, DATA_CHANNEL),
            init_args=list(self.init_args),
        )


def build_plans(spec, load_port: int = DEFAULT_LOAD_PORT,
                app_port: int = DEFAULT_APP_PORT) -> tuple[HostPlan, list[NodePlan]]:
    """Expand a NetworkSpec into a host plan plus one node-plan template per cluster."""
    if load_port == app_port:
        raise PortClash(f"load port and app port must differ (both {load_port})")
    host = HostPlan(
        load_input=ChannelAddress(spec.host_ip, load_port, LOAD_CHANNEL),
        request_input=ChannelAddress(spec.host_ip, app_port, REQUEST_CHANNEL),
        result_input=ChannelAddress(spec.host_ip, app_port, RESULT_CHANNEL),
        node_count=spec.clusters,
        workers_per_node=spec.workers_per_node,
        source_workload=spec.source.workload_name,
        source_init_args=list(spec.source.init_args),
        sink_workload=spec.sink.workload_name,
    )
    template = NodePlan(
        host_load=host.load_input,
        host_request=host.request_input,
        host_result=host.result_input,
        workers=spec.workers_per_node,
        workload_name=spec.source.workload_name,
        init_args=list(spec.source.init_args),
    )
    nodes = [replace(template, init_args=list(template.init_args))
             for _ in range(spec.clusters)]
    return host, nodes


# ---------------------------------------------------------------------------
# Manifest serialization: one "key: value" per line, shared by the build
# artifacts on disk and the plan frames sent to nodes at load time.

def _ints_csv(xs) -> str:
    return ",".join(str(x) for x in xs)


def _parse_ints_csv(s: str) -> list[int]:
    s = s.strip()
    if not s:
        return []
    return [int(p) for p in s.split(",")]


def host_plan_to_manifest(p: HostPlan) -> str:
    lines = [
        "plan: host",
        f"load_input: {format_address(p.load_input)}",
        f"request_input: {format_address(p.request_input)}",
        f"result_input: {format_address(p.result_input)}",
        f"nodes: {p.node_count}",
        f"workers: {p.workers_per_node}",
        f"source: {p.source_workload}",
        f"source_args: {_ints_csv(p.source_init_args)}",
        f"sink: {p.sink_workload}",
    ]
    return "\n".join(lines) + "\n"


def node_plan_to_manifest(p: NodePlan) -> str:
    lines = [
        "plan: node",
        f"host_load: {format_address(p.host_load)}",
        f"host_request: {format_address(p.host_request)}",
        f"host_result: {format_address(p.host_result)}",
        f"workers: {p.workers}",
        f"workload: {p.workload_name}",
        f"init_args: {_ints_csv(p.init_args)}",
    ]
    if p.node_index is not None:
        lines.append(f"node_index: {p.node_index}")
    if p.own_data_input is not None:
        lines.append(f"data_input: {format_address(p.own_data_input)}")
    return "\n".join(lines) + "\n"


def _manifest_fields(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("//"):
            continue
        if ":" not in line:
            raise TopologyError(f"manifest line {lineno}: expected 'key: value', got {raw!r}")
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    return fields


def host_plan_from_manifest(text: str) -> HostPlan:
    f = _manifest_fields(text)
    if f.get("plan") != "host":
        raise TopologyError("not a host plan manifest")
    return HostPlan(
        load_input=parse_address(f["load_input"]),
        request_input=parse_address(f["request_input"]),
        result_input=parse_address(f["result_input"]),
        node_count=int(f["nodes"]),
        workers_per_node=int(f["workers"]),
        source_workload=f["source"],
        source_init_args=_parse_ints_csv(f["source_args"]),
        sink_workload=f["sink"],
    )


def node_plan_from_manifest(text: str) -> NodePlan:
    f = _manifest_fields(text)
    if f.get("plan") != "node":
        raise TopologyError("not a node plan manifest")
    return NodePlan(
        host_load=parse_address(f["host_load"]),
        host_request=parse_address(f["host_request"]),
        host_result=parse_address(f["host_result"]),
        workers=int(f["workers"]),
        workload_name=f["workload"],
        init_args=_parse_ints_csv(f["init_args"]),
        node_index=int(f["node_index"]) if "node_index" in f else None,
        own_data_input=parse_address(f["data_input"]) if "data_input" in f else None,
    )
