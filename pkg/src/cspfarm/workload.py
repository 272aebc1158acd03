"""Workload plugin contract and registry.

A workload supplies the source hooks (init once, create instances until
termination), the per-instance function applied by workers, the sink hooks
(collect each instance, finalise once) and a byte codec so instances can
cross net channels.  Workloads are compiled in and looked up by name, which
keeps the node executable application independent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence


class Status(enum.Enum):
    OK = "completedOK"
    CONTINUE = "normalContinuation"
    TERMINATE = "normalTermination"
    FAULT = "fault"


class WorkloadFault(Exception):
    pass


class SourceFault(WorkloadFault):
    pass


class WorkFault(WorkloadFault):
    pass


class SinkFault(WorkloadFault):
    pass


class DuplicateLine(SinkFault):
    """The sink saw the same work-unit index twice (exactly-once violation)."""


class BadArgs(WorkloadFault):
    pass


@dataclass
class SourceHooks:
    """Emit-side hooks: ``init`` runs exactly once before any ``create``;
    ``create`` returns TERMINATE exactly once, after which it is not called."""

    init: Callable[[Sequence[int]], Status]
    create: Callable[[], tuple[Status, Optional[object]]]
    function: Callable[[object], Status]
    encode: Callable[[object], bytes]
    decode: Callable[[bytes], object]


@dataclass
class SinkHooks:
    """Collect-side hooks: ``finalise`` runs exactly once, after the last
    ``collect``."""

    init: Callable[[], Status]
    collect: Callable[[object], Status]
    finalise: Callable[[], object]


@dataclass(frozen=True)
class WorkloadDef:
    name: str
    init_arity: int
    source_roles: tuple[str, str, str]
    sink_roles: tuple[str, str, str]
    make_source: Callable[[], SourceHooks]
    make_sink: Callable[[bool], SinkHooks]  # argument: image mode


_REGISTRY: dict[str, WorkloadDef] = {}


def register_workload(defn: WorkloadDef) -> None:
    _REGISTRY[defn.name] = defn


def get_workload(name: str) -> WorkloadDef:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise BadArgs(f"workload {name!r} is not registered") from None


def registry() -> dict[str, WorkloadDef]:
    return _REGISTRY
