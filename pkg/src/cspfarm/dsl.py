"""Parser for the annotated topology specification (``.cgpp`` files).

The format is line oriented, one directive per line, sections in a fixed
order.  ``//`` starts a comment and blank lines are ignored::

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

Constants are integers only and may be used wherever a directive takes an
integer.  ``@emit`` takes a literal dotted-quad host address.  The ``@``
annotations are recognised with or without the ``//`` prefix.  Optional
``roles`` clauses on ``source``/``sink`` name the hook methods and are
checked against the workload contract during validation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .topology import valid_ip


class SpecError(Exception):
    """Diagnostic for one grammar or consistency violation, naming the line."""

    def __init__(self, message: str, line: int = 0) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class MissingSection(SpecError):
    pass


class BadOrder(SpecError):
    pass


class UnknownConstant(SpecError):
    pass


class BadHostIp(SpecError):
    pass


class BadDirective(SpecError):
    pass


class UnknownWorkload(SpecError):
    pass


class ArityMismatch(SpecError):
    pass


class RoleMismatch(SpecError):
    pass


@dataclass(frozen=True)
class SourceBinding:
    workload_name: str
    init_args: tuple[int, ...]
    roles: Optional[tuple[str, str, str]] = None  # init / create / function


@dataclass(frozen=True)
class SinkBinding:
    workload_name: str
    roles: Optional[tuple[str, str, str]] = None  # init / collect / finalise


@dataclass(frozen=True)
class NetworkSpec:
    host_ip: str
    clusters: int
    workers_per_node: int
    source: SourceBinding
    sink: SinkBinding
    constants: dict[str, int] = field(default_factory=dict, compare=False)


_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

# Section order mirrors the annotated outline: constants, then the emit
# section, the cluster section and the collect section.
_SECTIONS = ["const", "@emit", "source", "@cluster", "workers", "@collect", "sink"]


def _strip(line: str) -> str:
    # @-annotations live in comments in the original embedding; accept both
    # "//@emit ..." and "@emit ...", drop everything after a plain comment.
    s = line.strip()
    if s.startswith("//@"):
        s = s[2:]
    if "//" in s:
        s = s.split("//", 1)[0].strip()
    return s


def _resolve_int(token: str, constants: dict[str, int], lineno: int) -> int:
    token = token.strip()
    if re.fullmatch(r"-?\d+", token):
        return int(token)
    if not _NAME_RE.match(token):
        raise BadDirective(f"expected integer or constant name, got {token!r}", lineno)
    if token not in constants:
        raise UnknownConstant(f"constant {token!r} used before definition", lineno)
    return constants[token]


def _parse_roles(clause: str, lineno: int) -> tuple[str, str, str]:
    names = [p.strip() for p in clause.split(",")]
    if len(names) != 3 or not all(_NAME_RE.match(n) for n in names):
        raise BadDirective(f"roles clause needs three names, got {clause!r}", lineno)
    return tuple(names)  # type: ignore[return-value]


def parse_spec(text: str) -> NetworkSpec:
    """Parse DSL source into a NetworkSpec, substituting constants."""
    constants: dict[str, int] = {}
    host_ip = None
    source = None
    clusters = None
    workers = None
    collected = False
    sink = None
    stage = 0  # index into _SECTIONS of the next admissible section

    def advance(section: str, lineno: int) -> None:
        nonlocal stage
        target = _SECTIONS.index(section)
        if target < stage:
            raise BadOrder(f"section {section!r} out of order or duplicated", lineno)
        stage = target + (0 if section == "const" else 1)

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        word, _, rest = line.partition(" ")
        rest = rest.strip()

        if word == "const":
            advance("const", lineno)
            m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(-?\d+)", rest)
            if not m:
                raise BadDirective(f"expected 'const <name> = <int>', got {raw!r}",
                                   lineno)
            name = m.group(1)
            if name in constants:
                raise BadDirective(f"constant {name!r} redefined", lineno)
            constants[name] = int(m.group(2))
        elif word == "@emit":
            advance("@emit", lineno)
            if not rest:
                raise BadDirective("@emit needs a host address", lineno)
            if not valid_ip(rest):
                raise BadHostIp(f"host address {rest!r} is not a dotted quad", lineno)
            host_ip = rest
        elif word == "source":
            advance("source", lineno)
            m = re.fullmatch(
                r"([A-Za-z_][A-Za-z0-9_]*)\s+args\s*\[([^\]]*)\]"
                r"(?:\s+roles\s+(.+))?", rest)
            if not m:
                raise BadDirective(
                    f"expected 'source <workload> args [a,b,...]', got {raw!r}", lineno)
            args_text = m.group(2).strip()
            args = tuple(_resolve_int(t, constants, lineno)
                         for t in args_text.split(",")) if args_text else ()
            roles = _parse_roles(m.group(3), lineno) if m.group(3) else None
            source = SourceBinding(m.group(1), args, roles)
        elif word == "@cluster":
            advance("@cluster", lineno)
            clusters = _resolve_int(rest, constants, lineno)
            if clusters < 1:
                raise BadDirective(f"cluster count must be >= 1, got {clusters}",
                                   lineno)
        elif word == "workers":
            advance("workers", lineno)
            workers = _resolve_int(rest, constants, lineno)
            if workers < 1:
                raise BadDirective(f"worker count must be >= 1, got {workers}", lineno)
        elif word == "@collect":
            advance("@collect", lineno)
            if rest:
                raise BadDirective("@collect takes no argument", lineno)
            collected = True
        elif word == "sink":
            advance("sink", lineno)
            m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)(?:\s+roles\s+(.+))?", rest)
            if not m:
                raise BadDirective(f"expected 'sink <workload>', got {raw!r}", lineno)
            roles = _parse_roles(m.group(2), lineno) if m.group(2) else None
            sink = SinkBinding(m.group(1), roles)
        else:
            raise BadDirective(f"unknown directive {word!r}", lineno)

    last = len(text.splitlines())
    if host_ip is None:
        raise MissingSection("missing @emit section", last)
    if source is None:
        raise MissingSection("missing source binding", last)
    if clusters is None:
        raise MissingSection("missing @cluster section", last)
    if workers is None:
        raise MissingSection("missing workers directive", last)
    if not collected:
        raise MissingSection("missing @collect section", last)
    if sink is None:
        raise MissingSection("missing sink binding", last)
    return NetworkSpec(host_ip=host_ip, clusters=clusters, workers_per_node=workers,
                       source=source, sink=sink, constants=constants)


def render_spec(spec: NetworkSpec) -> str:
    """Render a NetworkSpec back to canonical DSL text; reparses to an equal spec."""
    lines = [f"const {name} = {value}" for name, value in spec.constants.items()]
    lines.append(f"//@emit {spec.host_ip}")
    args = ", ".join(str(a) for a in spec.source.init_args)
    src = f"source {spec.source.workload_name} args [{args}]"
    if spec.source.roles:
        src += " roles " + ",".join(spec.source.roles)
    lines.append(src)
    lines.append(f"//@cluster {spec.clusters}")
    lines.append(f"workers {spec.workers_per_node}")
    lines.append("//@collect")
    snk = f"sink {spec.sink.workload_name}"
    if spec.sink.roles:
        snk += " roles " + ",".join(spec.sink.roles)
    lines.append(snk)
    return "\n".join(lines) + "\n"


def validate_spec(spec: NetworkSpec, registry) -> NetworkSpec:
    """Check workload bindings against the registry; returns the spec unchanged."""
    for name in (spec.source.workload_name, spec.sink.workload_name):
        if name not in registry:
            raise UnknownWorkload(f"workload {name!r} is not registered")
    wl = registry[spec.source.workload_name]
    if len(spec.source.init_args) != wl.init_arity:
        raise ArityMismatch(
            f"workload {wl.name!r} expects {wl.init_arity} init args, "
            f"got {len(spec.source.init_args)}")
    if spec.source.roles is not None and spec.source.roles != wl.source_roles:
        raise RoleMismatch(
            f"source roles {spec.source.roles} do not match the "
            f"{wl.name!r} contract {wl.source_roles}")
    sk = registry[spec.sink.workload_name]
    if spec.sink.roles is not None and spec.sink.roles != sk.sink_roles:
        raise RoleMismatch(
            f"sink roles {spec.sink.roles} do not match the "
            f"{sk.name!r} contract {sk.sink_roles}")
    return spec
