"""The built-in Mandelbrot workload.

The plane x in [-2.5, 1.0), y in (-1.0, 1.0] is cut into horizontal lines of
``width`` points with spacing ``delta = 3.5 / width``; there are
``int(2.0 / delta)`` lines.  Each point iterates z <- z^2 + c until
|z|^2 >= 4 or the escape cap is reached; a point is WHITE (1) if it escaped
before the cap and BLACK (0) otherwise.  Coordinates are regenerated on the
worker from (line index, width) rather than shipped, which the sequential
equivalence tests guard.

The per-line kernel reproduces the scalar loop exactly: per point, the update
order is x' = x*x - y*y + cx, then y' = (2*x)*y + cy, in IEEE double
arithmetic, and the iteration count is the number of update steps performed.
The kernel is compiled with numba and releases the interpreter lock for the
whole line, so worker threads compute in parallel; a vectorised numpy path
with identical semantics covers interpreters without numba.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

try:
    from numba import njit
except ImportError:          # pragma: no cover - exercised via the fallback tests
    njit = None

from .workload import (BadArgs, DuplicateLine, SinkHooks, SourceHooks, Status,
                       WorkloadDef, register_workload)

WHITE = 1
BLACK = 0

MIN_X = -2.5
MIN_Y = 1.0
RANGE_X = 3.5
RANGE_Y = 2.0

_HEADER = struct.Struct(">IIIQd")  # line_index, width, escape, total_iters, ly


@dataclass(frozen=True)
class MandelParams:
    width: int
    escape: int
    delta: float
    height: int


def make_params(args) -> MandelParams:
    """Derive the grid from [width, escape-value] init args."""
    if len(args) != 2:
        raise BadArgs(f"expected [width, maxIterations], got {list(args)!r}")
    width, escape = int(args[0]), int(args[1])
    if width < 1 or escape < 1:
        raise BadArgs(f"width and escape value must be >= 1, got {width}, {escape}")
    delta = RANGE_X / float(width)
    height = int(RANGE_Y / delta)
    if height < 1:
        raise BadArgs(f"width {width} yields no whole line (height 0)")
    return MandelParams(width=width, escape=escape, delta=delta, height=height)


@dataclass
class MandelLine:
    line_index: int
    width: int
    escape: int
    ly_offset: float
    total_iterations: int = 0
    colour: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    def __eq__(self, other) -> bool:
        return (isinstance(other, MandelLine)
                and self.line_index == other.line_index
                and self.width == other.width
                and self.escape == other.escape
                and self.ly_offset == other.ly_offset
                and self.total_iterations == other.total_iterations
                and np.array_equal(self.colour, other.colour))


def new_line(params: MandelParams, index: int) -> MandelLine:
    return MandelLine(line_index=index, width=params.width, escape=params.escape,
                      ly_offset=index * params.delta,
                      colour=np.zeros(params.width, dtype=np.uint8))


def _escape_line_vectorized(cx: np.ndarray, cy: float, escape: int,
                            colour: np.ndarray) -> int:
    """Numpy fallback for the escape loop; same per-point arithmetic with the
    still-active points compacted each round."""
    width = cx.size
    iters = np.zeros(width, dtype=np.int64)
    active = np.arange(width)
    xs = np.zeros(width, dtype=np.float64)
    ys = np.zeros(width, dtype=np.float64)
    n = 0
    while active.size and n < escape:
        keep = xs * xs + ys * ys < 4.0
        active = active[keep]
        if not active.size:
            break
        xs = xs[keep]
        ys = ys[keep]
        xt = xs * xs - ys * ys + cx[active]
        ys = (2.0 * xs) * ys + cy
        xs = xt
        n += 1
        iters[active] = n
    colour[:] = iters < escape
    return int(iters.sum())


if njit is not None:
    @njit(nogil=True, cache=True)
    def _escape_line(cx, cy, escape, colour):
        total = 0
        for w in range(cx.size):
            x = 0.0
            y = 0.0
            it = 0
            c = cx[w]
            while x * x + y * y < 4.0 and it < escape:
                xt = x * x - y * y + c
                y = (2.0 * x) * y + cy
                x = xt
                it += 1
            total += it
            colour[w] = 1 if it < escape else 0
        return total
else:                          # pragma: no cover
    _escape_line = None


def compute_line(line: MandelLine) -> None:
    """Fill ``colour`` and ``total_iterations`` for one line in place."""
    width, escape = line.width, line.escape
    delta = RANGE_X / float(width)
    cx = MIN_X + np.arange(width, dtype=np.float64) * delta
    cy = MIN_Y - line.ly_offset
    colour = np.zeros(width, dtype=np.uint8)
    if _escape_line is not None:
        total = _escape_line(cx, cy, escape, colour)
    else:
        total = _escape_line_vectorized(cx, cy, escape, colour)
    line.colour = colour
    line.total_iterations = int(total)


class Truncated(BadArgs):
    pass


class BadWidth(BadArgs):
    pass


def encode_line(line: MandelLine) -> bytes:
    """Body layout: u32 index | u32 width | u32 escape | u64 iters | f64 ly |
    one colour byte per point, all big-endian."""
    colour = np.asarray(line.colour, dtype=np.uint8)
    if colour.size != line.width:
        raise BadWidth(f"colour array has {colour.size} entries for width {line.width}")
    return _HEADER.pack(line.line_index, line.width, line.escape,
                        line.total_iterations, line.ly_offset) + colour.tobytes()


def decode_line(body: bytes) -> MandelLine:
    if len(body) < _HEADER.size:
        raise Truncated(f"line body of {len(body)} bytes is shorter than the header")
    index, width, escape, total, ly = _HEADER.unpack_from(body)
    if len(body) != _HEADER.size + width:
        raise BadWidth(f"line body of {len(body)} bytes does not match width {width}")
    colour = np.frombuffer(body, dtype=np.uint8, offset=_HEADER.size).copy()
    return MandelLine(line_index=index, width=width, escape=escape, ly_offset=ly,
                      total_iterations=total, colour=colour)


@dataclass
class MandelSummary:
    points: int
    white: int
    black: int
    total_iterations: int
    width: int = 0
    height: int = 0
    image_rows: Optional[dict[int, bytes]] = None

    def counts(self) -> tuple[int, int, int, int]:
        return self.points, self.white, self.black, self.total_iterations


class _Collector:
    def __init__(self, image_mode: bool) -> None:
        self.points = 0
        self.white = 0
        self.black = 0
        self.total_iterations = 0
        self.width = 0
        self.seen: set[int] = set()
        self.rows: Optional[dict[int, bytes]] = {} if image_mode else None

    def init(self) -> Status:
        return Status.OK

    def collect(self, line: MandelLine) -> Status:
        if line.line_index in self.seen:
            raise DuplicateLine(f"line {line.line_index} collected twice")
        self.seen.add(line.line_index)
        w = int(np.count_nonzero(line.colour))
        self.points += line.width
        self.white += w
        self.black += line.width - w
        self.total_iterations += line.total_iterations
        self.width = line.width
        if self.rows is not None:
            self.rows[line.line_index] = line.colour.tobytes()
        return Status.OK

    def finalise(self) -> MandelSummary:
        return MandelSummary(points=self.points, white=self.white, black=self.black,
                             total_iterations=self.total_iterations, width=self.width,
                             height=len(self.seen), image_rows=self.rows)


def source_hooks() -> SourceHooks:
    state = {"params": None, "cursor": 0}

    def init(args) -> Status:
        state["params"] = make_params(args)
        state["cursor"] = 0
        return Status.OK

    def create():
        params = state["params"]
        if params is None:
            raise BadArgs("create called before init")
        if state["cursor"] == params.height:
            return Status.TERMINATE, None
        line = new_line(params, state["cursor"])
        state["cursor"] += 1
        return Status.CONTINUE, line

    def function(line: MandelLine) -> Status:
        compute_line(line)
        return Status.OK

    return SourceHooks(init=init, create=create, function=function,
                       encode=encode_line, decode=decode_line)


def sink_hooks(image_mode: bool = False) -> SinkHooks:
    c = _Collector(image_mode)
    return SinkHooks(init=c.init, collect=c.collect, finalise=c.finalise)


def run_sequential(width: int, escape: int, image_mode: bool = False) -> MandelSummary:
    """Single-threaded reference run over all lines with the same hooks."""
    src = source_hooks()
    snk = sink_hooks(image_mode)
    src.init([width, escape])
    snk.init()
    while True:
        status, line = src.create()
        if status is Status.TERMINATE:
            break
        src.function(line)
        snk.collect(src.decode(src.encode(line)))
    return snk.finalise()


class MissingImageData(BadArgs):
    pass


def write_pgm(summary: MandelSummary, path: str) -> None:
    """Write the assembled image as binary PGM, white 255 / black 0."""
    if not isinstance(summary, MandelSummary) or summary.image_rows is None:
        raise MissingImageData("run did not keep image rows; rerun with image mode")
    rows = summary.image_rows
    height = len(rows)
    if sorted(rows) != list(range(height)):
        raise MissingImageData("image rows are not a contiguous 0..height-1 set")
    with open(path, "wb") as f:
        f.write(f"P5\n{summary.width} {height}\n255\n".encode("ascii"))
        for i in range(height):
            f.write(bytes(255 if b else 0 for b in rows[i]))


register_workload(WorkloadDef(
    name="mandelbrot",
    init_arity=2,
    source_roles=("init_grid", "next_line", "escape_colour"),
    sink_roles=("init_counts", "tally_line", "report_counts"),
    make_source=source_hooks,
    make_sink=sink_hooks,
))
