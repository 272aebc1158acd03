"""Render the benchmark workload's image and check the counting identities.

The parallel run is byte-identical to the single-threaded reference; the
image is written as a binary PGM (white = escaped, black = bounded).
"""

from cspfarm import local_run, parse_spec
from cspfarm.mandelbrot import run_sequential, write_pgm

WIDTH, ESCAPE = 1400, 250

spec = parse_spec(f"""
//@emit 127.0.0.1
source mandelbrot args [{WIDTH}, {ESCAPE}]
//@cluster 2
workers 2
//@collect
sink mandelbrot
""")

parallel = local_run(spec, image_mode=True).summary
reference = run_sequential(WIDTH, ESCAPE, image_mode=True)

assert parallel.counts() == reference.counts()
assert all(parallel.image_rows[i] == reference.image_rows[i]
           for i in range(reference.height))
print(f"parallel == sequential on {parallel.points:,} points "
      f"({parallel.width}x{parallel.height})")
print(f"white {parallel.white:,}  black {parallel.black:,}  "
      f"iterations {parallel.total_iterations:,}")

write_pgm(parallel, "mandelbrot.pgm")
print("wrote mandelbrot.pgm")
