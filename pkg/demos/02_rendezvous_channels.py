"""Rendezvous channels: unbuffered, synchronized, acknowledged.

A write does not complete until the reader has accepted the message and the
acknowledgement frame has come back.  The loopback transport shown here has
exactly the semantics of the TCP transport, including the wire codec.
"""

import time

from cspfarm import Envelope, LoopbackNetwork, ChannelAddress
from cspfarm.activities import Activity
from cspfarm.netchan import MANY_TO_ONE, ONE_TO_ONE, select_write

net = LoopbackNetwork()

# 1. a write blocks until someone reads
a = ChannelAddress("127.0.0.1", 4000, 1)
inp = net.create_input_end(a, ONE_TO_ONE)
out = net.connect_output_end(a)

writer = Activity(out.write, Envelope(body=b"hello"), name="writer")
time.sleep(0.2)
print(f"writer finished before any read? {writer.done}")   # False: rendezvous
env = inp.read()
writer.join(5.0)
print(f"after read: got {env.body!r}, writer finished {writer.done}")

# 2. many-to-one ends deliver in arrival order, FIFO per writer
b = ChannelAddress("127.0.0.1", 4000, 2)
shared = net.create_input_end(b, MANY_TO_ONE)
outs = [net.connect_output_end(b) for _ in range(3)]
for i, o in enumerate(outs):
    Activity(lambda o=o, i=i: [o.write(Envelope(body=bytes([i, k])))
                               for k in range(3)], name=f"w{i}")
got = [tuple(shared.read().body) for _ in range(9)]
print(f"arrival order across three writers: {got}")

# 3. output selection: deliver to whichever reader is idle, lowest index first
chans = [ChannelAddress("127.0.0.1", 4001, c) for c in (1, 2)]
ins = [net.create_input_end(c, ONE_TO_ONE) for c in chans]
outs = [net.connect_output_end(c) for c in chans]
r1 = Activity(ins[1].read, name="idle-reader")
time.sleep(0.1)                       # only reader 1 is waiting
chosen = select_write(outs, Envelope(body=b"work"))
print(f"select_write delivered to the idle reader: index {chosen}")
r1.join(5.0)
