"""
Streaming raw frames through a checkpoint
=========================================

"""

# the pipe format is a 14-byte header then packed RGB frames
import io

import numpy as np
from keystyle.cli import RAW_HEADER, run_pipe
from keystyle.operator import init_operator

phi = init_operator(0, 0.25, identity=True)
frames = np.random.default_rng(0).integers(0, 256, (3, 48, 64, 3), dtype=np.uint8)
src = io.BytesIO(RAW_HEADER.pack(b"SRRAW1", 64, 48) + frames.tobytes())
dst = io.BytesIO()
latencies = []
n = run_pipe(phi, src, dst, latencies)

# a pass-through operator returns the stream byte for byte
print(n, "frames, identical:", dst.getvalue() == src.getvalue())
print("per-frame ms:", [round(1e3 * t, 2) for t in latencies])

# from a shell the same thing is
#   keystyle stylize --model run/checkpoints/step_00000600.srckpt --pipe < in.raw > out.raw
