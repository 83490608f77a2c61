"""Where does the early response end?

The early/late transition T_ER is the first 10 ms window in which the
arrival directions at the listener look isotropic. Bigger rooms take longer
to diffuse, so T_ER should grow with size. This demo prints the per-window
KS distances for a small room and the resulting T_ER for a large hall.

Run: python3 demos/early_late_split.py
"""

import numpy as np

from sceneaudio.erdur import find_er_duration
from sceneaudio.scene import Material, shoebox
from sceneaudio.tracer import trace_paths

materials = [Material("walls", np.full(8, 0.8)), Material("floor", np.full(8, 0.6))]

small = shoebox((4.0, 6.0, 3.0), materials, 0, 1)
res = find_er_duration(trace_paths(small, [1.0, 1.5, 1.2], [3.0, 4.5, 1.6], 20000, 0.1, seed=1))
print("4 x 6 x 3 m room, window start times (the first is the direct sound):")
for start, (d_zen, d_azi) in zip(res.window_starts, res.distances):
    mark = "  <- isotropic" if max(d_zen, d_azi) <= 0.15 else ""
    print(f"  {start * 1e3:5.1f} ms  zenith {d_zen:.3f}  azimuth {d_azi:.3f}{mark}")
print(f"T_ER = {res.t_er * 1e3:.1f} ms")

# A hall ten times larger needs a larger receiver to collect enough arrivals
# per window; radius 2.5 m keeps the hit density close to the small room's.
hall = shoebox((40.0, 60.0, 12.0), materials, 0, 1)
paths = trace_paths(hall, [15.0, 25.0, 1.5], [25.0, 35.0, 1.6], 60000, 0.3, seed=1, receiver_radius=2.5)
print(f"40 x 60 x 12 m hall: T_ER = {find_er_duration(paths).t_er * 1e3:.1f} ms")
