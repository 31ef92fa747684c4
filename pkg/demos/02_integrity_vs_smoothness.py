"""Why second-order smoothness is not enough.

A uniform squeeze along the width is perfectly smooth (affine), so the
second-order penalty is zero. The integrity penalty compares each
neighbour spacing with the spacing implied by the garment's overall size
change and flags it.
"""

import numpy as np

from flowweld import flow as fl
from flowweld import losses as ls

h, w = 12, 12
xs, ys = fl.identity_grid(h, w)

# the garment keeps its size: the right spacing between neighbours is 1
r = ls.RatioPair(1.0, 1.0)
good = fl.zero_flow(h, w)
squeezed = np.stack([0.6 * (xs - 5.5), np.zeros((h, w))])  # neighbours now 1.6 apart

for name, f in (("identity", good), ("width squeeze", squeezed)):
    so = ls.so_loss(f).value
    keep = ls.integrity_violation(f, r, np.ones((h, w)))
    print(f"{name:>14}: second-order {so:.3f}   integrity violation {keep:.3f}")

# if the target really is 1.6x narrower in the sampling sense, the same flow is correct
r_wide = ls.RatioPair(1.0, 1.6)
print(f"with the matching ratio: {ls.integrity_violation(squeezed, r_wide, np.ones((h, w))):.1e}")

# the penalty is deliberately discontinuous at D = r: just above r costs about r
for d in (0.4, 0.999, 1.0, 1.001, 2.0):
    print(f"  D = {d:<5} -> {float(ls.preserve_penalty(d, 1.0)):.3f}")
