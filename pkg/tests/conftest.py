import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_bilinear(image, flow):
    """Per-pixel bilinear sampling written out longhand; zeros outside the grid."""
    c, h, w = image.shape
    out = np.zeros_like(image)
    for y in range(h):
        for x in range(w):
            sx = x + flow[0, y, x]
            sy = y + flow[1, y, x]
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            ax = sx - x0
            ay = sy - y0
            for yy, xx, wt in ((y0, x0, (1 - ax) * (1 - ay)), (y0, x0 + 1, ax * (1 - ay)),
                               (y0 + 1, x0, (1 - ax) * ay), (y0 + 1, x0 + 1, ax * ay)):
                if 0 <= yy < h and 0 <= xx < w:
                    out[:, y, x] += wt * image[:, yy, xx]
    return out
