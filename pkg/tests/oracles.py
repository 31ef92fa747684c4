"""Longhand reference implementations used as independent test oracles.

Each one loops over pixels and neighbours exactly as the definitions read,
sharing no code with the package.
"""

import math


def l1_sum(a, b):
    return sum(abs(x - y) for x, y in zip(a.ravel().tolist(), b.ravel().tolist()))


def bce_mean(pred, target, eps=1e-7):
    total = 0.0
    p_list = pred.ravel().tolist()
    t_list = target.ravel().tolist()
    for p, t in zip(p_list, t_list):
        p = min(max(p, eps), 1 - eps)
        total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / len(p_list)


def so_sum(flow):
    _, h, w = flow.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            for dy, dx in ((1, 0), (0, 1)):
                ya, xa, yb, xb = y - dy, x - dx, y + dy, x + dx
                if 0 <= ya and 0 <= xa and yb < h and xb < w:
                    for c in range(2):
                        total += abs(flow[c, ya, xa] + flow[c, yb, xb] - 2 * flow[c, y, x])
    return total


def tv_sum(flow):
    _, h, w = flow.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            for c in range(2):
                if x + 1 < w:
                    total += abs(flow[c, y, x + 1] - flow[c, y, x])
                if y + 1 < h:
                    total += abs(flow[c, y + 1, x] - flow[c, y, x])
    return total


def preserve_term(d, r):
    if d > r:
        return d
    if d < r:
        return r - d
    return 0.0


def preserve_sum(flow, r_v, r_h, region=None):
    """Sum over points p in the region and over each in-grid 4-neighbour u."""
    _, h, w = flow.shape
    total = 0.0
    count = 0
    for y in range(h):
        for x in range(w):
            if region is not None and not region[y, x] > 0.5:
                continue
            px = x + flow[0, y, x]
            py = y + flow[1, y, x]
            for uy, ux in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if not (0 <= uy < h and 0 <= ux < w):
                    continue
                if ux == x:
                    d = abs(py - (uy + flow[1, uy, ux]))
                    total += preserve_term(d, r_v)
                else:
                    d = abs(px - (ux + flow[0, uy, ux]))
                    total += preserve_term(d, r_h)
                count += 1
    return total, count
