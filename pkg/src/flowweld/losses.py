"""Scalar objectives and metrics on images, masks and flow fields.

Every differentiable loss returns a :class:`LossValue` whose ``grad`` has
the shape of the first (differentiated) argument. Reductions are either
``"mean"`` over the contributing terms or ``"sum"``.
"""

from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional

import numpy as np

from .errors import DimensionMismatch, EmptyMask, WindowTooLarge
from .flow import as_flow

BCE_EPS = 1e-7


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    terms: Dict[str, float] = field(default_factory=dict)


class RatioPair(NamedTuple):
    """Target inter-neighbour spacing along each axis."""

    vertical: float
    horizontal: float
    convention: str = "sampling"

    @classmethod
    def coerce(cls, r) -> "RatioPair":
        if isinstance(r, cls):
            pair = r
        elif np.isscalar(r):
            pair = cls(float(r), float(r))
        else:
            pair = cls(*r)
        if not (np.isfinite(pair.vertical) and np.isfinite(pair.horizontal)
                and pair.vertical > 0 and pair.horizontal > 0):
            raise ValueError(f"ratios must be positive and finite, got {pair}")
        return pair


def _reduce(total: float, grad: np.ndarray, count: int, reduction: str):
    if reduction == "sum":
        return float(total), grad
    if reduction == "mean":
        if count == 0:
            return 0.0, grad
        return float(total) / count, grad / count
    raise ValueError(f"unknown reduction {reduction!r}")


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def l1_loss(a, b, reduction: str = "mean") -> LossValue:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    diff = a - b
    value, grad = _reduce(np.abs(diff).sum(), np.sign(diff), diff.size, reduction)
    return LossValue(value, grad)


def bce_loss(pred, target) -> LossValue:
    """Mean binary cross entropy; ``pred`` is clamped to ``[eps, 1 - eps]``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(pred, target)
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    per = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    inside = (pred >= BCE_EPS) & (pred <= 1.0 - BCE_EPS)
    grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0)
    n = per.size
    return LossValue(float(per.sum()) / n, grad / n)


def so_loss(flow, reduction: str = "mean") -> LossValue:
    """Second-order smoothness: |f(p-d) + f(p+d) - 2 f(p)| along both axes."""
    f = as_flow(flow)
    grad = np.zeros_like(f)
    total = 0.0
    count = 0
    # vertical pairs (axis 1), then horizontal (axis 2)
    for axis in (1, 2):
        n = f.shape[axis]
        if n < 3:
            continue
        lo = np.take(f, np.arange(0, n - 2), axis=axis)
        mid = np.take(f, np.arange(1, n - 1), axis=axis)
        hi = np.take(f, np.arange(2, n), axis=axis)
        d = lo + hi - 2.0 * mid
        total += np.abs(d).sum()
        count += d[0].size
        s = np.sign(d)
        idx = [slice(None)] * 3
        idx[axis] = slice(0, n - 2)
        grad[tuple(idx)] += s
        idx[axis] = slice(2, n)
        grad[tuple(idx)] += s
        idx[axis] = slice(1, n - 1)
        grad[tuple(idx)] -= 2.0 * s
    value, grad = _reduce(total, grad, count, reduction)
    return LossValue(value, grad)


def tv_loss(flow, reduction: str = "mean") -> LossValue:
    """Anisotropic total variation over forward neighbours."""
    f = as_flow(flow)
    grad = np.zeros_like(f)
    total = 0.0
    count = 0
    for axis in (1, 2):
        n = f.shape[axis]
        if n < 2:
            continue
        d = np.diff(f, axis=axis)
        total += np.abs(d).sum()
        count += d[0].size
        s = np.sign(d)
        idx = [slice(None)] * 3
        idx[axis] = slice(1, n)
        grad[tuple(idx)] += s
        idx[axis] = slice(0, n - 1)
        grad[tuple(idx)] -= s
    value, grad = _reduce(total, grad, count, reduction)
    return LossValue(value, grad)


def preserve_penalty(d, r):
    """Piecewise integrity penalty: ``d`` above ``r``, ``r - d`` below, 0 at ``r``."""
    d = np.asarray(d, dtype=np.float64)
    return np.where(d > r, d, np.where(d < r, r - d, 0.0))


def _region_weights(region, shape) -> np.ndarray:
    if region is None:
        return np.ones(shape)
    region = np.asarray(region, dtype=np.float64)
    if region.shape != shape:
        raise DimensionMismatch(f"region shape {region.shape} does not match flow {shape}")
    return (region > 0.5).astype(np.float64)


def _mapped_axis_gaps(f: np.ndarray):
    """Signed gaps of the mapped coordinate between neighbours, per axis.

    Computed as ``1 + diff(f)`` rather than ``diff(p + f)`` so that
    constant flows give a gap of exactly one.
    """
    return 1.0 + np.diff(f[1], axis=0), 1.0 + np.diff(f[0], axis=1)


def nipr_preserve(flow, r, region: Optional[np.ndarray] = None,
                  reduction: str = "mean") -> LossValue:
    """Neighbourhood integrity penalty over every in-grid 4-neighbour of each point.

    The distance for a neighbour pair is the gap of the mapped coordinate
    along that pair's axis. Each unordered pair is visited from both of its
    ends, and a visit counts only when its starting point lies in ``region``.
    """
    f = as_flow(flow)
    r = RatioPair.coerce(r)
    weights = _region_weights(region, f.shape[1:])
    grad = np.zeros_like(f)
    total = 0.0
    count = 0.0
    gap_v, gap_h = _mapped_axis_gaps(f)
    for comp, axis, gap, rr in ((1, 0, gap_v, r.vertical), (0, 1, gap_h, r.horizontal)):
        if gap.size == 0:
            continue
        n = weights.shape[axis]
        first = np.take(weights, np.arange(0, n - 1), axis=axis)
        second = np.take(weights, np.arange(1, n), axis=axis)
        visits = first + second
        d = np.abs(gap)
        total += (preserve_penalty(d, rr) * visits).sum()
        count += visits.sum()
        slope = np.where(d > rr, 1.0, np.where(d < rr, -1.0, 0.0))
        g = visits * slope * np.sign(gap)
        idx = [slice(None)] * 2
        idx[axis] = slice(1, n)
        grad[comp][tuple(idx)] += g
        idx[axis] = slice(0, n - 1)
        grad[comp][tuple(idx)] -= g
    value, grad = _reduce(total, grad, int(count), reduction)
    return LossValue(value, grad)


def nipr_loss(flow, r, region: Optional[np.ndarray] = None,
              reduction: str = "mean") -> LossValue:
    so = so_loss(flow, reduction)
    keep = nipr_preserve(flow, r, region, reduction)
    return LossValue(so.value + keep.value, so.grad + keep.grad,
                     {"so": so.value, "preserve": keep.value})


def consistency_loss(mask_local, mask_global) -> LossValue:
    """Mean L1 between the garment mask warped by the local and global flows.

    ``grad`` is w.r.t. ``mask_local``; the global-side gradient is its negation.
    """
    return l1_loss(mask_local, mask_global, "mean")


def integrity_violation(flow, r, region) -> float:
    """Mean integrity penalty over neighbour visits starting inside ``region``."""
    region = np.asarray(region, dtype=np.float64)
    if not np.any(region > 0.5):
        raise EmptyMask("integrity region is empty")
    return nipr_preserve(flow, r, region, "mean").value


def regularizer(variant: str, flow, r=None, region=None, reduction: str = "mean") -> LossValue:
    """Dispatch on the flow regularizer variant: nipr, so, tv or none."""
    variant = variant.lower()
    if variant == "nipr":
        return nipr_loss(flow, r, region, reduction)
    if variant == "so":
        return so_loss(flow, reduction)
    if variant == "tv":
        return tv_loss(flow, reduction)
    if variant == "none":
        f = as_flow(flow)
        return LossValue(0.0, np.zeros_like(f))
    raise ValueError(f"unknown loss variant {variant!r}")


SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only.

    Multi-channel inputs are scored per channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise WindowTooLarge(f"image {a.shape[-2:]} is smaller than the {SSIM_WINDOW}px window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for x, y in zip(a, b):
        mx = _filter_valid(x, g)
        my = _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))

