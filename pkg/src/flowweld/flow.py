"""Raster and flow-field operators.

Array conventions used throughout the package:

* image: ``(C, H, W)`` float64, values in [0, 1]
* mask: ``(H, W)`` float64, values in [0, 1]
* flow: ``(2, H, W)`` float64; ``flow[0]`` is dx, ``flow[1]`` is dy, in pixels

Flows are backward (sampling) displacements: the output at pixel ``p``
is read from the source at ``p + flow(p)``. Samples falling outside the
grid read zeros.
"""

from typing import NamedTuple, Optional, Tuple

import numpy as np

from .errors import DimensionMismatch, EmptyMask


def as_image(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DimensionMismatch(f"image must be (C, H, W) with C in (1, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def as_mask(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"mask must be (H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("mask contains non-finite values")
    return arr


def as_flow(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise DimensionMismatch(f"flow must be (2, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("flow contains non-finite values")
    return arr


def zero_flow(height: int, width: int) -> np.ndarray:
    return np.zeros((2, height, width))


def identity_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(xs, ys)`` of an ``height x width`` grid."""
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def _check_same_hw(a: np.ndarray, b: np.ndarray, what: str = "inputs"):
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionMismatch(f"{what}: spatial shapes differ, {a.shape[-2:]} vs {b.shape[-2:]}")


class BilinearSampler:
    """Sampling plan for one flow field.

    Precomputes corner indices and weights so several rasters (garment,
    mask) can be warped by the same flow, and their cotangents pulled
    back, without redoing the geometry.
    """

    def __init__(self, flow):
        flow = as_flow(flow)
        _, h, w = flow.shape
        self.shape = (h, w)
        xs, ys = identity_grid(h, w)
        sx = xs + flow[0]
        sy = ys + flow[1]
        x0 = np.floor(sx)
        y0 = np.floor(sy)
        self.fx = sx - x0
        self.fy = sy - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        x1 = x0 + 1
        y1 = y0 + 1
        # corner order: 00, 01 (x+1), 10 (y+1), 11
        corners = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
        self.valid = []
        self.index = []
        for cy, cx in corners:
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            flat = np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
            self.valid.append(ok)
            self.index.append(flat)
        fx, fy = self.fx, self.fy
        self.weights = (
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        )

    def _corner_values(self, data: np.ndarray):
        c = data.shape[0]
        flat = data.reshape(c, -1)
        return [np.where(ok, flat[:, idx], 0.0) for ok, idx in zip(self.valid, self.index)]

    def forward(self, data: np.ndarray) -> np.ndarray:
        """Warp a ``(C, H, W)`` array."""
        _check_same_hw(data, self.fx, "warp")
        v00, v01, v10, v11 = self._corner_values(data)
        w00, w01, w10, w11 = self.weights
        return np.ascontiguousarray(w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)

    def backward(self, data: np.ndarray, cotangent: np.ndarray,
                 need_data_grad: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Pull an output cotangent back to ``(d_flow, d_data)``.

        The flow derivative is the one-sided (floor cell) derivative of
        the piecewise-bilinear interpolant; it is exact away from integer
        sample coordinates.
        """
        v00, v01, v10, v11 = self._corner_values(data)
        fx, fy = self.fx, self.fy
        d_sx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
        d_sy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
        d_flow = np.stack([(cotangent * d_sx).sum(axis=0), (cotangent * d_sy).sum(axis=0)])
        d_data = None
        if need_data_grad:
            c = data.shape[0]
            h, w = self.shape
            n = h * w
            d_data = np.zeros((c, n))
            for wk, ok, idx in zip(self.weights, self.valid, self.index):
                contrib = np.where(ok, wk, 0.0)
                for ch in range(c):
                    # bincount accumulates in index order: deterministic
                    d_data[ch] += np.bincount(idx.ravel(), weights=(contrib * cotangent[ch]).ravel(),
                                              minlength=n)
            d_data = d_data.reshape(data.shape)
        return d_flow, d_data


def warp(image, flow) -> np.ndarray:
    """Bilinear backward warp of ``image`` by ``flow`` with zero padding."""
    image = as_image(image)
    flow = as_flow(flow)
    _check_same_hw(image, flow, "warp")
    return BilinearSampler(flow).forward(image)


def warp_vjp(image, flow, cotangent) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(cotangent * warp(image, flow))`` w.r.t. flow and image."""
    image = as_image(image)
    flow = as_flow(flow)
    _check_same_hw(image, flow, "warp")
    cotangent = np.asarray(cotangent, dtype=np.float64).reshape(image.shape)
    return BilinearSampler(flow).backward(image, cotangent)


def warp_mask(mask, flow) -> np.ndarray:
    mask = as_mask(mask)
    return warp(mask[None], flow)[0]


def warp_mask_vjp(mask, flow, cotangent) -> Tuple[np.ndarray, np.ndarray]:
    mask = as_mask(mask)
    d_flow, d_mask = warp_vjp(mask[None], flow, np.asarray(cotangent)[None])
    return d_flow, d_mask[0]


def _upsample_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    out = np.arange(2 * n, dtype=np.float64)
    src = np.clip((out + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    t = src - i0
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = 2 * n
    t = t.reshape(shape)
    return (1.0 - t) * a + t * b


def upsample2(arr) -> np.ndarray:
    """Bilinear x2 upsampling over the last two axes (half-pixel centers, edge clamp)."""
    arr = np.asarray(arr, dtype=np.float64)
    return _upsample_axis(_upsample_axis(arr, arr.ndim - 2), arr.ndim - 1)


def upsample_flow(flow, factor: int = 2) -> np.ndarray:
    """Upsample a flow by two; displacements are doubled to stay in output pixels."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    return 2.0 * upsample2(as_flow(flow))


def area_downsample(arr, factor: int) -> np.ndarray:
    """Block-mean downsampling over the last two axes."""
    arr = np.asarray(arr, dtype=np.float64)
    if factor == 1:
        return arr.copy()
    h, w = arr.shape[-2:]
    if h % factor or w % factor:
        raise DimensionMismatch(f"{h}x{w} is not divisible by {factor}")
    # fixed-order elementwise accumulation: independent of memory layout
    acc = np.zeros(arr.shape[:-2] + (h // factor, w // factor))
    for i in range(factor):
        for j in range(factor):
            acc += arr[..., i::factor, j::factor]
    return acc / (factor * factor)


def compose_refine(coarse_up, delta) -> np.ndarray:
    coarse_up = as_flow(coarse_up)
    delta = as_flow(delta)
    if coarse_up.shape != delta.shape:
        raise DimensionMismatch(f"flow shapes differ: {coarse_up.shape} vs {delta.shape}")
    return coarse_up + delta


class Extents(NamedTuple):
    h: int
    w: int


def mask_extents(mask, threshold: float = 0.5) -> Extents:
    """Tight bounding-box height and width of ``mask > threshold``."""
    on = as_mask(mask) > threshold
    rows = np.flatnonzero(on.any(axis=1))
    cols = np.flatnonzero(on.any(axis=0))
    if rows.size == 0:
        raise EmptyMask(f"no pixel exceeds threshold {threshold}")
    return Extents(int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def extent_ratio(source: Extents, target: Extents, axis: str = "vertical",
                 convention: str = "sampling") -> float:
    """Per-axis size ratio between the target and source garments.

    ``paper_literal`` gives target/source (h'/h). ``sampling`` gives the
    reciprocal: the source-domain spacing between adjacent output pixels
    when the flow is a backward map from target to source.
    """
    if axis == "vertical":
        src, tgt = source.h, target.h
    elif axis == "horizontal":
        src, tgt = source.w, target.w
    else:
        raise ValueError(f"unknown axis {axis!r}")
    if src <= 0 or tgt <= 0:
        raise ValueError("extents must be positive")
    if convention == "paper_literal":
        return tgt / src
    if convention == "sampling":
        return src / tgt
    raise ValueError(f"unknown ratio convention {convention!r}")


def apply_visibility(warped, vis) -> np.ndarray:
    """Zero out occluded pixels: ``warped * (1 - vis)``."""
    warped = as_image(warped)
    vis = as_mask(vis)
    _check_same_hw(warped, vis, "apply_visibility")
    return warped * (1.0 - vis)


def apply_visibility_vjp(warped, vis, cotangent) -> Tuple[np.ndarray, np.ndarray]:
    """Returns ``(d_warped, d_vis)``; ``d_warped`` is exactly zero where ``vis == 1``."""
    warped = as_image(warped)
    vis = as_mask(vis)
    _check_same_hw(warped, vis, "apply_visibility")
    cotangent = np.asarray(cotangent, dtype=np.float64).reshape(warped.shape)
    d_warped = cotangent * (1.0 - vis)
    d_vis = -(cotangent * warped).sum(axis=0)
    return d_warped, d_vis


def combine_visibility(m_pred, m_hb) -> np.ndarray:
    """Union of predicted body-part visibility and hair/bottom-garment mask."""
    m_pred = as_mask(m_pred)
    m_hb = as_mask(m_hb)
    _check_same_hw(m_pred, m_hb, "combine_visibility")
    return np.maximum(m_pred, m_hb)


def combine_visibility_vjp(m_pred, m_hb, cotangent) -> np.ndarray:
    """Gradient w.r.t. ``m_pred``; ties go to the predicted mask."""
    return np.where(np.asarray(m_pred) >= np.asarray(m_hb), cotangent, 0.0)
