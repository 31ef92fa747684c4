"""Synthetic garment scenes with known optima.

Three stress cases are generated from a striped (or checkered) base
garment: a uniform rescale with an exact backward flow, a tucked-in
bottom that should be masked rather than squeezed, and a hand-like band
occluding part of the garment.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, NamedTuple, Optional, Tuple

import numpy as np

from . import flow as fl
from .errors import DisjointBand, InvalidFraction, InvalidRect, OutOfRaster

ON_COLOR = (204 / 255, 51 / 255, 51 / 255)
OFF_COLOR = (230 / 255, 230 / 255, 200 / 255)


class Rect(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def slices(self):
        return slice(self.top, self.bottom), slice(self.left, self.right)


class Garment(NamedTuple):
    image: np.ndarray
    mask: np.ndarray
    rect: Rect
    period: int
    orientation: str
    texture: str


@dataclass
class Scene:
    source: np.ndarray
    source_mask: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray
    visibility: np.ndarray
    hair_bottom: np.ndarray
    gt_flow: Optional[np.ndarray] = None
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.source_mask.shape

    def visible_target_mask(self) -> np.ndarray:
        """Target garment mask with occluded pixels removed."""
        occ = fl.combine_visibility(self.visibility, self.hair_bottom)
        return self.target_mask * (1.0 - occ)


def _stripe_colors(seed: Optional[int]):
    if seed is None:
        return np.array(ON_COLOR), np.array(OFF_COLOR)
    rng = np.random.default_rng(seed)
    on = rng.integers(20, 140, size=3) / 255
    off = rng.integers(160, 250, size=3) / 255
    return on, off


def make_striped_garment(height: int, width: int, rect, period: int = 4,
                         orientation: str = "horizontal", texture: str = "stripes",
                         seed: Optional[int] = None) -> Garment:
    """Two-tone stripes (or a checkerboard) filling ``rect``; zero elsewhere."""
    rect = Rect(*rect)
    if period < 2:
        raise InvalidRect(f"stripe period must be >= 2, got {period}")
    if (rect.height < 1 or rect.width < 1 or rect.top < 0 or rect.left < 0
            or rect.bottom > height or rect.right > width):
        raise InvalidRect(f"{rect} does not fit in {height}x{width}")
    if orientation not in ("horizontal", "vertical"):
        raise ValueError(f"unknown orientation {orientation!r}")
    ys, xs = np.mgrid[0:rect.height, 0:rect.width]
    on_rows = (ys % period) < period // 2
    on_cols = (xs % period) < period // 2
    if texture == "stripes":
        on = on_rows if orientation == "horizontal" else on_cols
    elif texture == "checker":
        on = on_rows ^ on_cols
    else:
        raise ValueError(f"unknown texture {texture!r}")
    on_color, off_color = _stripe_colors(seed)
    image = np.zeros((3, height, width))
    mask = np.zeros((height, width))
    rs, cs = rect.slices()
    image[:, rs, cs] = np.where(on[None], on_color[:, None, None], off_color[:, None, None])
    mask[rs, cs] = 1.0
    return Garment(image, mask, rect, period, orientation, texture)


def default_garment(height: int = 64, width: int = 48, period: int = 4,
                    orientation: str = "horizontal", texture: str = "stripes",
                    seed: Optional[int] = None) -> Garment:
    """A garment covering the central ~5/8 x 7/12 of the raster."""
    gh = max(2, int(round(height * 0.625)))
    gw = max(2, int(round(width * 7 / 12)))
    rect = Rect((height - gh) // 2, (width - gw) // 2, gh, gw)
    return make_striped_garment(height, width, rect, period, orientation, texture, seed)


def _provenance(name: str, garment: Garment, seed: Optional[int], **params) -> Dict[str, Any]:
    return {
        "scenario": name,
        "params": dict(params),
        "garment": {
            "rect": list(garment.rect),
            "period": garment.period,
            "orientation": garment.orientation,
            "texture": garment.texture,
            "shape": list(garment.mask.shape),
        },
        "seed": seed,
    }


def scaling_flow(height: int, width: int, center: Tuple[float, float],
                 sy: float, sx: float) -> np.ndarray:
    """Backward flow of a scaling by ``(sy, sx)`` about ``center = (cy, cx)``.

    Output pixel ``p`` samples the source at ``c + (p - c) / s``.
    """
    xs, ys = fl.identity_grid(height, width)
    cy, cx = center
    dy = (ys - cy) * (1.0 / sy - 1.0)
    dx = (xs - cx) * (1.0 / sx - 1.0)
    return np.stack([dx, dy])


def make_scale_scenario(garment: Garment, sy: float, sx: float,
                        seed: Optional[int] = None) -> Scene:
    """Target = source rescaled about the garment centre, with its exact backward flow."""
    if not (0.25 <= sy <= 4 and 0.25 <= sx <= 4):
        raise ValueError(f"scale factors must lie in [0.25, 4], got ({sy}, {sx})")
    h, w = garment.mask.shape
    rect = garment.rect
    cy = rect.top + (rect.height - 1) / 2.0
    cx = rect.left + (rect.width - 1) / 2.0
    half_h = sy * rect.height / 2.0
    half_w = sx * rect.width / 2.0
    if cy - half_h < -0.5 or cy + half_h > h - 0.5 or cx - half_w < -0.5 or cx + half_w > w - 0.5:
        raise OutOfRaster(f"scaled garment ({sy}, {sx}) leaves the {h}x{w} raster")
    gt = scaling_flow(h, w, (cy, cx), sy, sx)
    target = fl.warp(garment.image, gt)
    target_mask = (fl.warp_mask(garment.mask, gt) > 0.5).astype(np.float64)
    zeros = np.zeros((h, w))
    return Scene(garment.image.copy(), garment.mask.copy(), target, target_mask,
                 zeros, zeros.copy(), gt,
                 _provenance("scale", garment, seed, sy=sy, sx=sx))


def make_tuckin_scenario(garment: Garment, crop_fraction: float = 0.25,
                         seed: Optional[int] = None) -> Scene:
    """Bottom ``crop_fraction`` of the garment hidden under a bottom garment.

    The correct explanation is occlusion, not squeezing, so no ground-truth
    flow is attached.
    """
    if not 0 < crop_fraction < 0.5:
        raise InvalidFraction(f"crop fraction must be in (0, 0.5), got {crop_fraction}")
    h, w = garment.mask.shape
    rect = garment.rect
    crop = int(round(crop_fraction * rect.height))
    band = np.zeros((h, w))
    band[rect.bottom - crop:rect.bottom, rect.left:rect.right] = 1.0
    target_mask = garment.mask * (1.0 - band)
    target = garment.image * (1.0 - band)
    return Scene(garment.image.copy(), garment.mask.copy(), target, target_mask,
                 np.zeros((h, w)), band, None,
                 _provenance("tuckin", garment, seed, crop_fraction=crop_fraction))


def make_hand_occlusion_scenario(garment: Garment, band, seed: Optional[int] = None) -> Scene:
    """A rectangular body-part band in front of the garment.

    ``band`` is ``(top, left, height, width)``. The visibility target is the
    band indicator and the target garment is zero inside it.
    """
    band = Rect(*band)
    h, w = garment.mask.shape
    vis = np.zeros((h, w))
    rs, cs = band.slices()
    vis[max(rs.start, 0):min(rs.stop, h), max(cs.start, 0):min(cs.stop, w)] = 1.0
    if not np.any(vis * garment.mask > 0):
        raise DisjointBand(f"band {band} does not touch the garment {garment.rect}")
    target = garment.image * (1.0 - vis)
    return Scene(garment.image.copy(), garment.mask.copy(), target, garment.mask.copy(),
                 vis, np.zeros((h, w)), None,
                 _provenance("hand", garment, seed, band=list(band)))


SCENARIOS = ("scale", "tuckin", "hand")


def default_hand_band(garment: Garment) -> Rect:
    """A horizontal band across the middle of the garment, wider than it."""
    rect = garment.rect
    bh = max(2, rect.height // 5)
    top = rect.top + (rect.height - bh) // 2
    left = max(0, rect.left - 3)
    right = min(garment.mask.shape[1], rect.right + 3)
    return Rect(top, left, bh, right - left)


def build_scene(name: str, height: int = 64, width: int = 48, seed: Optional[int] = None,
                period: int = 4, orientation: str = "horizontal", texture: str = "stripes",
                **params) -> Scene:
    """Construct a named scenario on the default garment."""
    garment = default_garment(height, width, period, orientation, texture, seed)
    if name == "scale":
        return make_scale_scenario(garment, params.get("sy", 1.0), params.get("sx", 1.0), seed)
    if name == "tuckin":
        return make_tuckin_scenario(garment, params.get("crop_fraction", 0.25), seed)
    if name == "hand":
        band = params.get("band") or default_hand_band(garment)
        return make_hand_occlusion_scenario(garment, band, seed)
    raise ValueError(f"unknown scenario {name!r}")
