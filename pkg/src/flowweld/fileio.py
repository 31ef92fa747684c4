"""On-disk formats: Netpbm rasters, Middlebury flow, config text, CSV and JSON.

Rasters are stored 8-bit with ``round(255 * v)``; reading divides by 255,
so a write/read cycle is the identity on already-quantized data.
"""

import csv
import dataclasses
import json
import math
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DimensionMismatch, FormatError
from .pyramid import PyramidConfig
from .synth import Scene

PathLike = Union[str, os.PathLike]

FLO_MAGIC = 202021.25


# -- Netpbm ----------------------------------------------------------------------

def quantize8(values) -> np.ndarray:
    """Map [0, 1] floats to the 8-bit codes that would be written to disk."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    return np.clip(np.round(255.0 * v), 0, 255).astype(np.uint8)


def dequantize8(codes) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / 255.0


def roundtrip8(values) -> np.ndarray:
    """Values as they read back after one write."""
    return dequantize8(quantize8(values))


def write_pnm(path: PathLike, data) -> None:
    """Write ``(H, W)``/``(1, H, W)`` as PGM P5 or ``(3, H, W)`` as PPM P6."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        magic, pixels = b"P5", quantize8(arr)
    elif arr.ndim == 3 and arr.shape[0] == 3:
        magic, pixels = b"P6", quantize8(np.moveaxis(arr, 0, -1))
    else:
        raise DimensionMismatch(f"cannot store array of shape {arr.shape} as PGM/PPM")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def _header_tokens(buf: bytes, count: int):
    """Pull ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated Netpbm header")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path: PathLike) -> np.ndarray:
    """Read a binary PGM/PPM as ``(C, H, W)`` float64 in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, offset = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported Netpbm magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    body = np.frombuffer(buf, dtype=np.uint8, count=-1, offset=offset)
    if body.size < w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} pixel bytes, found {body.size}")
    pixels = body[:w * h * c].reshape(h, w, c)
    return dequantize8(np.moveaxis(pixels, -1, 0))


def read_mask(path: PathLike) -> np.ndarray:
    img = read_pnm(path)
    if img.shape[0] != 1:
        raise FormatError(f"{path}: masks must be single-channel PGM")
    return img[0]


# -- Middlebury flow ---------------------------------------------------------------

def write_flo(path: PathLike, flow) -> None:
    """Write a ``(2, H, W)`` flow (dx, dy) in the Middlebury layout."""
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] != 2:
        raise DimensionMismatch(f"flow must be (2, H, W), got {f.shape}")
    _, h, w = f.shape
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.moveaxis(f, 0, -1).astype("<f4").tobytes())


def read_flo(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError(f"{path}: too short for a .flo file")
    magic = np.frombuffer(buf, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic}")
    w, h = (int(v) for v in np.frombuffer(buf, dtype="<i4", count=2, offset=4))
    if w < 1 or h < 1:
        raise FormatError(f"{path}: invalid size {w}x{h}")
    n = 2 * w * h
    if len(buf) - 12 < 4 * n:
        raise FormatError(f"{path}: expected {n} floats after the header")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=12).reshape(h, w, 2)
    return np.moveaxis(data.astype(np.float64), -1, 0).copy()


# -- config text -----------------------------------------------------------------

CONFIG_DOCS = {
    "scales": "pyramid depth N; the coarsest scale is 2**(N-1) times smaller",
    "height": "raster height in pixels; divisible by 2**(scales-1)",
    "width": "raster width in pixels; divisible by 2**(scales-1)",
    "iters": "Adam iterations at every scale (both stages)",
    "alphas": "six comma-separated weights: garment L1, (unused), mask L1, BCE, consistency, regularizer",
    "lr": "Adam step size",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "eps": "Adam denominator floor",
    "upsample_factor": "flow upsampling between scales; only 2 is supported",
    "ratio_convention": "sampling (source/target extents) or paper_literal (target/source)",
    "region": "full (every pixel) or garment (target mask) for the integrity penalty",
    "reduction": "mean or sum over loss terms",
    "loss_variant": "flow regularizer: nipr, so, tv or none",
    "visibility_mode": "oracle (given occluder mask) or fit (optimized visibility logits)",
    "occlusion": "true to multiply the warp by (1 - visibility)",
    "global_stage": "true to run the boundary-alignment stage first",
    "global_smoothness": "second-order smoothness weight in the global stage",
    "seed": "seed recorded with the run; the optimizer itself draws no random numbers",
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "alphas":
            return tuple(float(p) for p in raw.split(",") if p.strip())
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_items(text: str) -> Dict:
    """Parse flat ``key = value`` lines into typed overrides; ``#`` starts a comment."""
    base = PyramidConfig()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(PyramidConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in changes:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        changes[key] = _coerce(key, raw, defaults[key])
    return changes


def parse_config(text: str, base: Optional[PyramidConfig] = None) -> PyramidConfig:
    base = base or PyramidConfig()
    return base.replace(**parse_config_items(text))


def load_config(path: Optional[PathLike]) -> PyramidConfig:
    if path is None:
        return PyramidConfig()
    return parse_config(Path(path).read_text())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def format_config(config: PyramidConfig) -> str:
    """Documented config text that parses back to ``config``."""
    lines = []
    for f in dataclasses.fields(PyramidConfig):
        lines.append(f"# {CONFIG_DOCS[f.name]}")
        lines.append(f"{f.name} = {_format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


# -- CSV and JSON ------------------------------------------------------------------

SERIES_LEAD = ("stage", "scale", "iteration")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_series(path: PathLike, rows: Sequence[Dict]) -> None:
    """Loss series as CSV; columns are the lead keys then every term, ``total`` last."""
    names: List[str] = []
    for row in rows:
        for k in row:
            if k not in SERIES_LEAD and k != "total" and k not in names:
                names.append(k)
    header = list(SERIES_LEAD) + names + ["total"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(row.get(k, "")) for k in header])


def read_series(path: PathLike) -> List[Dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for k, v in row.items():
            if k == "stage":
                parsed[k] = v
            elif k in ("scale", "iteration"):
                parsed[k] = int(v)
            else:
                parsed[k] = float(v) if v != "" else float("nan")
        out.append(parsed)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: PathLike, doc) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path: PathLike):
    with open(path) as fh:
        return json.load(fh)


def build_manifest(command: str, config: Optional[PyramidConfig] = None,
                   provenance: Optional[Dict] = None, seed: Optional[int] = None,
                   outputs: Iterable[str] = (), metrics: Optional[Dict] = None,
                   extra: Optional[Dict] = None) -> Dict:
    """Run manifest: everything needed to reproduce a run, and nothing time-dependent."""
    from . import __version__

    doc = {
        "tool": "flowweld",
        "version": __version__,
        "command": command,
        "seed": seed if seed is not None else (config.seed if config is not None else None),
        "config": config.as_dict() if config is not None else None,
        "provenance": provenance or {},
        "outputs": sorted(outputs),
        "metrics": metrics or {},
    }
    if extra:
        doc.update(extra)
    return doc


# -- scene directories ---------------------------------------------------------------

SCENE_FILES = {
    "source": "source.ppm",
    "source_mask": "source_mask.pgm",
    "target": "target.ppm",
    "target_mask": "target_mask.pgm",
    "visibility": "visibility.pgm",
    "hair_bottom": "hair_bottom.pgm",
}
GT_FLOW_FILE = "gt_flow.flo"
SCENE_MANIFEST = "scene.json"


def save_scene(scene: Scene, out_dir: PathLike) -> List[str]:
    """Write every raster of ``scene`` (and its flow, if any); returns file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for attr, name in SCENE_FILES.items():
        write_pnm(out / name, getattr(scene, attr))
        written.append(name)
    if scene.gt_flow is not None:
        write_flo(out / GT_FLOW_FILE, scene.gt_flow)
        written.append(GT_FLOW_FILE)
    return written


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing scene file: {path}")
    return path


def load_scene(scene_dir: PathLike) -> Scene:
    """Read a scene directory written by :func:`save_scene`."""
    root = Path(scene_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory not found: {root}")
    source = read_pnm(_require(root / SCENE_FILES["source"]))
    target = read_pnm(_require(root / SCENE_FILES["target"]))
    masks = {k: read_mask(_require(root / SCENE_FILES[k]))
             for k in ("source_mask", "target_mask", "visibility", "hair_bottom")}
    shapes = {source.shape[1:], target.shape[1:]} | {m.shape for m in masks.values()}
    if len(shapes) != 1:
        raise DimensionMismatch(f"scene rasters disagree in size: {sorted(shapes)}")
    gt = None
    if (root / GT_FLOW_FILE).is_file():
        gt = read_flo(root / GT_FLOW_FILE)
        if gt.shape[1:] != source.shape[1:]:
            raise DimensionMismatch(f"ground-truth flow is {gt.shape[1:]}, rasters are {source.shape[1:]}")
    provenance = {}
    if (root / SCENE_MANIFEST).is_file():
        provenance = read_json(root / SCENE_MANIFEST).get("provenance", {})
    return Scene(source, masks["source_mask"], target, masks["target_mask"],
                 masks["visibility"], masks["hair_bottom"], gt, provenance)
