"""Coarse-to-fine direct optimization of global and local flow fields.

The global stage is texture-agnostic: it only aligns the warped garment
mask with the target mask. The local stage fits the garment texture under
the visibility mask, is coupled to the global flows through the
consistency term, and is regularized by NIPR, SO or TV.

Each scale is initialized from the 2x-upsampled result of the coarser
scale and refined with Adam.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import flow as fl
from . import losses as ls
from .errors import ConfigError, EmptyMask, MissingGlobal, NonFiniteGradient
from .synth import Scene

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (1.0, 0.2, 2.0, 2.0, 1.0, 1.0)
LOSS_VARIANTS = ("nipr", "so", "tv", "none")
VIS_INIT_LOGIT = -2.0
# Step size for direct per-pixel flow optimization at desk scale. The default
# lr suits network weights; applied to raw displacements it moves a pixel by at
# most iters * lr, too little to converge. This is the smallest of
# (0.005, 0.01, 0.02, 0.05) at which the default objective fits the 0.5x scale
# scene to garment L1 < 1e-3.
DESK_LR = 0.02


@dataclass(frozen=True)
class PyramidConfig:
    scales: int = 5
    height: int = 64
    width: int = 48
    iters: int = 500
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    upsample_factor: int = 2
    ratio_convention: str = "sampling"
    region: str = "full"
    reduction: str = "mean"
    loss_variant: str = "nipr"
    visibility_mode: str = "oracle"
    occlusion: bool = True
    global_stage: bool = True
    global_smoothness: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        self.validate()

    def validate(self):
        if self.scales < 1:
            raise ConfigError("scales must be >= 1")
        div = 2 ** (self.scales - 1)
        if self.height % div or self.width % div:
            raise ConfigError(f"{self.height}x{self.width} is not divisible by 2**(scales-1) = {div}")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if len(self.alphas) != 6 or any(a < 0 for a in self.alphas):
            raise ConfigError("alphas must be six non-negative weights")
        if self.upsample_factor != 2:
            raise ConfigError("upsample_factor must be 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam parameters")
        if self.ratio_convention not in ("sampling", "paper_literal"):
            raise ConfigError(f"unknown ratio_convention {self.ratio_convention!r}")
        if self.region not in ("full", "garment"):
            raise ConfigError(f"unknown region {self.region!r}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss_variant {self.loss_variant!r}")
        if self.visibility_mode not in ("oracle", "fit"):
            raise ConfigError(f"unknown visibility_mode {self.visibility_mode!r}")
        if self.global_smoothness < 0:
            raise ConfigError("global_smoothness must be non-negative")

    def replace(self, **changes) -> "PyramidConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["alphas"] = list(self.alphas)
        return d

    def scale_factors(self) -> List[int]:
        """Downsampling factor of each scale, coarsest first."""
        return [2 ** (self.scales - 1 - i) for i in range(self.scales)]


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64),
                   **hyper)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray
              ) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("non-finite gradient passed to Adam")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, dataclasses.replace(state, m=m, v=v, t=t)


def _adam_for(config: PyramidConfig, params: np.ndarray) -> AdamState:
    return AdamState.zeros_like(params, lr=config.lr, beta1=config.beta1,
                                beta2=config.beta2, eps=config.eps)


# -- per-scale data ---------------------------------------------------------------

@dataclass
class ScaleData:
    factor: int
    source: np.ndarray
    source_mask: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray
    visible_target_mask: np.ndarray
    visibility: np.ndarray
    hair_bottom: np.ndarray
    ratio: Optional[ls.RatioPair]
    region: Optional[np.ndarray]


def scale_ratio(source_mask: np.ndarray, target_mask: np.ndarray,
                convention: str = "sampling") -> Optional[ls.RatioPair]:
    """Extent ratios of two masks, or None if either is empty after thresholding."""
    try:
        es = fl.mask_extents(source_mask)
        et = fl.mask_extents(target_mask)
    except EmptyMask:
        return None
    return ls.RatioPair(fl.extent_ratio(es, et, "vertical", convention),
                        fl.extent_ratio(es, et, "horizontal", convention), convention)


def pyramid_levels(scene: Scene, config: PyramidConfig) -> List[ScaleData]:
    levels = []
    visible = scene.visible_target_mask()
    for factor in config.scale_factors():
        def down(a):
            return fl.area_downsample(a, factor)

        src_mask = down(scene.source_mask)
        tgt_mask = down(scene.target_mask)
        ratio = scale_ratio(src_mask, tgt_mask, config.ratio_convention)
        if ratio is None:
            log.warning("mask empties at downsampling factor %d; preserve term skipped", factor)
        region = None
        if config.region == "garment":
            region = (tgt_mask > 0.5).astype(np.float64)
        levels.append(ScaleData(factor, down(scene.source), src_mask, down(scene.target), tgt_mask,
                                down(visible), down(scene.visibility), down(scene.hair_bottom),
                                ratio, region))
    return levels


def _check_scene(scene: Scene, config: PyramidConfig):
    if scene.shape != (config.height, config.width):
        raise ConfigError(f"scene is {scene.shape[0]}x{scene.shape[1]} but config expects "
                          f"{config.height}x{config.width}")
    if not np.any(scene.source_mask > 0.5):
        raise EmptyMask("source garment mask is empty")
    if not np.any(scene.target_mask > 0.5):
        raise EmptyMask("target garment mask is empty")


def _regularize(variant: str, f: np.ndarray, level: ScaleData, reduction: str) -> ls.LossValue:
    if variant == "nipr" and level.ratio is None:
        return ls.so_loss(f, reduction)
    return ls.regularizer(variant, f, level.ratio, level.region, reduction)


# -- results --------------------------------------------------------------------

@dataclass
class StageResult:
    stage: str
    flows: List[np.ndarray]
    init_flows: List[np.ndarray]
    series: List[Dict[str, float]]
    visibility: Optional[np.ndarray] = None
    visibilities: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    wall_clock: float = 0.0

    @property
    def flow(self) -> np.ndarray:
        return self.flows[-1]


def _finite(value: float, grad: np.ndarray, what: str):
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite loss or gradient in {what}")


# -- global stage -------------------------------------------------------------------

def global_objective(f: np.ndarray, level: ScaleData, smoothness: float,
                     reduction: str = "mean") -> Tuple[Dict[str, float], np.ndarray]:
    """Mask-only alignment: L1(warped mask, target mask) + smoothness * SO."""
    sampler = fl.BilinearSampler(f)
    wm = sampler.forward(level.source_mask[None])
    l1 = ls.l1_loss(wm[0], level.target_mask)
    so = ls.so_loss(f, reduction)
    d_flow, _ = sampler.backward(level.source_mask[None], l1.grad[None], need_data_grad=False)
    grad = d_flow + smoothness * so.grad
    terms = {"mask_l1": l1.value, "regularizer": so.value,
             "total": l1.value + smoothness * so.value}
    return terms, grad


def optimize_global(scene: Scene, config: PyramidConfig) -> StageResult:
    """Fit the texture-agnostic global flow pyramid to the target mask."""
    _check_scene(scene, config)
    levels = pyramid_levels(scene, config)
    t0 = time.perf_counter()
    flows, inits, series = [], [], []
    f = None
    for scale, level in enumerate(levels):
        h, w = level.source_mask.shape
        f = fl.zero_flow(h, w) if f is None else fl.compose_refine(fl.upsample_flow(f),
                                                                   fl.zero_flow(h, w))
        inits.append(f.copy())
        state = _adam_for(config, f)
        for it in range(config.iters):
            terms, grad = global_objective(f, level, config.global_smoothness, config.reduction)
            _finite(terms["total"], grad, "global stage")
            series.append({"stage": "global", "scale": scale, "iteration": it, **terms})
            f, state = adam_step(state, f, grad)
        flows.append(f.copy())
    return StageResult("global", flows, inits, series, wall_clock=time.perf_counter() - t0)


# -- local stage ------------------------------------------------------------------

LOCAL_TERMS = ("garment_l1", "mask_l1", "bce", "consistency", "regularizer")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LocalEval:
    terms: Dict[str, float]
    grad_flow: np.ndarray
    grad_logits: Optional[np.ndarray]
    output: np.ndarray
    visibility: np.ndarray
    m_pred: np.ndarray
    warped_mask: np.ndarray


def local_objective(f: np.ndarray, level: ScaleData, config: PyramidConfig,
                    global_mask: Optional[np.ndarray] = None,
                    logits: Optional[np.ndarray] = None) -> LocalEval:
    """Weighted warping objective at one scale, with gradients.

    ``global_mask`` is the garment mask warped by the global flow at this
    scale (needed when the consistency weight is non-zero). ``logits``
    parameterizes the predicted visibility in fit mode.
    """
    a1, _a2, a3, a4, a5, a6 = config.alphas
    h, w = level.source_mask.shape
    fit = config.occlusion and config.visibility_mode == "fit"
    if config.occlusion:
        m_pred = _sigmoid(logits) if fit else level.visibility
        m_vis = fl.combine_visibility(m_pred, level.hair_bottom)
    else:
        m_pred = np.zeros((h, w))
        m_vis = m_pred
    keep = 1.0 - m_vis

    sampler = fl.BilinearSampler(f)
    warped = sampler.forward(level.source)
    out = warped * keep
    wm = sampler.forward(level.source_mask[None])[0]
    vm = wm * keep

    garment = ls.l1_loss(out, level.target)
    mask = ls.l1_loss(vm, level.visible_target_mask)
    terms = {"garment_l1": garment.value, "mask_l1": mask.value, "bce": 0.0,
             "consistency": 0.0, "regularizer": 0.0}

    d_out = a1 * garment.grad
    d_warped = d_out * keep
    d_vis = -(d_out * warped).sum(axis=0)
    d_vm = a3 * mask.grad
    d_wm = d_vm * keep
    d_vis -= d_vm * wm

    if a5 > 0:
        if global_mask is None:
            raise MissingGlobal("consistency weight is non-zero but no global flow was given")
        con = ls.consistency_loss(wm, global_mask)
        terms["consistency"] = con.value
        d_wm = d_wm + a5 * con.grad
    elif global_mask is not None:
        terms["consistency"] = ls.consistency_loss(wm, global_mask).value

    d_flow, _ = sampler.backward(level.source, d_warped, need_data_grad=False)
    d_flow_m, _ = sampler.backward(level.source_mask[None], d_wm[None], need_data_grad=False)
    d_flow = d_flow + d_flow_m

    reg = _regularize(config.loss_variant, f, level, config.reduction)
    terms["regularizer"] = reg.value
    d_flow = d_flow + a6 * reg.grad

    d_logits = None
    if fit:
        bce = ls.bce_loss(m_pred, level.visibility)
        terms["bce"] = bce.value
        d_pred = fl.combine_visibility_vjp(m_pred, level.hair_bottom, d_vis) + a4 * bce.grad
        d_logits = d_pred * m_pred * (1.0 - m_pred)

    terms["total"] = (a1 * terms["garment_l1"] + a3 * terms["mask_l1"] + a4 * terms["bce"]
                      + a5 * terms["consistency"] + a6 * terms["regularizer"])
    return LocalEval(terms, d_flow, d_logits, out, m_vis, m_pred, wm)


def optimize_local(scene: Scene, global_result: Optional[StageResult],
                   config: PyramidConfig) -> StageResult:
    """Fit the texture-aware local flow pyramid (and visibility in fit mode)."""
    _check_scene(scene, config)
    if config.alphas[4] > 0 and global_result is None:
        raise MissingGlobal("consistency weight is non-zero but no global stage was supplied")
    levels = pyramid_levels(scene, config)
    fit = config.occlusion and config.visibility_mode == "fit"
    t0 = time.perf_counter()
    flows, inits, series, vis_levels = [], [], [], []
    f = None
    z = None
    ev = None
    for scale, level in enumerate(levels):
        h, w = level.source_mask.shape
        f = fl.zero_flow(h, w) if f is None else fl.compose_refine(fl.upsample_flow(f),
                                                                   fl.zero_flow(h, w))
        inits.append(f.copy())
        if fit:
            z = np.full((h, w), VIS_INIT_LOGIT) if z is None else fl.upsample2(z)
        global_mask = None
        if global_result is not None:
            global_mask = fl.warp_mask(level.source_mask, global_result.flows[scale])
        state = _adam_for(config, f)
        zstate = _adam_for(config, z) if fit else None
        for it in range(config.iters):
            ev = local_objective(f, level, config, global_mask, z)
            _finite(ev.terms["total"], ev.grad_flow, "local stage")
            series.append({"stage": "local", "scale": scale, "iteration": it, **ev.terms})
            f, state = adam_step(state, f, ev.grad_flow)
            if fit:
                z, zstate = adam_step(zstate, z, ev.grad_logits)
        flows.append(f.copy())
        vis_levels.append(_sigmoid(z) if fit else level.visibility.copy())
    visibility = vis_levels[-1] if config.occlusion else None
    return StageResult("local", flows, inits, series, visibility, vis_levels, z,
                       wall_clock=time.perf_counter() - t0)


# -- experiment -------------------------------------------------------------------

@dataclass
class ExperimentReport:
    config: PyramidConfig
    global_result: Optional[StageResult]
    local_result: StageResult
    metrics: Dict[str, float]
    warped: np.ndarray
    visibility: np.ndarray
    provenance: Dict = field(default_factory=dict)

    def series(self) -> List[Dict[str, float]]:
        out = []
        if self.global_result is not None:
            out.extend(self.global_result.series)
        out.extend(self.local_result.series)
        return out


def final_metrics(scene: Scene, config: PyramidConfig, local_flow: np.ndarray,
                  global_flow: Optional[np.ndarray], logits: Optional[np.ndarray] = None
                  ) -> Tuple[Dict, LocalEval]:
    """Full-resolution loss terms and evaluation metrics for a finished run."""
    level = pyramid_levels(scene, config.replace(scales=1))[0]
    global_mask = fl.warp_mask(level.source_mask, global_flow) if global_flow is not None else None
    ev = local_objective(local_flow, level, config, global_mask, logits)
    metrics = dict(ev.terms)
    region = (scene.target_mask > 0.5).astype(np.float64)
    if level.ratio is not None:
        metrics["integrity_violation"] = ls.integrity_violation(local_flow, level.ratio, region)
        metrics["ratio_vertical"] = level.ratio.vertical
        metrics["ratio_horizontal"] = level.ratio.horizontal
    metrics["mask_alignment_l1"] = ev.terms["mask_l1"]
    metrics["local_global_mask_l1"] = ev.terms["consistency"] if global_mask is not None else float("nan")
    try:
        metrics["ssim"] = ls.ssim(ev.output, scene.target)
    except ls.WindowTooLarge:
        metrics["ssim"] = float("nan")
    return metrics, ev


def run_experiment(scene: Scene, config: PyramidConfig) -> ExperimentReport:
    """Global stage (if enabled) followed by the local stage, plus final metrics."""
    config.validate()
    _check_scene(scene, config)
    global_result = optimize_global(scene, config) if config.global_stage else None
    local_result = optimize_local(scene, global_result, config)
    metrics, ev = final_metrics(scene, config, local_result.flow,
                                global_result.flow if global_result else None,
                                local_result.logits)
    return ExperimentReport(config, global_result, local_result, metrics, ev.output,
                            ev.visibility, dict(scene.provenance))


ABLATIONS = {
    "loc": dict(global_stage=False, occlusion=False, loss_variant="so"),
    "loc+glob": dict(global_stage=True, occlusion=False, loss_variant="so"),
    "loc+glob+occ": dict(global_stage=True, occlusion=True, loss_variant="so"),
    "full": dict(global_stage=True, occlusion=True, loss_variant="nipr"),
}


def desk_config(**changes) -> PyramidConfig:
    """Default config with :data:`DESK_LR`, plus any overrides."""
    return PyramidConfig(**dict({"lr": DESK_LR}, **changes))


def ablation_config(base: PyramidConfig, name: str) -> PyramidConfig:
    """``base`` with the component toggles of one ablation arm."""
    try:
        changes = ABLATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}") from None
    if name == "loc":
        changes = dict(changes, alphas=base.alphas[:4] + (0.0,) + base.alphas[5:])
    return base.replace(**changes)
