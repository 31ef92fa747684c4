"""Dense-flow garment warping with neighbourhood-integrity regularization."""

__version__ = "0.1.0"

from .errors import (AllPointsExcluded, ConfigError, DimensionMismatch, DisjointBand,
                     EmptyMask, FlowWeldError, FormatError, InvalidFraction, InvalidRect,
                     MissingGlobal, NonFiniteGradient, NonFiniteValue, OutOfRaster,
                     WindowTooLarge)
from .flow import (BilinearSampler, apply_visibility, combine_visibility, extent_ratio,
                   mask_extents, upsample_flow, warp, warp_mask)
from .losses import (LossValue, RatioPair, bce_loss, consistency_loss, integrity_violation,
                     l1_loss, nipr_loss, nipr_preserve, so_loss, ssim, tv_loss)
from .pyramid import DEFAULT_ALPHAS, PyramidConfig, adam_step, run_experiment
from .synth import Scene, build_scene
