"""Central finite differences and a seeded gradient-check harness.

Each differentiable operator in :mod:`flowweld.flow` and
:mod:`flowweld.losses` is wrapped by :func:`builtin_checks` as a scalar
function of a flat parameter vector, together with an exclusion rule that
skips coordinates sitting too close to a kink of the piecewise-linear
pieces (bilinear cell edges, L1 at equality, the integrity penalty at
``D == r``).
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import flow as fl
from . import losses as ls
from .errors import AllPointsExcluded, NonFiniteValue

KINK_MARGIN = 1e-2

Exclusion = Callable[[np.ndarray, int], Optional[str]]


@dataclass
class ScalarFunction:
    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    exclusion: Optional[Exclusion] = None
    name: str = ""

    def __call__(self, x: np.ndarray) -> float:
        return self.value(x)


@dataclass
class GradCheckReport:
    name: str
    checked: int
    max_rel_error: float
    tol: float
    failures: List[Tuple[int, float, float]] = field(default_factory=list)
    excluded: Dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= self.tol

    @property
    def excluded_count(self) -> int:
        return sum(self.excluded.values())

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (f"{self.name:<16} {status}  checked={self.checked}"
                f" excluded={self.excluded_count} max_rel_err={self.max_rel_error:.3e}")
        if self.failures:
            idx, a, n = self.failures[0]
            line += f"  first_failure=(index={idx}, analytic={a:.6e}, numeric={n:.6e})"
        return line


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


STEP_GRID = 2.0 ** -30


def dyadic_step(h: float) -> float:
    """``h`` rounded to a multiple of 2**-30 (at least one unit)."""
    return max(1.0, round(h / STEP_GRID)) * STEP_GRID


def fd_gradient(fn, point, index: int, h: float = 1e-5) -> float:
    """Central difference of ``fn`` along coordinate ``index``.

    The step is snapped to a dyadic value and the divisor is the step
    actually realized in floating point, so that coordinates on a dyadic
    grid are perturbed exactly and flat pieces give exactly zero.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    h = dyadic_step(h)
    x = np.array(point, dtype=np.float64, copy=True)
    orig = x.flat[index]
    xp = orig + h
    xm = orig - h
    x.flat[index] = xp
    fp = fn(x)
    x.flat[index] = xm
    fm = fn(x)
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NonFiniteValue(f"non-finite evaluation at index {index}")
    return (fp - fm) / (xp - xm)


def grad_check(fn: ScalarFunction, point, sample_count: int = 100, h: float = 1e-5,
               tol: float = 1e-5, exclusion: Optional[Exclusion] = None,
               seed: int = 0, gradient: Optional[np.ndarray] = None) -> GradCheckReport:
    """Compare the analytic gradient with central differences on sampled coordinates.

    Coordinates are drawn from a seeded permutation; excluded ones are
    skipped (and tallied by reason) until ``sample_count`` are checked or
    the coordinates run out.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    point = np.asarray(point, dtype=np.float64)
    exclusion = exclusion or fn.exclusion
    analytic = fn.gradient(point) if gradient is None else gradient
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    order = np.random.default_rng(seed).permutation(point.size)
    report = GradCheckReport(fn.name, 0, 0.0, tol)
    for index in order:
        if report.checked >= sample_count:
            break
        index = int(index)
        if exclusion is not None:
            reason = exclusion(point, index)
            if reason:
                report.excluded[reason] = report.excluded.get(reason, 0) + 1
                continue
        numeric = fd_gradient(fn.value, point, index, h)
        err = relative_error(analytic[index], numeric)
        report.checked += 1
        report.max_rel_error = max(report.max_rel_error, err)
        if err > tol:
            report.failures.append((index, float(analytic[index]), float(numeric)))
    if report.checked == 0:
        raise AllPointsExcluded(f"{fn.name or 'function'}: every sampled coordinate was excluded")
    return report


# -- exclusion rules ---------------------------------------------------------

def _near_integer(v: float) -> bool:
    return abs(v - np.rint(v)) < KINK_MARGIN


def _cell_edge(flow: np.ndarray, comp: int, y: int, x: int) -> bool:
    base = x if comp == 0 else y
    return _near_integer(base + flow[comp, y, x])


def _so_near_kink(flow: np.ndarray, comp: int, y: int, x: int) -> bool:
    _, h, w = flow.shape
    f = flow[comp]
    for cy in (y - 1, y, y + 1):
        if 1 <= cy <= h - 2 and abs(f[cy - 1, x] + f[cy + 1, x] - 2 * f[cy, x]) < KINK_MARGIN:
            return True
    for cx in (x - 1, x, x + 1):
        if 1 <= cx <= w - 2 and abs(f[y, cx - 1] + f[y, cx + 1] - 2 * f[y, cx]) < KINK_MARGIN:
            return True
    return False


def _tv_near_kink(flow: np.ndarray, comp: int, y: int, x: int) -> bool:
    _, h, w = flow.shape
    f = flow[comp]
    pairs = [((y - 1, x), (y, x)), ((y, x), (y + 1, x)),
             ((y, x - 1), (y, x)), ((y, x), (y, x + 1))]
    for (ay, ax), (by, bx) in pairs:
        if 0 <= ay < h and 0 <= by < h and 0 <= ax < w and 0 <= bx < w:
            if abs(f[by, bx] - f[ay, ax]) < KINK_MARGIN:
                return True
    return False


def _preserve_near_kink(flow: np.ndarray, r: ls.RatioPair, comp: int, y: int, x: int) -> bool:
    _, h, w = flow.shape
    if comp == 1:
        rr = r.vertical
        nbrs = [(y - 1, x), (y + 1, x)]
    else:
        rr = r.horizontal
        nbrs = [(y, x - 1), (y, x + 1)]
    for ny, nx in nbrs:
        if not (0 <= ny < h and 0 <= nx < w):
            continue
        d = abs((ny - y if comp == 1 else nx - x) + flow[comp, ny, nx] - flow[comp, y, x])
        if abs(d - rr) < KINK_MARGIN or d < KINK_MARGIN:
            return True
    return False


def _unflat(index: int, shape) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(index, shape))


# -- test problems -------------------------------------------------------------

def smooth_flow(rng: np.random.Generator, height: int, width: int,
                amplitude: float = 2.0, noise: float = 0.3) -> np.ndarray:
    """Random sum of low-frequency sinusoids plus a little white noise."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((2, height, width))
    for c in range(2):
        for _ in range(3):
            ky, kx = rng.uniform(0.1, 0.6, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[c] += amplitude / 3 * np.sin(ky * ys + kx * xs + phase)
    return out + noise * rng.standard_normal(out.shape)


def quantize(x, levels: int = 1024) -> np.ndarray:
    return np.round(np.asarray(x) * levels) / levels


def ramp_image(rng: np.random.Generator, channels: int, height: int, width: int) -> np.ndarray:
    """Random texture strictly increasing along both axes.

    Neighbouring pixels always differ by at least 0.005, so bilinear
    slopes never cancel and stay well above the difference-quotient noise.
    """
    step = 0.9 / (height + width)
    gx = np.cumsum(rng.uniform(0.25, 1.0, size=(channels, 1, width)) * step, axis=2)
    gy = np.cumsum(rng.uniform(0.25, 1.0, size=(channels, height, 1)) * step, axis=1)
    return 0.02 + gx + gy


def _flow_cell_or(extra: Optional[Callable] = None):
    """Exclusion for parameters laid out as a flattened flow (optionally followed by more)."""

    def rule(shape):
        n = int(np.prod(shape))

        def exclude(point: np.ndarray, index: int) -> Optional[str]:
            if index >= n:
                return None
            f = point[:n].reshape(shape)
            comp, y, x = _unflat(index, shape)
            if _cell_edge(f, comp, y, x):
                return "cell boundary"
            if extra is not None:
                return extra(point, f, y, x)
            return None

        return exclude

    return rule


def builtin_checks(seed: int = 0, height: int = 20, width: int = 16
                   ) -> Dict[str, Tuple[ScalarFunction, np.ndarray]]:
    """Scalar test problems for every operator that carries an adjoint."""
    rng = np.random.default_rng(seed)
    fshape = (2, height, width)
    nf = int(np.prod(fshape))
    img = ramp_image(rng, 3, height, width)
    weights = rng.uniform(0.5, 1.5, size=(3, height, width))
    mask = ramp_image(rng, 1, height, width)[0]
    # flows and ratios on a 2**-10 grid keep piecewise-linear losses exact under perturbation
    flow0 = quantize(smooth_flow(rng, height, width))
    flow_g = quantize(smooth_flow(rng, height, width))
    vis0 = rng.uniform(0, 0.9, size=(height, width))
    ratio = ls.RatioPair(*quantize(rng.uniform(0.6, 1.6, size=2), 64))
    checks = {}

    # weighted sums are centred on their value at the base point so the
    # total stays near zero and rounding of the sum does not swamp the slope
    ref_warp = fl.warp(img, flow0)

    # warp: weighted sum of the output, parameters = flow then image
    def warp_value(x):
        out = fl.warp(x[nf:].reshape(img.shape), x[:nf].reshape(fshape))
        return float(np.sum(weights * (out - ref_warp)))

    def warp_grad(x):
        d_flow, d_img = fl.warp_vjp(x[nf:].reshape(img.shape), x[:nf].reshape(fshape), weights)
        return np.concatenate([d_flow.ravel(), d_img.ravel()])

    checks["warp"] = (ScalarFunction(warp_value, warp_grad, _flow_cell_or()(fshape), "warp"),
                      np.concatenate([flow0.ravel(), img.ravel()]))

    ref_vis = fl.apply_visibility(ref_warp, vis0)

    # apply_visibility after warp, parameters = flow then visibility mask
    def vis_value(x):
        warped = fl.warp(img, x[:nf].reshape(fshape))
        out = fl.apply_visibility(warped, x[nf:].reshape(height, width))
        return float(np.sum(weights * (out - ref_vis)))

    def vis_grad(x):
        f = x[:nf].reshape(fshape)
        vis = x[nf:].reshape(height, width)
        warped = fl.warp(img, f)
        d_warped, d_vis = fl.apply_visibility_vjp(warped, vis, weights)
        d_flow, _ = fl.warp_vjp(img, f, d_warped)
        return np.concatenate([d_flow.ravel(), d_vis.ravel()])

    checks["apply_visibility"] = (
        ScalarFunction(vis_value, vis_grad, _flow_cell_or()(fshape), "apply_visibility"),
        np.concatenate([flow0.ravel(), vis0.ravel()]))

    # l1 between the warped garment and a target offset from it by +-0.015
    signs = rng.choice([-1.0, 1.0], size=(1, height, width))
    target = np.clip(ref_warp + 0.015 * signs, 0.0, 1.0)

    def l1_extra(point, f, y, x):
        out = fl.warp(img, f)
        if np.any(np.abs(out[:, y, x] - target[:, y, x]) < KINK_MARGIN):
            return "l1 kink"
        return None

    def l1_value(x):
        return ls.l1_loss(fl.warp(img, x.reshape(fshape)), target).value

    def l1_grad(x):
        f = x.reshape(fshape)
        out = fl.warp(img, f)
        g = ls.l1_loss(out, target).grad
        return fl.warp_vjp(img, f, g)[0].ravel()

    checks["l1"] = (ScalarFunction(l1_value, l1_grad, _flow_cell_or(l1_extra)(fshape), "l1"),
                    flow0.ravel().copy())

    # bce on a probability field kept away from the clamp
    bce_target = (rng.uniform(size=(height, width)) > 0.5).astype(np.float64)
    checks["bce"] = (
        ScalarFunction(lambda x: ls.bce_loss(x.reshape(height, width), bce_target).value,
                       lambda x: ls.bce_loss(x.reshape(height, width), bce_target).grad.ravel(),
                       None, "bce"),
        rng.uniform(0.1, 0.9, size=height * width))

    def so_excl(point, index):
        comp, y, x = _unflat(index, fshape)
        return "so kink" if _so_near_kink(point.reshape(fshape), comp, y, x) else None

    checks["so"] = (
        ScalarFunction(lambda x: ls.so_loss(x.reshape(fshape)).value,
                       lambda x: ls.so_loss(x.reshape(fshape)).grad.ravel(), so_excl, "so"),
        flow0.ravel().copy())

    def preserve_excl(point, index):
        comp, y, x = _unflat(index, fshape)
        return "D=r kink" if _preserve_near_kink(point.reshape(fshape), ratio, comp, y, x) else None

    checks["nipr_preserve"] = (
        ScalarFunction(lambda x: ls.nipr_preserve(x.reshape(fshape), ratio).value,
                       lambda x: ls.nipr_preserve(x.reshape(fshape), ratio).grad.ravel(),
                       preserve_excl, "nipr_preserve"),
        flow0.ravel().copy())

    def nipr_excl(point, index):
        return so_excl(point, index) or preserve_excl(point, index)

    checks["nipr"] = (
        ScalarFunction(lambda x: ls.nipr_loss(x.reshape(fshape), ratio).value,
                       lambda x: ls.nipr_loss(x.reshape(fshape), ratio).grad.ravel(),
                       nipr_excl, "nipr"),
        flow0.ravel().copy())

    warped_g = fl.warp_mask(mask, flow_g)

    def con_extra(point, f, y, x):
        if abs(fl.warp_mask(mask, f)[y, x] - warped_g[y, x]) < KINK_MARGIN:
            return "l1 kink"
        return None

    def con_value(x):
        return ls.consistency_loss(fl.warp_mask(mask, x.reshape(fshape)), warped_g).value

    def con_grad(x):
        f = x.reshape(fshape)
        g = ls.consistency_loss(fl.warp_mask(mask, f), warped_g).grad
        return fl.warp_mask_vjp(mask, f, g)[0].ravel()

    checks["consistency"] = (
        ScalarFunction(con_value, con_grad, _flow_cell_or(con_extra)(fshape), "consistency"),
        flow0.ravel().copy())

    def tv_excl(point, index):
        comp, y, x = _unflat(index, fshape)
        return "tv kink" if _tv_near_kink(point.reshape(fshape), comp, y, x) else None

    checks["tv"] = (
        ScalarFunction(lambda x: ls.tv_loss(x.reshape(fshape)).value,
                       lambda x: ls.tv_loss(x.reshape(fshape)).grad.ravel(), tv_excl, "tv"),
        flow0.ravel().copy())

    return checks


CHECKED_OPS = ("warp", "apply_visibility", "l1", "bce", "so", "nipr_preserve",
               "nipr", "consistency", "tv")


def run_suite(seed: int = 0, sample_count: int = 100, h: float = 1e-5, tol: float = 1e-5,
              height: int = 20, width: int = 16, fault: Optional[str] = None,
              ops=CHECKED_OPS) -> List[GradCheckReport]:
    """Run :func:`grad_check` on every built-in problem.

    ``fault`` names an operator whose analytic gradient is doubled, to
    confirm the harness catches a broken adjoint.
    """
    checks = builtin_checks(seed, height, width)
    if fault is not None and fault not in checks:
        raise ValueError(f"unknown operation {fault!r}")
    reports = []
    for i, op in enumerate(ops):
        fn, point = checks[op]
        grad = fn.gradient(point)
        if op == fault:
            grad = 2.0 * grad
        reports.append(grad_check(fn, point, sample_count, h, tol, seed=seed + i, gradient=grad))
    return reports
