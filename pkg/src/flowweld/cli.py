"""Command-line entry point: ``flowweld {synth,warp,optimize,compare,gradcheck}``.

Exit codes: 0 success, 1 verification failure, 2 input contract violation,
3 I/O error.
"""

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from . import fileio as io
from . import flow as fl
from . import gradcheck as gc
from . import pyramid as pm
from . import synth
from .errors import ConfigError, FlowWeldError, FormatError

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONTRACT = 2
EXIT_IO = 3

THREADS_ENV = "FLOWWELD_THREADS"


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _err(msg: str):
    print(f"flowweld: {msg}", file=sys.stderr)


# -- synth ---------------------------------------------------------------------------

def _band(text: str):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("band is top,left,height,width")
    return synth.Rect(*parts)


def cmd_synth(args) -> int:
    params = {}
    if args.scenario == "scale":
        params = {"sy": args.sy, "sx": args.sx}
    elif args.scenario == "tuckin":
        params = {"crop_fraction": args.crop}
    elif args.scenario == "hand" and args.band is not None:
        params = {"band": args.band}
    scene = synth.build_scene(args.scenario, args.height, args.width, args.seed,
                              args.period, args.orientation, args.texture, **params)
    out = Path(args.out)
    files = io.save_scene(scene, out)
    doc = io.build_manifest("synth", seed=args.seed, provenance=scene.provenance,
                            outputs=files + [io.SCENE_MANIFEST])
    io.write_json(out / io.SCENE_MANIFEST, doc)
    print(f"wrote {len(files)} files and {io.SCENE_MANIFEST} to {out}")
    return EXIT_OK


# -- warp ------------------------------------------------------------------------------

def cmd_warp(args) -> int:
    image = io.read_pnm(args.image)
    flow = io.read_flo(args.flow)
    out = fl.warp(image, flow)
    if args.vis is not None:
        vis = io.read_mask(args.vis)
        out = fl.apply_visibility(out, vis)
    io.write_pnm(args.out, out)
    return EXIT_OK


# -- optimize / compare -----------------------------------------------------------

def _load_run_inputs(args):
    scene = io.load_scene(args.scene_dir)
    explicit = {}
    if args.config is not None:
        explicit = io.parse_config_items(Path(args.config).read_text())
    h, w = scene.shape
    explicit.setdefault("height", h)
    explicit.setdefault("width", w)
    if args.seed is not None:
        explicit["seed"] = args.seed
    config = pm.PyramidConfig().replace(**explicit)
    return scene, config


def _write_run(report: pm.ExperimentReport, out: Path, prefix: str = "") -> List[str]:
    """Per-scale flows, warped garment, visibility and loss series for one run."""
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, f in enumerate(report.local_result.flows):
        name = f"{prefix}local_flow_s{k}.flo"
        io.write_flo(out / name, f)
        files.append(name)
    if report.global_result is not None:
        for k, f in enumerate(report.global_result.flows):
            name = f"{prefix}global_flow_s{k}.flo"
            io.write_flo(out / name, f)
            files.append(name)
    for name, data in ((f"{prefix}warped.ppm", report.warped),
                       (f"{prefix}visibility.pgm", report.visibility)):
        io.write_pnm(out / name, data)
        files.append(name)
    name = f"{prefix}series.csv"
    io.write_series(out / name, report.series())
    files.append(name)
    return files


def cmd_optimize(args) -> int:
    scene, config = _load_run_inputs(args)
    report = pm.run_experiment(scene, config)
    out = Path(args.out)
    files = _write_run(report, out)
    doc = io.build_manifest("optimize", config, report.provenance, outputs=files + ["manifest.json"],
                            metrics=report.metrics)
    io.write_json(out / "manifest.json", doc)
    m = report.metrics
    print(f"garment_l1={m['garment_l1']:.6g} mask_l1={m['mask_l1']:.6g} "
          f"integrity_violation={m.get('integrity_violation', float('nan')):.6g} ssim={m['ssim']:.6g}")
    return EXIT_OK


COMPARE_ARMS = ("so", "nipr")


def run_compare(scene: synth.Scene, config: pm.PyramidConfig,
                threads: int = 1) -> Dict[str, pm.ExperimentReport]:
    """The same experiment with the SO and NIPR regularizers.

    Arms share nothing mutable, so running them on two threads cannot
    change either result.
    """
    configs = {arm: config.replace(loss_variant=arm) for arm in COMPARE_ARMS}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(configs))) as pool:
            futures = {arm: pool.submit(pm.run_experiment, scene, c) for arm, c in configs.items()}
            return {arm: fut.result() for arm, fut in futures.items()}
    return {arm: pm.run_experiment(scene, c) for arm, c in configs.items()}


def compare_summary(reports: Dict[str, pm.ExperimentReport]) -> Dict:
    so = reports["so"].metrics
    nipr = reports["nipr"].metrics
    v_so = so.get("integrity_violation", float("nan"))
    v_nipr = nipr.get("integrity_violation", float("nan"))
    ratio = v_nipr / v_so if v_so > 0 else float("nan")
    return {
        "violation_so": v_so,
        "violation_nipr": v_nipr,
        "violation_ratio": ratio,
        "mask_l1_so": so["mask_alignment_l1"],
        "mask_l1_nipr": nipr["mask_alignment_l1"],
        "ssim_so": so["ssim"],
        "ssim_nipr": nipr["ssim"],
        "nipr_lower_violation": bool(v_nipr < v_so),
    }


def cmd_compare(args) -> int:
    scene, config = _load_run_inputs(args)
    reports = run_compare(scene, config, thread_cap())
    out = Path(args.out)
    files = []
    for arm, rep in reports.items():
        files += [f"{arm}/{name}" for name in _write_run(rep, out / arm)]
    side = np.concatenate([reports["so"].warped, reports["nipr"].warped], axis=2)
    io.write_pnm(out / "side_by_side.ppm", side)
    files.append("side_by_side.ppm")
    summary = compare_summary(reports)
    report_doc = {"summary": summary, "arms": {arm: rep.metrics for arm, rep in reports.items()}}
    io.write_json(out / "report.json", report_doc)
    files += ["report.json", "manifest.json"]
    doc = io.build_manifest("compare", config, reports["nipr"].provenance, outputs=files,
                            metrics=report_doc, extra={"arms": list(COMPARE_ARMS)})
    io.write_json(out / "manifest.json", doc)
    print(f"violation so={summary['violation_so']:.6g} nipr={summary['violation_nipr']:.6g} "
          f"ratio={summary['violation_ratio']:.4g}")
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------------

GRADCHECK_DEFAULTS = {"seed": 0, "sample_count": 100, "h": 1e-5, "tol": 1e-5,
                      "height": 20, "width": 16}


def parse_gradcheck_config(text: str) -> Dict:
    """Flat ``key = value`` settings for the gradient certification run."""
    settings = dict(GRADCHECK_DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in GRADCHECK_DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = type(GRADCHECK_DEFAULTS[key])
        try:
            settings[key] = kind(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return settings


def cmd_gradcheck(args) -> int:
    settings = dict(GRADCHECK_DEFAULTS)
    if args.config is not None:
        settings = parse_gradcheck_config(Path(args.config).read_text())
    if args.seed is not None:
        settings["seed"] = args.seed
    if args.fault is not None and args.fault not in gc.CHECKED_OPS:
        raise ConfigError(f"unknown operation {args.fault!r}; choose from {', '.join(gc.CHECKED_OPS)}")
    t0 = time.perf_counter()
    reports = gc.run_suite(fault=args.fault, **settings)
    ok = True
    for rep in reports:
        print(rep.summary())
        ok &= rep.passed
    print(f"{'all operations passed' if ok else 'FAILED'} "
          f"({time.perf_counter() - t0:.1f}s, seed {settings['seed']})")
    return EXIT_OK if ok else EXIT_VERIFY


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowweld", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"flowweld {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("scenario", choices=synth.SCENARIOS)
    s.add_argument("--seed", type=int, default=None, help="seed for random garment colours")
    s.add_argument("--sy", type=float, default=1.0, help="vertical scale (scale scenario)")
    s.add_argument("--sx", type=float, default=1.0, help="horizontal scale (scale scenario)")
    s.add_argument("--crop", type=float, default=0.25, help="hidden fraction (tuckin scenario)")
    s.add_argument("--band", type=_band, default=None, help="top,left,height,width (hand scenario)")
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=48)
    s.add_argument("--period", type=int, default=4)
    s.add_argument("--orientation", choices=("horizontal", "vertical"), default="horizontal")
    s.add_argument("--texture", choices=("stripes", "checker"), default="stripes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    w = sub.add_parser("warp", help="warp an image by a .flo flow")
    w.add_argument("image")
    w.add_argument("flow")
    w.add_argument("--vis", default=None, help="visibility mask (PGM); occluded pixels go to zero")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_warp)

    for name, func, text in (("optimize", cmd_optimize, "fit global and local flows to a scene"),
                             ("compare", cmd_compare, "run the SO and NIPR arms side by side")):
        o = sub.add_parser(name, help=text)
        o.add_argument("scene_dir")
        o.add_argument("--config", default=None)
        o.add_argument("--seed", type=int, default=None)
        o.add_argument("--out", required=True)
        o.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="certify analytic gradients against finite differences")
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--fault", default=None, help="double one operation's adjoint (harness self-test)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, FormatError) as exc:
        _err(str(exc))
        return EXIT_IO
    except (FlowWeldError, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
