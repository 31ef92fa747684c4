"""Fit global and local flows to a tucked-in garment, with SO and with NIPR.

The bottom quarter of the garment disappears under a bottom garment. The
run writes both arms' outputs to a temporary directory and prints the
comparison report.
"""

import json
import sys
import tempfile
from pathlib import Path

from flowweld import cli

out = Path(tempfile.mkdtemp(prefix="flowweld_demo_"))
scene = out / "scene"
cfg = out / "desk.cfg"
cfg.write_text("scales = 3\niters = 200\nlr = 0.02\nseed = 0\n")

if cli.main(["synth", "tuckin", "--crop", "0.25", "--out", str(scene)]) != 0:
    sys.exit("synth failed")
if cli.main(["compare", str(scene), "--config", str(cfg), "--out", str(out / "compare")]) != 0:
    sys.exit("compare failed")

report = json.loads((out / "compare" / "report.json").read_text())
for key, value in report["summary"].items():
    print(f"{key:>22}: {value}")
print("side-by-side image:", out / "compare" / "side_by_side.ppm")
