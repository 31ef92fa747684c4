import json
import subprocess
import sys

import numpy as np
import pytest

from flowweld import cli
from flowweld import fileio as io


@pytest.fixture
def scale_dir(tmp_path):
    out = tmp_path / "scene"
    assert cli.main(["synth", "scale", "--sy", "0.5", "--sx", "1.0", "--out", str(out)]) == 0
    return out


@pytest.fixture
def identity_dir(tmp_path):
    out = tmp_path / "ident"
    assert cli.main(["synth", "scale", "--sy", "1", "--sx", "1", "--out", str(out)]) == 0
    return out


def small_config(tmp_path, **extra):
    p = tmp_path / "small.cfg"
    lines = ["scales = 3", "iters = 40", "lr = 0.02"] + [f"{k} = {v}" for k, v in extra.items()]
    p.write_text("\n".join(lines) + "\n")
    return str(p)


class TestSynth:
    def test_scale_outputs(self, scale_dir):
        files = sorted(p.name for p in scale_dir.iterdir())
        rasters = [f for f in files if f.endswith((".pgm", ".ppm"))]
        assert len(rasters) == 6
        assert [f for f in files if f.endswith(".flo")] == ["gt_flow.flo"]
        doc = json.loads((scale_dir / "scene.json").read_text())
        assert doc["provenance"]["params"] == {"sy": 0.5, "sx": 1.0}

    def test_emitted_files_roundtrip(self, scale_dir, tmp_path):
        for p in scale_dir.iterdir():
            if p.suffix in (".pgm", ".ppm"):
                data = io.read_pnm(p)
                q = tmp_path / ("again" + p.suffix)
                io.write_pnm(q, data)
                assert q.read_bytes() == p.read_bytes()
            elif p.suffix == ".flo":
                q = tmp_path / "again.flo"
                io.write_flo(q, io.read_flo(p))
                assert q.read_bytes() == p.read_bytes()

    def test_unknown_scenario(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "skirt", "--out", str(tmp_path)])
        assert exc.value.code != 0
        assert "usage" in capsys.readouterr().err

    def test_bad_parameters_are_contract_errors(self, tmp_path):
        assert cli.main(["synth", "tuckin", "--crop", "0.7", "--out", str(tmp_path)]) == 2


class TestWarp:
    def test_zero_flow_is_identity(self, scale_dir, tmp_path):
        zero = tmp_path / "zero.flo"
        io.write_flo(zero, np.zeros((2, 64, 48)))
        out = tmp_path / "out.ppm"
        assert cli.main(["warp", str(scale_dir / "source.ppm"), str(zero), "--out", str(out)]) == 0
        assert out.read_bytes() == (scale_dir / "source.ppm").read_bytes()

    def test_full_occluder_blacks_out(self, scale_dir, tmp_path):
        vis = tmp_path / "vis.pgm"
        io.write_pnm(vis, np.ones((64, 48)))
        out = tmp_path / "out.ppm"
        rc = cli.main(["warp", str(scale_dir / "source.ppm"), str(scale_dir / "gt_flow.flo"),
                       "--vis", str(vis), "--out", str(out)])
        assert rc == 0
        assert np.all(io.read_pnm(out) == 0)

    def test_gt_flow_reproduces_target(self, scale_dir, tmp_path):
        out = tmp_path / "out.ppm"
        cli.main(["warp", str(scale_dir / "source.ppm"), str(scale_dir / "gt_flow.flo"),
                  "--out", str(out)])
        # the flow went through float32, so allow one 8-bit level
        diff = np.abs(io.read_pnm(out) - io.read_pnm(scale_dir / "target.ppm"))
        assert diff.max() <= 1 / 255 + 1e-12

    def test_size_mismatch_exit_2(self, scale_dir, tmp_path):
        bad = tmp_path / "bad.flo"
        io.write_flo(bad, np.zeros((2, 10, 10)))
        rc = cli.main(["warp", str(scale_dir / "source.ppm"), str(bad), "--out", str(tmp_path / "o.ppm")])
        assert rc == 2

    def test_missing_input_exit_3(self, scale_dir, tmp_path, capsys):
        rc = cli.main(["warp", str(scale_dir / "source.ppm"), str(tmp_path / "nope.flo"),
                       "--out", str(tmp_path / "o.ppm")])
        assert rc == 3
        assert "nope.flo" in capsys.readouterr().err


class TestOptimize:
    def test_identity_default_config(self, identity_dir, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["optimize", str(identity_dir), "--out", str(out)]) == 0
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["metrics"]["garment_l1"] < 1e-3
        assert doc["config"]["alphas"] == [1.0, 0.2, 2.0, 2.0, 1.0, 1.0]
        for name in doc["outputs"]:
            assert (out / name).is_file()
        header = (out / "series.csv").read_text().splitlines()[0].split(",")
        assert header[:3] == ["stage", "scale", "iteration"] and header[-1] == "total"

    def test_rerun_is_byte_identical(self, scale_dir, tmp_path):
        cfg = small_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert cli.main(["optimize", str(scale_dir), "--config", cfg, "--out", str(out)]) == 0
        for name in ("series.csv", "manifest.json", "warped.ppm", "local_flow_s2.flo"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_missing_mask_exit_3(self, scale_dir, tmp_path, capsys):
        (scale_dir / "source_mask.pgm").unlink()
        rc = cli.main(["optimize", str(scale_dir), "--out", str(tmp_path / "o")])
        assert rc == 3
        assert "source_mask.pgm" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, scale_dir, tmp_path):
        rc = cli.main(["optimize", str(scale_dir), "--config", small_config(tmp_path, colour="red"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_seed_recorded(self, scale_dir, tmp_path):
        out = tmp_path / "o"
        cli.main(["optimize", str(scale_dir), "--config", small_config(tmp_path), "--seed", "9",
                  "--out", str(out)])
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["seed"] == 9 and doc["config"]["seed"] == 9


class TestCompare:
    def test_identity_scene(self, identity_dir, tmp_path):
        out = tmp_path / "cmp"
        assert cli.main(["compare", str(identity_dir), "--config", small_config(tmp_path),
                         "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        s = report["summary"]
        assert s["violation_so"] < 1e-3 and s["violation_nipr"] < 1e-3
        for arm in ("so", "nipr"):
            terms = report["arms"][arm]
            for key in ("garment_l1", "mask_l1", "bce", "consistency", "regularizer", "total",
                        "integrity_violation", "ssim"):
                assert key in terms
        assert (out / "side_by_side.ppm").is_file()


class TestGradcheckCommand:
    def test_default_passes(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        text = capsys.readouterr().out
        for op in ("warp", "apply_visibility", "l1", "bce", "so", "nipr_preserve", "nipr",
                   "consistency", "tv"):
            assert any(line.startswith(op + " ") and "max_rel_err=" in line for line in text.splitlines())

    def test_fault_names_op(self, capsys):
        assert cli.main(["gradcheck", "--fault", "so"]) == 1
        lines = [l for l in capsys.readouterr().out.splitlines() if "FAIL" in l and "index=" in l]
        assert len(lines) == 1 and lines[0].startswith("so ")

    def test_seed_changes_coordinates_not_verdict(self, capsys):
        assert cli.main(["gradcheck", "--seed", "11"]) == 0
        a = capsys.readouterr().out
        assert cli.main(["gradcheck", "--seed", "12"]) == 0
        b = capsys.readouterr().out
        assert a != b

    def test_config_file(self, tmp_path):
        p = tmp_path / "gc.cfg"
        p.write_text("seed = 4\nsample_count = 10\n")
        assert cli.main(["gradcheck", "--config", str(p)]) == 0
        p.write_text("samples = 10\n")
        assert cli.main(["gradcheck", "--config", str(p)]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "flowweld", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "flowweld" in res.stdout
