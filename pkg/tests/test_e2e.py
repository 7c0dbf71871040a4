"""
End-to-End Tests - the full pipeline through the command line, from synthetic
scenes to an assembled room, plus the exit-code contract.
"""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sgs.assembly import extract_instances
from sgs.cli import build_parser, main
from sgs.errors import EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE
from sgs.reader import ContainerReader


PROJECT_ROOT = str(Path(__file__).parent.parent)

TINY = {
    "seed": 1,
    "grid": {"w": 8, "h": 8, "d": 4, "gamma": 0.5},
    "labels": {"classes": ["bed", "desk"]},
    "network": {"latent_dim": 4, "width_scale": 1 / 32, "head_width": 8, "image_size": [16, 16]},
    "train": {"batch_size": 2, "views": 2, "epochs": 1, "checkpoint_every": 1, "steps_per_epoch": 1,
              "depth_bins": 8},
    "retrieval": {"rotations_deg": [0, 90], "points_per_entry": 32},
    "analytics": {"view_counts": [1, 2], "coverages": [90, 180], "samples": 10, "depth_bins": 8},
}


def sgs(*args, cwd=PROJECT_ROOT):
    return subprocess.run(
        [sys.executable, "-m", "sgs", *[str(a) for a in args]],
        capture_output=True,
        text=True,
        cwd=cwd,
    )


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """synth -> train -> generate, shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "config.json"
    config.write_text(json.dumps(TINY))

    result = sgs("synth", "--config", config, "-o", root, "-n", "4", "--views", "2")
    assert result.returncode == 0, result.stderr
    result = sgs("train", "--config", config, "--pool", root / "pool", "-o", root / "run")
    assert result.returncode == 0, result.stderr
    result = sgs("generate", root / "run" / "ckpt-00001.sgsc", "--room", 4, 4, 2, "-n", 2, "-o", root / "gen")
    assert result.returncode == 0, result.stderr
    return root


# =============================================================================
# Pipeline
# =============================================================================

class TestPipeline:

    def test_synth_outputs(self, work):
        assert len(list((work / "scenes").glob("*.sgsl"))) == 4
        assert len((work / "pool" / "pool.jsonl").read_text().splitlines()) == 8
        assert (work / "database" / "index.json").exists()

    def test_training_outputs(self, work):
        lines = (work / "run" / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(line)["epoch"] for line in lines] == [0, 1]
        info = ContainerReader.inspect(work / "run" / "ckpt-00001.sgsc")
        assert info.kind == "checkpoint"
        assert info.checksum_ok

    def test_generated_volumes(self, work):
        paths = sorted((work / "gen").glob("*.sgsv"))
        assert [p.name for p in paths] == ["00000.sgsv", "00001.sgsv"]
        volume, _ = ContainerReader.read_volume(paths[0])
        assert volume.probs.shape == (8, 8, 4, 3)
        volume.validate()

    def test_generate_is_seeded(self, work):
        result = sgs("generate", work / "run" / "ckpt-00001.sgsc", "--room", 4, 4, 2, "-o", work / "gen-again")
        assert result.returncode == 0, result.stderr
        assert (work / "gen" / "00000.sgsv").read_bytes() == (work / "gen-again" / "00000.sgsv").read_bytes()

    def test_assemble(self, work):
        out = work / "scene.json"
        result = sgs("assemble", work / "scenes" / "00000.sgsl", "--config", work / "config.json",
                     "--database", work / "database", "-o", out, "--obj", work / "scene.obj")
        assert result.returncode == 0, result.stderr
        scene = json.loads(out.read_text())
        labels, _ = ContainerReader.read_labels(work / "scenes" / "00000.sgsl")
        assert len(scene["placements"]) + scene["dropped"] == len(extract_instances(labels))
        assert scene["unresolved"] == []
        assert {p["class"] for p in scene["placements"]} <= {"bed", "desk"}
        assert (work / "scene.obj").read_text().startswith("# room")

    def test_assemble_generated(self, work):
        out = work / "generated-scene.json"
        result = sgs("assemble", work / "gen" / "00000.sgsv", "--config", work / "config.json",
                     "--database", work / "database", "-o", out)
        assert result.returncode == 0, result.stderr
        assert "placements" in json.loads(out.read_text())

    def test_analyze_cooc(self, work):
        result = sgs("analyze", "cooc", "--config", work / "config.json", "--scenes", work / "scenes",
                     "-o", work / "cooc")
        assert result.returncode == 0, result.stderr
        data = json.loads((work / "cooc" / "cooccurrence.json").read_text())
        assert data["classes"] == ["bed", "desk"]
        assert len(data["matrix"]) == 2
        assert (work / "cooc" / "cooccurrence.csv").read_text().startswith(",bed,desk")

    def test_analyze_viewstudy(self, work):
        result = sgs("analyze", "viewstudy", "--config", work / "config.json", "--scenes", work / "scenes",
                     "-o", work / "study")
        assert result.returncode == 0, result.stderr
        data = json.loads((work / "study" / "viewstudy.json").read_text())
        assert np.array(data["differences"]).shape == (2, 2)

    def test_analyze_depthdist(self, work):
        result = sgs("analyze", "depthdist", "--config", work / "config.json", "--scenes", work / "scenes",
                     "--pool", work / "pool", "-o", work / "depth")
        assert result.returncode == 0, result.stderr
        data = json.loads((work / "depth" / "depthdist.json").read_text())
        assert len(data["pool"]) == 8
        assert data["w1"] >= 0.0

    def test_render(self, work):
        result = sgs("render", work / "scenes" / "00000.sgsl", "--config", work / "config.json",
                     "-o", work / "render", "--preview")
        assert result.returncode == 0, result.stderr
        assert len(list((work / "render").glob("*.sgsi"))) == 4
        assert len(list((work / "render").glob("*-sem.ppm"))) == 4
        assert json.loads((work / "render" / "legend.json").read_text())[-1]["name"] == "empty"

    def test_render_pool_cameras(self, work):
        result = sgs("render", work / "scenes" / "00000.sgsl", "--config", work / "config.json",
                     "-o", work / "replay", "--pool", work / "pool", "--views", 3)
        assert result.returncode == 0, result.stderr
        assert len(list((work / "replay").glob("*.sgsi"))) == 3

    def test_inspect_and_identify(self, work):
        result = sgs("inspect", work / "pool" / "00000.sgsi", "--json")
        assert result.returncode == 0, result.stderr
        assert json.loads(result.stdout)["size"] == [16, 16]
        result = sgs("identify", work / "scenes" / "00000.sgsl")
        assert result.returncode == 0
        assert "label volume" in result.stdout

    def test_resume_continues(self, work, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({**TINY, "train": {**TINY["train"], "epochs": 2}}))
        run = tmp_path / "run"
        result = sgs("train", "--config", config, "--pool", work / "pool", "-o", run)
        assert result.returncode == 0, result.stderr
        finished = (run / "ckpt-00002.sgsc").read_bytes()
        (run / "ckpt-00002.sgsc").unlink()
        result = sgs("train", "--config", config, "--pool", work / "pool", "-o", run, "--resume")
        assert result.returncode == 0, result.stderr
        assert (run / "ckpt-00002.sgsc").read_bytes() == finished
        epochs = [json.loads(line)["epoch"] for line in (run / "metrics.jsonl").read_text().splitlines()]
        assert epochs == [0, 1, 2]

    def test_resume_other_config(self, work, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({**TINY, "seed": 2}))
        result = sgs("train", "--config", config, "--pool", work / "pool", "-o", work / "run", "--resume")
        assert result.returncode == EXIT_USAGE
        assert "different config" in result.stderr


# =============================================================================
# Exit codes
# =============================================================================

class TestExitCodes:

    def test_help(self):
        result = sgs("--help")
        assert result.returncode == 0
        assert "synth" in result.stdout and "gradcheck" in result.stdout

    def test_version(self):
        result = sgs("--version")
        assert result.returncode == 0
        assert "sgs" in result.stdout

    def test_no_command_prints_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 0
        assert "Typical run" in capsys.readouterr().out

    def test_bad_override_is_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "-o", str(tmp_path), "--set", "network.variant=stacked"])
        assert exc.value.code == EXIT_USAGE
        assert "network.variant" in capsys.readouterr().err

    def test_room_too_large_is_usage_error(self, work, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["generate", str(work / "run" / "ckpt-00001.sgsc"), "--room", "9", "4", "2",
                  "-o", str(work / "never")])
        assert exc.value.code == EXIT_USAGE

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["inspect", str(tmp_path / "missing.sgsv")])
        assert exc.value.code == EXIT_DATA

    def test_missing_pool_flag(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "-o", str(tmp_path)])
        assert exc.value.code == EXIT_USAGE
        assert "--pool is required" in capsys.readouterr().err

    def test_identify_other_file(self, tmp_path, capsys):
        path = tmp_path / "notes.txt"
        path.write_text("hello")
        with pytest.raises(SystemExit) as exc:
            main(["identify", str(path)])
        assert exc.value.code == EXIT_USAGE
        assert "Not an SGS container" in capsys.readouterr().out

    def test_corrupt_container_is_reported(self, work, tmp_path, capsys):
        data = bytearray((work / "scenes" / "00000.sgsl").read_bytes())
        data[-1] ^= 0xFF
        path = tmp_path / "bad.sgsl"
        path.write_bytes(bytes(data))
        with pytest.raises(SystemExit) as exc:
            main(["inspect", str(path)])
        assert exc.value.code == EXIT_DATA
        assert "CHECKSUM: INVALID" in capsys.readouterr().out

    def test_gradcheck_passes(self, capsys):
        main(["gradcheck", "--cases", "2", "--primitive", "exp", "--primitive", "matmul"])
        out = capsys.readouterr().out
        assert "Gradient check passed" in out

    def test_gradcheck_failure_exits_numerical(self, monkeypatch, capsys):
        from sgs import autodiff as ad

        monkeypatch.setattr(ad.Exp, "backward", lambda self, grad: (2.0 * grad * self.out,))
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--cases", "2", "--primitive", "exp"])
        assert exc.value.code == EXIT_NUMERICAL
        assert "FAILED: exp" in capsys.readouterr().err

    def test_parser_shares_global_options(self):
        args = build_parser().parse_args(["analyze", "cooc", "--seed", "4", "--threads", "2", "-q"])
        assert (args.seed, args.threads, args.quiet) == (4, 2, True)
