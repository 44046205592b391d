import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

GOLDEN = Path(__file__).resolve().parent.parent / "golden"
ALL_KINDS = ["carleman_verify", "resolvent_sweep", "kernel_check", "continue",
             "pole_scan", "deriv_bounds", "cutoff_build", "hs_check",
             "wave_decay", "hardy"]


def run_renderer(art_dir, out_dir):
    return subprocess.run(
        [sys.executable, "-m", "decaylab_plots.render", str(art_dir),
         "-o", str(out_dir)],
        capture_output=True, text=True,
        cwd=Path(__file__).resolve().parent.parent)


class TestGoldenSet:
    def test_all_figure_kinds_render(self, tmp_path):
        out = tmp_path / "figs"
        proc = run_renderer(GOLDEN, out)
        assert proc.returncode == 0, proc.stderr
        for kind in ALL_KINDS:
            png = out / f"{kind}.png"
            assert png.exists(), f"missing figure {kind}"
            assert png.stat().st_size > 2000

    def test_byte_stable_across_reruns(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_renderer(GOLDEN, out1).returncode == 0
        assert run_renderer(GOLDEN, out2).returncode == 0
        for kind in ALL_KINDS:
            b1 = (out1 / f"{kind}.png").read_bytes()
            b2 = (out2 / f"{kind}.png").read_bytes()
            assert b1 == b2, f"{kind} not byte-stable"


class TestSchemaGuards:
    def test_missing_manifest_rejected(self, tmp_path):
        art = tmp_path / "arts"
        art.mkdir()
        shutil.copy(GOLDEN / "cutoff_build.csv", art / "cutoff_build.csv")
        proc = run_renderer(art, tmp_path / "figs")
        assert proc.returncode == 1
        assert "schema mismatch" in proc.stderr

    def test_format_version_mismatch_rejected(self, tmp_path):
        art = tmp_path / "arts"
        art.mkdir()
        shutil.copy(GOLDEN / "cutoff_build.csv", art / "cutoff_build.csv")
        manifest = json.loads((GOLDEN / "cutoff_build.manifest.json").read_text())
        manifest["format_version"] = 999
        (art / "cutoff_build.manifest.json").write_text(json.dumps(manifest))
        proc = run_renderer(art, tmp_path / "figs")
        assert proc.returncode == 1
        assert "format_version" in proc.stderr

    def test_empty_dir(self, tmp_path):
        proc = run_renderer(tmp_path, tmp_path / "figs")
        assert proc.returncode == 1
