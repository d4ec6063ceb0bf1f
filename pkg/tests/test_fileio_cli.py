import json

import numpy as np
import pytest

from tomoforge import (
    ImageGrid,
    IterationRecord,
    Sinogram,
    Volume,
    export_slice,
    load_array,
    load_plan,
    save_array,
)
from tomoforge.cli import main
from tomoforge.fileio import config_hash, write_convergence_csv

from conftest import uniform_angles


PLAN_TEXT = """
[geometry]
image_side = 32

[qggmrf]
sigma = 0.25
lambda = 1e-3

[solver]
max_iters = 4
tol = 1e-9
"""


class TestArrayFiles:
    def test_image_round_trip_bit_exact(self, tmp_path, rng):
        img = ImageGrid(rng.standard_normal((8, 8)), pixel_size=0.5)
        path = save_array(tmp_path / "img.raw", img)
        back = load_array(path)
        assert isinstance(back, ImageGrid)
        assert back.data.tobytes() == img.data.tobytes()
        assert back.pixel_size == 0.5

    def test_volume_round_trip(self, tmp_path, rng):
        vol = Volume(rng.standard_normal((3, 8, 8)))
        back = load_array(save_array(tmp_path / "vol.raw", vol))
        assert isinstance(back, Volume)
        assert back.data.tobytes() == vol.data.tobytes()

    def test_sinogram_round_trip_keeps_angles(self, tmp_path, rng):
        sino = Sinogram(angles=uniform_angles(5), data=rng.standard_normal((2, 5, 8)))
        back = load_array(save_array(tmp_path / "sino.raw", sino))
        assert isinstance(back, Sinogram)
        assert back.data.tobytes() == sino.data.tobytes()
        np.testing.assert_array_equal(back.angles, sino.angles)

    def test_payload_length_validated(self, tmp_path, rng):
        img = ImageGrid(rng.standard_normal((8, 8)))
        path = save_array(tmp_path / "img.raw", img)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="payload"):
            load_array(path)

    def test_bad_header_rejected(self, tmp_path, rng):
        img = ImageGrid(rng.standard_normal((8, 8)))
        path = save_array(tmp_path / "img.raw", img)
        sidecar = tmp_path / "img.raw.json"
        hdr = json.loads(sidecar.read_text())
        hdr["kind"] = "mystery"
        sidecar.write_text(json.dumps(hdr))
        with pytest.raises(ValueError, match="kind"):
            load_array(path)


class TestPlanFiles:
    def test_minimal_plan_defaults(self, tmp_path):
        path = tmp_path / "plan.toml"
        path.write_text(PLAN_TEXT)
        plan = load_plan(path)
        assert plan.image_side == 32
        assert plan.qggmrf.sigma == 0.25
        assert plan.qggmrf.lam == pytest.approx(1e-3)
        assert plan.solver.max_iters == 4
        assert plan.workers == 1 and plan.levels is None

    def test_sigma_auto(self, tmp_path):
        path = tmp_path / "plan.toml"
        path.write_text("[geometry]\nimage_side = 16\n[qggmrf]\nsigma = 'auto'\n")
        plan = load_plan(path)
        assert plan.sigma_auto and plan.qggmrf is None
        assert plan.resolve_params(0.5).sigma == 0.5

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "plan.toml"
        path.write_text("[geometry]\nimage_side = 16\nwat = 1\n")
        with pytest.raises(ValueError, match="unknown keys"):
            load_plan(path)
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ValueError, match="unknown plan section"):
            load_plan(path)

    def test_missing_geometry_rejected(self, tmp_path):
        path = tmp_path / "plan.toml"
        path.write_text("[solver]\nmax_iters = 3\n")
        with pytest.raises(ValueError, match="image_side"):
            load_plan(path)

    def test_referenced_files_must_exist(self, tmp_path):
        path = tmp_path / "plan.toml"
        path.write_text(
            "[geometry]\nimage_side = 16\n[files]\ninit_volume = 'missing.raw'\n")
        with pytest.raises(ValueError, match="does not exist"):
            load_plan(path)
        save_array(tmp_path / "init.raw", ImageGrid(np.zeros((16, 16))))
        path.write_text(
            "[geometry]\nimage_side = 16\n[files]\ninit_volume = 'init.raw'\n")
        assert load_plan(path).init_volume.name == "init.raw"


class TestCsvAndExport:
    def test_csv_columns_and_metadata(self, tmp_path):
        rec = IterationRecord(iter=1, objective=2.0, fidelity=1.5, prior=0.5,
                              grad_norm=0.1, step_time=0.01, restarted=True)
        path = write_convergence_csv(tmp_path / "log.csv", [(rec, 0, 2)],
                                     {"seed": 7})
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# ")
        assert "version=" in lines[0] and "seed=7" in lines[0]
        assert "config_hash=" in lines[0]
        assert lines[1] == "iter,objective,fidelity,prior,grad_norm,time_s,restarted,level,workers"
        fields = lines[2].split(",")
        assert fields[0] == "1" and fields[6] == "1" and fields[-1] == "2"

    def test_config_hash_stable(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_export_pgm_and_png(self, tmp_path, rng):
        img = ImageGrid(rng.random((8, 8)))
        pgm = export_slice(tmp_path / "out.pgm", img)
        assert pgm.suffix == ".pgm" and "_w" in pgm.stem
        header = pgm.read_bytes().split(b"\n", 3)
        assert header[0] == b"P5" and header[1] == b"8 8"
        png = export_slice(tmp_path / "out.png", img)
        assert png.exists() and png.suffix == ".png"
        from PIL import Image

        assert Image.open(png).size == (8, 8)

    def test_export_window_in_filename(self, tmp_path):
        img = ImageGrid(np.linspace(-1.0, 3.0, 64).reshape(8, 8))
        out = export_slice(tmp_path / "rec.pgm", img)
        assert "_w-1_3" in out.name


class TestCli:
    def test_phantom_deterministic(self, tmp_path):
        a, b = tmp_path / "a.raw", tmp_path / "b.raw"
        for out in (a, b):
            assert main(["phantom", "--kind", "disk", "--side", "32",
                         "--radius", "8", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_project_zero_volume_and_header(self, tmp_path):
        vol = tmp_path / "zero.raw"
        save_array(vol, ImageGrid(np.zeros((16, 16))))
        sino_path = tmp_path / "sino.raw"
        assert main(["project", "--input", str(vol), "--angles", "9",
                     "--bins", "16", "--out", str(sino_path)]) == 0
        sino = load_array(sino_path)
        assert np.all(sino.data == 0)
        assert sino.angles.size == 9

    def test_mbir_end_to_end(self, tmp_path):
        assert main(["phantom", "--kind", "disk", "--side", "32", "--radius", "8",
                     "--out", str(tmp_path / "ph.raw")]) == 0
        assert main(["project", "--input", str(tmp_path / "ph.raw"), "--angles",
                     "20", "--bins", "32", "--out", str(tmp_path / "s.raw")]) == 0
        (tmp_path / "plan.toml").write_text(PLAN_TEXT)
        code = main(["mbir", "--sino", str(tmp_path / "s.raw"), "--plan",
                     str(tmp_path / "plan.toml"), "--out", str(tmp_path / "r.raw"),
                     "--init", "fbp", "--log", str(tmp_path / "log.csv"),
                     "--export-png", str(tmp_path / "r.png")])
        assert code == 0
        rec = load_array(tmp_path / "r.raw")
        assert isinstance(rec, ImageGrid) and rec.side == 32
        log = (tmp_path / "log.csv").read_text().splitlines()
        assert len(log) >= 3
        assert any(p.suffix == ".png" for p in tmp_path.iterdir())

    def test_bad_arguments_exit_2(self, tmp_path, capsys):
        assert main(["phantom", "--kind", "cube", "--side", "32",
                     "--out", str(tmp_path / "x.raw")]) == 2
        assert main(["project", "--input", str(tmp_path / "none.raw"),
                     "--angles", "4", "--bins", "8",
                     "--out", str(tmp_path / "y.raw")]) in (2, 4)

    def test_io_failure_exit_4(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        code = main(["phantom", "--kind", "disk", "--side", "32",
                     "--out", str(blocker / "sub" / "x.raw")])
        assert code == 4

    def test_numerical_failure_exit_3(self, tmp_path):
        assert main(["phantom", "--kind", "disk", "--side", "16", "--radius", "4",
                     "--out", str(tmp_path / "p.raw")]) == 0
        assert main(["project", "--input", str(tmp_path / "p.raw"), "--angles",
                     "8", "--bins", "16", "--out", str(tmp_path / "s.raw")]) == 0
        (tmp_path / "bad.toml").write_text(
            "[geometry]\nimage_side = 16\n[qggmrf]\nsigma = 1.0\n"
            "[solver]\nmax_iters = 60\nlipschitz = 1e-12\n")
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["mbir", "--sino", str(tmp_path / "s.raw"), "--plan",
                         str(tmp_path / "bad.toml"), "--out",
                         str(tmp_path / "r.raw"), "--init", "zero"])
        assert code == 3

    def test_worker_env_cap(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TOMOFORGE_THREADS", "1")
        from tomoforge.cli import _worker_cap

        assert _worker_cap(8) == 1
        monkeypatch.delenv("TOMOFORGE_THREADS")
        assert _worker_cap(8) == 8

    def test_mbir_multilevel(self, tmp_path):
        assert main(["phantom", "--kind", "disk", "--side", "32", "--radius", "8",
                     "--out", str(tmp_path / "ph.raw")]) == 0
        assert main(["project", "--input", str(tmp_path / "ph.raw"), "--angles",
                     "16", "--bins", "32", "--out", str(tmp_path / "s.raw")]) == 0
        (tmp_path / "plan.toml").write_text(PLAN_TEXT)
        assert main(["mbir", "--sino", str(tmp_path / "s.raw"), "--plan",
                     str(tmp_path / "plan.toml"), "--out", str(tmp_path / "r.raw"),
                     "--init", "zero", "--levels", "2",
                     "--log", str(tmp_path / "log.csv")]) == 0
        log = (tmp_path / "log.csv").read_text().splitlines()
        levels = {row.split(",")[7] for row in log[2:]}
        assert levels == {"0", "1"}

    def test_mbir_worker_equivalence(self, tmp_path):
        assert main(["phantom", "--kind", "shepp-logan", "--side", "16",
                     "--slices", "6", "--out", str(tmp_path / "v.raw")]) == 0
        assert main(["project", "--input", str(tmp_path / "v.raw"), "--angles",
                     "10", "--bins", "16", "--out", str(tmp_path / "s.raw")]) == 0
        (tmp_path / "plan.toml").write_text(
            "[geometry]\nimage_side = 16\n[qggmrf]\nsigma = 0.2\nlambda = 1e-3\n"
            "[solver]\nmax_iters = 4\ntol = 1e-12\n")
        for w in (1, 2):
            assert main(["mbir", "--sino", str(tmp_path / "s.raw"), "--plan",
                         str(tmp_path / "plan.toml"), "--out",
                         str(tmp_path / f"r{w}.raw"), "--init", "zero",
                         "--workers", str(w)]) == 0
        r1 = load_array(tmp_path / "r1.raw")
        r2 = load_array(tmp_path / "r2.raw")
        assert np.max(np.abs(r1.data - r2.data)) <= 1e-10

    def test_bench_cli_smoke(self, tmp_path):
        assert main(["bench", "toeplitz", "--out", str(tmp_path / "t.csv"),
                     "--sizes", "16", "32", "--angles", "8"]) == 0
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("# version=")
        assert lines[1].split(",")[0] == "N" and len(lines) == 4
        assert main(["bench", "scaling", "--out", str(tmp_path / "s.csv"),
                     "--side", "16", "--slices", "4", "--workers", "1", "2",
                     "--iters", "1"]) == 0
        assert (tmp_path / "s.csv").exists()
