import filecmp

import numpy as np
import pytest

from sarfe import cli, numcore
from sarfe.cli import main, run_analyze, run_extract, run_gradcheck


def read_csv_matrix(path):
    rows = []
    for line in path.read_text().strip().splitlines():
        rows.append([float(v) for v in line.split(",")])
    return np.array(rows)


class TestExtract:
    def test_default_synth_writes_216x96(self, tmp_path):
        out = tmp_path / "feat"
        outcome = run_extract(synth="default", out_dir=out)
        assert outcome.exit_code == 0
        arr = read_csv_matrix(out / "roi_000.csv")
        assert arr.shape == (216, 96)
        assert (out / "summary.csv").exists()

    def test_missing_config_names_path(self, tmp_path, capsys):
        code = main(
            ["extract", "--synth", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]
        )
        assert code == 1
        assert "nope.toml" in capsys.readouterr().out

    def test_both_cloud_and_synth_rejected(self, tmp_path, capsys):
        code = main(["extract", "x.bin", "--synth", "--out", str(tmp_path)])
        assert code == 1

    def test_neither_cloud_nor_synth_rejected(self, tmp_path):
        code = main(["extract", "--out", str(tmp_path)])
        assert code == 1

    def test_same_seed_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run_extract(synth="default", out_dir=out1, seed=3)
        run_extract(synth="default", out_dir=out2, seed=3)
        assert filecmp.cmp(out1 / "roi_000.csv", out2 / "roi_000.csv", shallow=False)
        assert filecmp.cmp(out1 / "summary.csv", out2 / "summary.csv", shallow=False)

    def test_parallel_jobs_byte_identical_to_serial(self, tmp_path, scene_file, labels_file):
        out1, out2 = tmp_path / "serial", tmp_path / "par"
        run_extract(
            cloud_path=scene_file, labels_path=labels_file, out_dir=out1, jobs=1,
            config_path=None,
        )
        run_extract(
            cloud_path=scene_file, labels_path=labels_file, out_dir=out2, jobs=3,
            config_path=None,
        )
        for name in ("roi_000.csv", "roi_001.csv", "summary.csv"):
            assert filecmp.cmp(out1 / name, out2 / name, shallow=False)

    def test_bin_container_round_trips(self, tmp_path):
        out = tmp_path / "feat"
        run_extract(synth="default", out_dir=out, as_bin=True)
        loaded = numcore.load_checkpoint(out / "roi_000.bin")
        assert loaded["features"].shape == (216, 96)

    def test_bin_matches_csv_values(self, tmp_path):
        out_csv, out_bin = tmp_path / "csv", tmp_path / "bin"
        run_extract(synth="default", out_dir=out_csv)
        run_extract(synth="default", out_dir=out_bin, as_bin=True)
        arr_csv = read_csv_matrix(out_csv / "roi_000.csv")
        arr_bin = numcore.load_checkpoint(out_bin / "roi_000.bin")["features"]
        assert np.array_equal(arr_csv, arr_bin)

    def test_real_cloud_with_labels(self, tmp_path, scene_file, labels_file):
        out = tmp_path / "feat"
        outcome = run_extract(cloud_path=scene_file, labels_path=labels_file, out_dir=out)
        assert outcome.exit_code == 0
        assert (out / "roi_000.csv").exists()
        assert (out / "roi_001.csv").exists()


class TestGradcheck:
    def test_small_run_passes(self):
        outcome = run_gradcheck(trials=2, tol=1e-4)
        assert outcome.exit_code == 0
        assert "passed" in outcome.message

    def test_zero_tol_rejected(self, capsys):
        assert main(["gradcheck", "--tol", "0"]) == 1

    def test_negative_trials_rejected(self):
        assert main(["gradcheck", "--trials", "0"]) == 1

    def test_corrupted_gradient_exits_2(self, capsys):
        code = main(["gradcheck", "--trials", "1", "--self-test-corrupt"])
        assert code == 2
        assert "FAILED" in capsys.readouterr().out


class TestAnalyze:
    def test_default_scene_direction_in_csv(self, tmp_path):
        out = tmp_path / "reports.csv"
        outcome = run_analyze(synth="default", out_csv=out)
        assert outcome.exit_code == 0
        lines = out.read_text().strip().splitlines()
        rows = [line.split(",") for line in lines[1:]]
        fps = {float(r[2]): (float(r[3]), float(r[5])) for r in rows if r[1] == "fps"}
        vox = {float(r[2]): (float(r[3]), float(r[5])) for r in rows if r[1] == "voxel"}
        assert set(fps) == set(vox) == {0.4, 0.8, 1.6}
        for radius in fps:
            assert fps[radius][0] > vox[radius][0]  # duplicate fraction
            assert fps[radius][1] > vox[radius][1]  # mean pairwise cosine

    def test_fps_count_override(self, tmp_path, small_scene_spec_file):
        out = tmp_path / "r.csv"
        outcome = run_analyze(synth=small_scene_spec_file, out_csv=out, fps_count=10_000_000)
        assert outcome.exit_code == 0

    def test_zero_fps_count_rejected(self, tmp_path):
        assert main(["analyze", "--synth", "--fps-count", "0", "--out", str(tmp_path / "r.csv")]) == 1

    def test_no_boxes_header_only(self, tmp_path, clutter_only_spec_file):
        out = tmp_path / "r.csv"
        outcome = run_analyze(synth=clutter_only_spec_file, out_csv=out)
        assert outcome.exit_code == 0
        assert out.read_text().strip().splitlines() == [
            "box_id,source,radius,duplicate_pair_fraction,distinct_signatures,mean_pairwise_cosine"
        ]


@pytest.fixture
def scene_file(tmp_path_factory):
    """A small on-disk point binary around two boxes."""
    rng = np.random.default_rng(42)
    root = tmp_path_factory.mktemp("data")
    path = root / "scene.bin"
    n = 4000
    xyz = np.column_stack(
        [rng.uniform(2, 20, n), rng.uniform(-8, 8, n), rng.uniform(-2, 0.5, n)]
    ).astype(np.float32)
    intensity = rng.uniform(size=(n, 1)).astype(np.float32)
    arr = np.hstack([xyz, intensity]).astype("<f4")
    path.write_bytes(arr.tobytes())
    return str(path)


@pytest.fixture
def labels_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("labels")
    path = root / "labels.txt"
    # identity calibration: camera xyz is lidar xyz, so keep boxes inside the scene
    path.write_text(
        "Cyclist 0.0 0 -1.2 500 150 560 300 1.7 0.6 1.8 10.0 1.0 -1.5 -1.55\n"
        "Car 0.0 0 -1.2 500 150 560 300 1.5 1.7 4.0 12.0 -2.0 -1.4 0.4\n"
        "DontCare -1 -1 -10 500 150 560 300 -1 -1 -1 -1000 -1000 -1000 -10\n"
    )
    return str(path)


@pytest.fixture
def small_scene_spec_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("spec")
    path = root / "scene.toml"
    path.write_text(
        "seed = 2\n"
        "clutter_count = 200\n"
        "range_min = [-10.0, -10.0, -3.0]\n"
        "range_max = [10.0, 10.0, 3.0]\n"
        "[[object]]\n"
        "center = [0.0, 0.0, 0.0]\n"
        "size = [2.0, 1.0, 1.5]\n"
        "yaw = 0.1\n"
        "density = 40.0\n"
    )
    return str(path)


@pytest.fixture
def clutter_only_spec_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("spec2")
    path = root / "clutter.toml"
    path.write_text(
        "seed = 3\nclutter_count = 500\n"
        "range_min = [-10.0, -10.0, -3.0]\nrange_max = [10.0, 10.0, 3.0]\n"
    )
    return str(path)
