import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rvcdet.cli import main
from rvcdet.cloudio import read_detections, read_scene

SMALL = ["--set", "synth.n_objects=6", "--set", "synth.ground_points=300", "--set", "synth.clutter_objects=4",
         "--set", "grid.range=-20,-20,-3,20,20,3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n-scenes", "12", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    argv = ["train-subhead", "--kinds", "MLP-1,MLP-2", "--ks", "2,8", "--epochs", "3", "--per-class", "40",
            "--train-scenes", "30", "--out", str(out), *SMALL]
    assert main(argv) == 0
    return out


# -- synth -------------------------------------------------------------------

def test_synth_outputs_reload(synth_dir):
    names = sorted(p.name for p in synth_dir.iterdir())
    assert names[:2] == ["config.ini", "dets_0000.txt"]
    assert len([n for n in names if n.startswith("scene_")]) == 12
    s = read_scene(synth_dir / "scene_0003.txt")
    assert len(s.gt) == 6
    dets = read_detections(synth_dir / "dets_0003.txt")
    assert all(0 <= d.score <= 1 for d in dets)


def test_synth_summary_json(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--n-scenes", 2, "--out", tmp_path, *SMALL)
    assert code == 0
    summary = json.loads(out)
    assert summary["scenes"] == 2 and summary["boxes"] == 12
    assert 0 <= summary["false_positives"] <= summary["detections"]


def test_synth_byte_identical(tmp_path, synth_dir):
    assert main(["synth", "--n-scenes", "12", "--out", str(tmp_path), *SMALL]) == 0
    for p in synth_dir.glob("*.txt"):
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_synth_seed_changes_output(tmp_path):
    assert main(["synth", "--n-scenes", "1", "--seed", "9", "--out", str(tmp_path), *SMALL]) == 0
    other = tmp_path / "b"
    assert main(["synth", "--n-scenes", "1", "--seed", "10", "--out", str(other), *SMALL]) == 0
    assert (tmp_path / "scene_0000.txt").read_bytes() != (other / "scene_0000.txt").read_bytes()


def test_synth_zero_objects(tmp_path):
    assert main(["synth", "--n-scenes", "1", "--set", "synth.n_objects=0", "--out", str(tmp_path)]) == 0
    s = read_scene(tmp_path / "scene_0000.txt")
    assert len(s.gt) == 0 and len(s.cloud) > 0


def test_synth_figure(tmp_path):
    assert main(["synth", "--n-scenes", "1", "--figures", "--out", str(tmp_path), *SMALL]) == 0
    assert (tmp_path / "scene_0000.png").stat().st_size > 0


# -- voxelize ----------------------------------------------------------------

def test_voxelize_tiny_cloud(tmp_path, capsys):
    src = tmp_path / "c.csv"
    src.write_text("batch,x,y,z\n0,0.1,0.1,0.2\n0,0.2,0.3,0.4\n0,1.6,0.1,0.0\n0,9,9,9\n")
    code, out, _ = run(capsys, "voxelize", src, "--range", "0,0,-1,2,2,1", "--voxel", "1,1", "--out", tmp_path / "o",
                       "--features")
    assert code == 0
    stats = json.loads(out)
    assert stats["points_in"] == 4 and stats["points_skipped"] == 1
    assert stats["pillars"] == 2 and stats["max_occupancy"] == 2 and stats["grid_size"] == [2, 2, 1]
    lines = (tmp_path / "o" / "pillars.csv").read_text().splitlines()
    assert lines[0] == "batch,row,col,count,mean_x,mean_y,mean_z"
    assert lines[1].startswith("0,0,0,2,0.15") and lines[2].startswith("0,0,1,1,1.6")
    feats = (tmp_path / "o" / "features.csv").read_text().splitlines()
    assert len(feats) == 4 and feats[0].startswith("point,x_pt,y_pt,z_pt,x_center")


def test_voxelize_3d_has_layer_column(tmp_path, capsys):
    src = tmp_path / "c.csv"
    src.write_text("batch,x,y,z\n0,0.1,0.1,0.7\n")
    code, _, _ = run(capsys, "voxelize", src, "--range", "0,0,0,1,1,1", "--voxel", "1,1,0.5", "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "pillars.csv").read_text().splitlines()
    assert lines[0] == "batch,row,col,layer,count,mean_x,mean_y,mean_z"
    assert lines[1].startswith("0,0,0,1,1,")


def test_voxelize_out_of_range_only(tmp_path, capsys):
    src = tmp_path / "c.csv"
    src.write_text("batch,x,y,z\n0,50,50,0\n0,-50,0,0\n")
    code, out, _ = run(capsys, "voxelize", src, "--out", tmp_path / "o")
    assert code == 0
    assert json.loads(out)["pillars"] == 0
    assert (tmp_path / "o" / "pillars.csv").read_text().count("\n") == 1


def test_voxelize_kitti_bin(tmp_path, capsys, rng):
    pts = np.column_stack([rng.uniform(-30, 30, (500, 3)) * [1, 1, 0.05], rng.random(500)]).astype("<f4")
    pts.tofile(tmp_path / "000001.bin")
    code, out, _ = run(capsys, "voxelize", tmp_path / "000001.bin", "--out", tmp_path / "o")
    assert code == 0
    stats = json.loads(out)
    assert stats["points_in"] == 500 and stats["points_skipped"] == 0


def test_voxelize_scene_file(synth_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "voxelize", synth_dir / "scene_0000.txt", "--out", tmp_path, *SMALL)
    assert code == 0
    assert json.loads(out)["pillars"] > 0


def test_voxelize_bad_voxel_exit_1(tmp_path, capsys):
    src = tmp_path / "c.csv"
    src.write_text("batch,x,y,z\n0,0,0,0\n")
    code, out, err = run(capsys, "voxelize", src, "--range", "0,0,0,1,1,1", "--voxel", "0.3,0.3", "--out", tmp_path)
    assert code == 1 and out == "" and "axis x" in err


def test_voxelize_corrupt_file_exit_2(tmp_path, capsys):
    (tmp_path / "c.bin").write_bytes(b"\0" * 7)
    code, out, _ = run(capsys, "voxelize", tmp_path / "c.bin", "--out", tmp_path)
    assert code == 2 and out == ""


def test_voxelize_missing_file(tmp_path, capsys):
    code, _, _ = run(capsys, "voxelize", tmp_path / "absent.bin", "--out", tmp_path)
    assert code in (1, 2)


# -- train-subhead -----------------------------------------------------------

def test_train_grid(trained_dir):
    rows = list(csv.DictReader(open(trained_dir / "ablation.csv")))
    assert [(r["kind"], r["k"]) for r in rows] == [("MLP-1", "2"), ("MLP-1", "8"), ("MLP-2", "2"), ("MLP-2", "8")]
    assert rows[3]["params"] == str(192 * 384 + 384 + 384 * 6 + 6)
    table = (trained_dir / "ablation_table.csv").read_text().splitlines()
    assert table[0] == "architecture,2x2 input,8x8 input"
    for name in ("best.ckpt", "config.ini", "history_MLP-2_k8.csv", "subhead_MLP-1_k2.ckpt"):
        assert (trained_dir / name).exists()
    best = max(rows, key=lambda r: float(r["val_accuracy"]))
    tag = f"subhead_{best['kind']}_k{best['k']}.ckpt"
    assert (trained_dir / "best.ckpt").read_bytes() == (trained_dir / tag).read_bytes()


def test_train_reproducible(trained_dir, tmp_path):
    argv = ["train-subhead", "--kinds", "MLP-1,MLP-2", "--ks", "2,8", "--epochs", "3", "--per-class", "40",
            "--train-scenes", "30", "--out", str(tmp_path), *SMALL]
    assert main(argv) == 0
    for name in ("ablation.csv", "ablation_table.csv", "history_MLP-1_k8.csv", "best.ckpt"):
        assert (tmp_path / name).read_bytes() == (trained_dir / name).read_bytes()


def test_train_skips_small_conv(tmp_path, capsys):
    code, out, _ = run(capsys, "train-subhead", "--kinds", "1Conv+MLP-2", "--ks", "2,3", "--epochs", "1",
                       "--per-class", "10", "--train-scenes", "6", "--out", tmp_path, *SMALL)
    assert code == 0
    assert json.loads(out)["cells"] == 1
    assert (tmp_path / "ablation_table.csv").read_text().splitlines()[1].startswith("1Conv+MLP-2,-,")


@pytest.mark.filterwarnings("ignore:fewer than")
def test_train_only_invalid_cells_exit_1(tmp_path, capsys):
    code, _, _ = run(capsys, "train-subhead", "--kinds", "2Conv+MLP-2", "--ks", "2", "--epochs", "1",
                     "--per-class", "10", "--train-scenes", "4", "--out", tmp_path, *SMALL)
    assert code == 1


def test_train_from_saved_dataset(tmp_path, capsys):
    common = ["--kinds", "MLP-1", "--ks", "3", "--epochs", "1", "--per-class", "10", "--train-scenes", "6", *SMALL]
    assert run(capsys, "train-subhead", *common, "--save-dataset", "--out", tmp_path / "a")[0] == 0
    assert run(capsys, "train-subhead", *common, "--dataset", tmp_path / "a" / "crops.bin", "--out", tmp_path / "b")[0] == 0
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()


# -- eval --------------------------------------------------------------------

def _precision_rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return {r["pipeline"]: r["overall_precision"] for r in csv.DictReader(lines)}


def test_eval_with_subhead(synth_dir, trained_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--scenes", synth_dir, "--checkpoint", trained_dir / "best.ckpt",
                       "--out", tmp_path, *SMALL)
    assert code == 0
    text = (tmp_path / "precision.txt").read_text()
    assert out == text
    assert "# point filter threshold: 5" in text and "# score filter threshold: 0.3" in text
    rows = _precision_rows(tmp_path / "precision.csv")
    assert len(rows) == 4 and any(name.startswith("+ Sub-head (") for name in rows)
    assert float(rows["+ Score Filtering (Threshold 0.3)"]) > float(rows["Detector (raw)"])


def test_eval_without_checkpoint(synth_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--scenes", synth_dir, "--out", tmp_path, *SMALL)
    assert code == 0
    assert len(_precision_rows(tmp_path / "precision.csv")) == 3


def test_eval_thresholds_from_flags(synth_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--scenes", synth_dir, "--point-threshold", 7, "--score-threshold", 0.5,
                       "--out", tmp_path, *SMALL)
    assert code == 0 and "+ Point Filtering (Threshold 7)" in out and "# score filter threshold: 0.5" in out


def test_eval_empty_detections(tmp_path, capsys):
    assert main(["synth", "--n-scenes", "1", "--out", str(tmp_path), *SMALL]) == 0
    (tmp_path / "dets_0000.txt").write_text((tmp_path / "dets_0000.txt").read_text().splitlines()[0] + "\n")
    code, out, _ = run(capsys, "eval", "--scenes", tmp_path, "--out", tmp_path / "e", *SMALL)
    assert code == 0
    assert "undefined" in out


def test_eval_missing_checkpoint_exit_1(synth_dir, tmp_path, capsys):
    code, out, err = run(capsys, "eval", "--scenes", synth_dir, "--checkpoint", tmp_path / "nope.ckpt",
                         "--out", tmp_path)
    assert code == 1 and out == "" and "not found" in err


def test_eval_no_scenes_exit_2(tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--scenes", tmp_path, "--out", tmp_path)
    assert code == 2


# -- bench and report --------------------------------------------------------

def test_bench(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--sizes", "2000,8000", "--repeats", 1, "--out", tmp_path)
    assert code == 0
    res = json.loads(out)
    assert "ratio_4x" in res["summary"]["fdv"]
    assert (tmp_path / "bench.csv").read_text().startswith("stage,n,median_s,ns_per_point")


def test_bench_descending_sizes_exit_1(capsys):
    assert run(capsys, "bench", "--sizes", "8000,2000", "--repeats", 1)[0] == 1


def test_report(trained_dir, synth_dir, tmp_path, capsys):
    assert run(capsys, "eval", "--scenes", synth_dir, "--out", trained_dir, *SMALL)[0] == 0
    code, _, _ = run(capsys, "report", trained_dir, "--out", tmp_path)
    assert code == 0
    pngs = {p.name for p in tmp_path.glob("*.png")}
    assert {"ablation.png", "precision.png"} <= pngs


def test_report_nothing_exit_2(tmp_path, capsys):
    assert run(capsys, "report", tmp_path)[0] == 2


# -- argument handling -------------------------------------------------------

def test_unknown_command_exit_1(capsys):
    code, out, _ = run(capsys, "frobnicate")
    assert code == 1 and out == ""


def test_unknown_set_key_exit_1(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--set", "synth.bogus=1", "--out", tmp_path)
    assert code == 1 and "synth.bogus" in err


def test_config_file_then_flags(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[synth]\nn_scenes = 3\nn_objects = 2\n")
    code, out, _ = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "o", "--n-scenes", 1)
    assert code == 0
    assert json.loads(out)["scenes"] == 1 and json.loads(out)["boxes"] == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rvcdet.cli", "synth", "--n-scenes", "1", "--out", str(tmp_path),
                           *SMALL], capture_output=True, text=True)
    assert proc.returncode == 0
    json.loads(proc.stdout)
