import json

import numpy as np
import pytest
import yaml

from dc3do import pipeline
from dc3do.cli import main
from dc3do.config import ConfigError, load_config
from dc3do.nets import ModelDims
from dc3do.schedule import make_schedule
from dc3do.train import read_loss_csv

TINY = {
    "seed": 1,
    "dataset": {"train_per_class": 10, "test_per_class": 3, "n_points": 256},
    "model": {"d_z": 32, "hidden": 32, "enc_hidden": 16},
    "train": {"steps": 2000, "batch_size": 32, "log_every": 100},
    "classify": {"n_trials": 8},
    "views": {"train_steps": 60, "train_objects_per_class": 3, "eval_objects_per_class": 2, "n_trials": 4,
              "grid_sizes": [8, 16], "grid_views": [1, 6], "hidden": 16},
}


def write_config(tmp_path, **changes):
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(tmp_path / "out")
    for section, values in changes.items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """gen-data + train once; tests reuse the outputs."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["gen-data", "-c", str(cfg)]) == 0
    assert main(["train", "-c", str(cfg)]) == 0
    return tmp, cfg


def test_gen_data_counts_and_manifest(tmp_path):
    cfg = write_config(tmp_path, dataset={"test_per_class": 0})
    assert main(["gen-data", "-c", str(cfg)]) == 0
    data = tmp_path / "out" / "data"
    assert len(list(data.glob("*/*.xyz"))) == 30
    rows = json.loads((data / "manifest.json").read_text())["rows"]
    assert len(rows) == 30 and all({"file", "label", "seed"} <= set(r) for r in rows)


def test_gen_data_is_bitwise_reproducible(tmp_path):
    cfg = write_config(tmp_path)
    main(["gen-data", "-c", str(cfg)])
    first = {p: p.read_bytes() for p in (tmp_path / "out" / "data").rglob("*") if p.is_file()}
    main(["gen-data", "-c", str(cfg)])
    assert first == {p: p.read_bytes() for p in (tmp_path / "out" / "data").rglob("*") if p.is_file()}


def test_invalid_classes_write_nothing(tmp_path):
    cfg = write_config(tmp_path, dataset={"classes": [0, 7]})
    assert main(["gen-data", "-c", str(cfg)]) == 1
    assert not (tmp_path / "out").exists()


def test_unknown_key_rejected(tmp_path):
    cfg = write_config(tmp_path, model={"depth": 3})
    assert main(["gen-data", "-c", str(cfg)]) == 1
    with pytest.raises(ConfigError, match="depth"):
        load_config(cfg)


def test_overrides_win(tmp_path):
    cfg = load_config(write_config(tmp_path), ["train.steps=7", "classify.candidates=[0, 2]"])
    assert cfg.train.steps == 7 and cfg.classify.candidates == [0, 2]
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path), ["train.steps=seven"])


def test_train_lowers_loss_and_writes_outputs(run):
    tmp, _ = run
    trace = read_loss_csv(tmp / "out" / "loss.csv")
    assert trace[-1][1] < trace[0][1]
    assert (tmp / "out" / "model.ckpt").is_file() and (tmp / "out" / "loss.png").is_file()
    manifest = json.loads((tmp / "out" / "run_manifest.train.json").read_text())
    assert {"config_sha256", "seed", "versions", "config"} <= set(manifest)


def test_resume_continues_numbering(tmp_path):
    cfg = write_config(tmp_path, train={"steps": 30, "log_every": 10})
    main(["gen-data", "-c", str(cfg)])
    assert main(["train", "-c", str(cfg)]) == 0
    out = tmp_path / "out"
    assert main(["train", "-c", str(cfg), "--resume", str(out / "model.ckpt")]) == 0
    steps = [s for s, _ in read_loss_csv(out / "loss.csv")]
    assert steps == [1, 10, 20, 30, 31, 40, 50, 60]


def test_train_missing_dataset(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "-c", str(cfg), "--data", str(tmp_path / "nowhere")]) == 1


def test_classify_json(run, capsys):
    tmp, cfg = run
    sample = tmp / "out" / "data" / "test" / "slab_0000.xyz"
    capsys.readouterr()
    assert main(["classify", "-c", str(cfg), "--checkpoint", str(tmp / "out" / "model.ckpt"), str(sample)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["predicted"] in (0, 1, 2)
    assert sum(rec["posterior"]) == pytest.approx(1, abs=1e-9)
    assert (tmp / "out" / "classify" / "slab_0000.json").is_file()


def test_classify_bad_inputs(run, caplog):
    tmp, cfg = run
    ckpt = str(tmp / "out" / "model.ckpt")
    missing = str(tmp / "missing.xyz")
    assert main(["classify", "-c", str(cfg), "--checkpoint", ckpt, missing]) == 1
    assert missing in caplog.text
    sample = str(tmp / "out" / "data" / "test" / "slab_0000.xyz")
    assert main(["classify", "-c", str(cfg), "--set", "classify.candidates=[1]", "--checkpoint", ckpt, sample]) == 1
    assert main(["classify", "-c", str(cfg), "--checkpoint", str(tmp / "nope.ckpt"), sample]) == 1
    bad = tmp / "bad.off"
    bad.write_text("OFX\n")
    assert main(["classify", "-c", str(cfg), "--checkpoint", ckpt, str(bad)]) == 1


def test_classify_mesh_input(run, capsys):
    tmp, cfg = run
    mesh = tmp / "tri.off"
    mesh.write_text("OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n3 0 1 3\n")
    assert main(["classify", "-c", str(cfg), "--checkpoint", str(tmp / "out" / "model.ckpt"), str(mesh)]) == 0


def test_eval_report(run):
    tmp, cfg = run
    assert main(["eval", "-c", str(cfg), "--checkpoint", str(tmp / "out" / "model.ckpt")]) == 0
    ev = tmp / "out" / "eval"
    lines = (ev / "report.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 3 + 1  # header, classes, mean
    assert lines[-1].startswith("mean,")
    assert len((ev / "objects.jsonl").read_text().strip().splitlines()) == 9
    assert (ev / "accuracy.png").is_file() and (ev / "confusion.png").is_file()


class OracleModel:
    """Encodes the true label into a huge latent and always scores it lowest."""

    def __init__(self, data, n_classes=3):
        self.dims = ModelDims(d_z=4, hidden=1, n_classes=n_classes, T=1000)
        self.schedule = make_schedule(1000)
        self.lookup = {c.tobytes(): int(y) for c, y in zip(data.clouds, data.labels)}

    def encode(self, cloud):
        z = np.zeros(4)
        z[self.lookup[np.asarray(cloud).tobytes()]] = 1e6
        return z

    def __call__(self, z_t, t, c):
        label = np.argmax(z_t[:, :3], axis=1)
        return np.where((np.asarray(c) == label)[:, None], 0.0, 10.0) * np.ones_like(z_t)


def test_perfect_oracle_scores_one(run):
    tmp, cfg_path = run
    cfg = load_config(cfg_path)
    data = pipeline.load_dataset(tmp / "out" / "data", "test")
    report, _ = pipeline.evaluate_points(cfg, OracleModel(data), data)
    assert report.accuracy == {0: 1.0, 1: 1.0, 2: 1.0}
    assert report.multiclass_accuracy == {0: 1.0, 1: 1.0, 2: 1.0}


def test_render_writes_pgm(run):
    tmp, cfg = run
    sample = tmp / "out" / "data" / "test" / "chair_0001.xyz"
    assert main(["render", "-c", str(cfg), "--size", "16", str(sample)]) == 0
    pgms = sorted((tmp / "out" / "render").glob("chair_0001_*.pgm"))
    assert len(pgms) == 6 and pgms[0].read_bytes().startswith(b"P5\n16 16\n255\n")
    assert (tmp / "out" / "render" / "chair_0001_views.png").is_file()


def test_ablate_views_grid(run):
    tmp, cfg = run
    assert main(["ablate-views", "-c", str(cfg)]) == 0
    text = (tmp / "out" / "ablation" / "ablation.csv").read_text().strip().splitlines()
    assert text[0] == "size,n_views,accuracy,seconds,seconds_per_object"
    rows = [dict(zip(text[0].split(","), line.split(","))) for line in text[1:]]
    assert [(int(r["size"]), int(r["n_views"])) for r in rows] == [(8, 1), (8, 6), (16, 1), (16, 6)]
    for s in (8, 16):
        one, six = (float(r["seconds"]) for r in rows if int(r["size"]) == s)
        assert six > one
    assert (tmp / "out" / "ablation" / "ablation.png").is_file()
    # reuse the saved per-size models
    assert main(["ablate-views", "-c", str(cfg), "--checkpoint-dir", str(tmp / "out" / "ablation")]) == 0


def test_ablate_empty_grid(tmp_path):
    cfg = write_config(tmp_path, views={**TINY["views"], "grid_sizes": []})
    assert main(["ablate-views", "-c", str(cfg)]) == 1


def test_outputs_stay_under_output_dir(tmp_path):
    cfg = write_config(tmp_path, train={"steps": 5})
    main(["gen-data", "-c", str(cfg)])
    main(["train", "-c", str(cfg)])
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cfg.yaml", "out"]
    assert (tmp_path / "out" / "run_manifest.gen-data.json").is_file()


def test_usage_errors_exit_1():
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["--help"]) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_failure_exit_2(tmp_path):
    cfg = write_config(tmp_path, train={"steps": 50, "learning_rate": 1e6})
    main(["gen-data", "-c", str(cfg)])
    assert main(["train", "-c", str(cfg)]) == 2
