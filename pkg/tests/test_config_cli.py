import csv
import json

import numpy as np
import pytest

from cdcl import cli
from cdcl.config import ConfigError, RunConfig, load_run_config, pairs_from_snapshot, parse_lines, schema
from cdcl.corpus import load_images, save_images, synthetic_corpus, synthetic_image
from cdcl.degradation import DegradationSetting, degrade, sample_spec
from cdcl.imaging import read_image
from cdcl.trainer import load_checkpoint

TINY = """\
# tiny run
model.channels = 8
model.n_dags = 1
model.n_dadaus = 1
model.estimator_divisor = 16
train.scale = 2          # model.scale follows
train.B = 4
train.D = 2
train.patch = 32
train.pretrain_epochs = 3
train.drop_epoch = 2
train.joint_epochs = 2
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    save_images(tmp_path / "hr", synthetic_corpus(4, 40, 0), "img")
    (tmp_path / "run.cfg").write_text(TINY)
    return tmp_path


# -- config ---------------------------------------------------------------------

def test_parse_lines():
    assert parse_lines(["a = 1 # c", "", "# only comment", "b=x=y"]) == {"a": "1", "b": "x=y"}
    with pytest.raises(ConfigError, match=":1:"):
        parse_lines(["novalue"])


def test_from_pairs_types_and_scale_propagation():
    cfg = RunConfig.from_pairs({"train.scale": "2", "train.augment": "off", "train.widths": "0.2, 2.6",
                                "train.setting": "0", "model.channels": "16", "train.tau": "0.2"})
    assert cfg.model.scale == 2 and cfg.train.augment is False
    assert cfg.train.widths == (0.2, 2.6) and cfg.model.channels == 16 and cfg.train.tau == 0.2


def test_config_errors():
    with pytest.raises(ConfigError, match="train.nope"):
        RunConfig.from_pairs({"train.nope": "1"})
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig.from_pairs({"train.B": "many"})
    with pytest.raises(ConfigError):
        RunConfig.from_pairs({"train.scale": "2", "model.scale": "4"})
    with pytest.raises(ConfigError):
        RunConfig.from_pairs({"train.D": "1"})


def test_dump_round_trip():
    cfg = RunConfig.from_pairs({"train.setting": "0", "train.widths": "0.2,2.6"})
    again = RunConfig.from_pairs(parse_lines(cfg.dump().splitlines()))
    assert again == cfg
    assert set(k for k, _ in cfg.items()) == set(schema())


def test_layering_order(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("train.B = 8\ntrain.D = 3\n")
    base = pairs_from_snapshot({"model": {"channels": 16}, "train": {"B": 4, "seed": 5}})
    cfg = load_run_config(path, ["train.D=2"], base)
    assert (cfg.model.channels, cfg.train.B, cfg.train.D, cfg.train.seed) == (16, 8, 2, 5)


# -- corpus ---------------------------------------------------------------------

def test_synthetic_corpus_deterministic(tmp_path):
    a, b = synthetic_corpus(2, 32, 4), synthetic_corpus(2, 32, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    img = synthetic_image(20, 30, np.random.default_rng(0))
    assert img.shape == (20, 30, 3) and img.min() >= 0 and img.max() <= 1
    save_images(tmp_path, a, "s")
    paths, imgs = load_images(tmp_path)
    assert [p.name for p in paths] == ["s0000.ppm", "s0001.ppm"]
    assert imgs[0].shape == (32, 32, 3)


# -- CLI --------------------------------------------------------------------------

def test_worker_count(monkeypatch):
    monkeypatch.setenv("CDCL_THREADS", "3")
    assert cli.worker_count() == 3
    monkeypatch.setenv("CDCL_THREADS", "zero")
    with pytest.raises(cli.UsageError):
        cli.worker_count()


def test_image_seed_stable():
    assert cli.image_seed(7, 0) == cli.image_seed(7, 0) != cli.image_seed(7, 1)
    assert cli.image_seed(7, 0) >= 0


def test_degrade_command(workdir):
    assert cli.main(["degrade", "--setting", "2", "--scale", "4", "--in", "hr", "--out", "lr", "--seed", "7"]) == 0
    rows = list(csv.DictReader(open(workdir / "lr" / "manifest.csv")))
    assert len(rows) == 4 and rows[0]["blur_kind"] == "aniso"
    # a manifest row alone reproduces its LR image
    r = rows[2]
    rng = np.random.default_rng(int(r["seed"]))
    spec = sample_spec(DegradationSetting.from_preset(2), 4, rng)
    lr = degrade(read_image(r["hr_path"]), spec, rng)
    np.testing.assert_allclose(read_image(r["lr_path"]), lr, atol=0.5 / 255 + 1e-6)
    run = json.loads((workdir / "lr" / "run.json").read_text())
    assert run["command"] == "degrade" and "manifest.csv" in run["files"]


def test_degrade_parallel_matches_serial(workdir, monkeypatch):
    monkeypatch.setenv("CDCL_THREADS", "1")
    cli.main(["degrade", "--in", "hr", "--out", "a", "--seed", "3", "--setting", "3"])
    monkeypatch.setenv("CDCL_THREADS", "4")
    cli.main(["degrade", "--in", "hr", "--out", "b", "--seed", "3", "--setting", "3"])
    for i in range(4):
        assert (workdir / "a" / f"img{i:04d}_lr.ppm").read_bytes() == (workdir / "b" / f"img{i:04d}_lr.ppm").read_bytes()


def test_training_pipeline(workdir):
    assert cli.main(["pretrain", "--config", "run.cfg", "--data", "hr", "--out", "pre", "--save-every", "1"]) == 0
    assert (workdir / "pre" / "pretrain_step000001.cdck").exists()
    trace = list(csv.DictReader(open(workdir / "pre" / "loss_trace.csv")))
    assert len(trace) == 3
    echoed = (workdir / "pre" / "config.txt").read_text()
    assert "model.channels = 8" in echoed and "train.B = 4" in echoed

    assert cli.main(["pretrain", "--resume", "pre/pretrain_step000001.cdck", "--data", "hr", "--out", "pre2"]) == 0
    assert (workdir / "pre" / "pretrain.cdck").read_bytes() == (workdir / "pre2" / "pretrain.cdck").read_bytes()

    assert cli.main(["train", "--pretrained", "pre/pretrain.cdck", "--data", "hr", "--out", "joint"]) == 0
    ck = load_checkpoint(workdir / "joint" / "joint.cdck")
    assert ck.counters["stage"] == "joint" and ck.counters["step"] == 2

    lr_img = workdir / "small.ppm"
    from cdcl.imaging import write_image
    write_image(np.full((6, 10, 3), 0.5), lr_img)
    assert cli.main(["infer", "--model", "joint/joint.cdck", "--in", "small.ppm", "--out", "sr.ppm"]) == 0
    assert read_image(workdir / "sr.ppm").shape == (12, 20, 3)

    assert cli.main(["eval", "--model", "joint/joint.cdck", "--bench", "hr", "--grid", "setting1x3",
                     "--scale", "2", "--out", "ev"]) == 0
    rows = list(csv.DictReader(open(workdir / "ev" / "report.csv")))
    assert [r["cell"] for r in rows] == ["b0.8", "b1.6", "b2.4"] and all(r["scale"] == "2" for r in rows)

    assert cli.main(["export-reps", "--model", "pre/pretrain.cdck", "--data", "hr", "--patch", "32",
                     "--per-image", "1", "--out", "reps"]) == 0
    summary = json.loads((workdir / "reps" / "summary.json").read_text())
    assert summary["n_samples"] == 8 and summary["classes"] == ["b0.2", "b2.6"]


def test_train_requires_a_start(workdir):
    assert cli.main(["train", "--data", "hr", "--out", "j"]) == 1
    assert not (workdir / "j").exists()


def test_eval_bicubic_table_layout(workdir):
    assert cli.main(["eval", "--model", "bicubic", "--bench", "hr", "--grid", "setting1x4", "--out", "ev"]) == 0
    rows = list(csv.DictReader(open(workdir / "ev" / "report.csv")))
    assert [r["cell"] for r in rows] == ["b1.2", "b2.4", "b3.6"]
    assert list(rows[0]) == ["grid", "cell", "scale", "n_images", "psnr", "ssim", "params", "ms_per_image"]


@pytest.mark.parametrize("argv", [
    ["eval", "--model", "bicubic", "--bench", "hr", "--bogus", "--out", "x"],
    ["pretrain", "--data", "hr", "--synthetic", "3", "--out", "x"],
    ["pretrain", "--data", "hr", "--set", "train.nope=1", "--out", "x"],
    ["degrade", "--in", "hr", "--out", "x", "--setting", "0"],
    ["frobnicate"],
])
def test_validation_errors_exit_one_and_write_nothing(workdir, capsys, argv):
    assert cli.main(argv) == 1
    assert not (workdir / "x").exists()
    if "--bogus" in argv:
        assert "--bogus" in capsys.readouterr().err


def test_missing_inputs(workdir):
    assert cli.main(["infer", "--model", "nope.cdck", "--in", "a.ppm", "--out", "b.ppm"]) == 1
    assert cli.main(["eval", "--model", "bicubic", "--bench", "empty", "--out", "ev"]) == 1


@pytest.mark.parametrize("cmd", ["degrade", "pretrain", "train", "infer", "eval", "export-reps"])
def test_help_lists_flags_with_defaults(cmd, capsys):
    assert cli.main([cmd, "--help"]) == 0
    out = capsys.readouterr().out
    assert "--out" in out
    if cmd in ("degrade", "eval"):
        assert "default:" in out
