import csv
import json

import numpy as np
import pytest

from latentcov.cli import main
from latentcov.config import RunConfig, dump_config, load_config
from latentcov.numerics import read_checkpoint
from latentcov.autoencoder import load_model
from latentcov.synthetic import SynthConfig, generate_event, generate_noise
from latentcov.waveforms import Waveform, write_container, write_manifest

SMALL_INI = """
[architecture]
base_channels = 2
[train]
epochs = 2
batch_size = 16
lr = 1e-3
[method]
k = 2
[projection]
epochs = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL_INI)
    assert main(["--config", str(root / "small.ini"), "--out", str(root / "data"), "synth",
                 "--n-event", "12", "--n-noise", "12"]) == 0
    return root


def run(ws, *args):
    return main(["--config", str(ws / "small.ini"), *args])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config ----------------------------------------------------------------------

def test_defaults_follow_published_values():
    cfg = RunConfig()
    assert cfg.preprocess.window_seconds == 30 and cfg.preprocess.jitter_sigma == 1e-6
    assert (cfg.preprocess.band_lo_hz, cfg.preprocess.band_hi_hz) == (1, 20)
    assert cfg.train.denoise_sigma == 0.2 and cfg.train.batch_size == 256
    assert cfg.train.epochs == 20 and cfg.train.lr == 1e-4
    assert cfg.trigger.sigma0_seconds == 2.5 and cfg.method.k == 5


def test_config_round_trip(tmp_path):
    cfg = load_config(None)
    cfg.synth.snr_range = (1.5, 4.0)
    cfg.method.denoise_sigma = 0.3
    dump_config(cfg, tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back == cfg


def test_config_errors(tmp_path):
    (tmp_path / "a.ini").write_text("[bogus]\nx = 1\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "a.ini")
    (tmp_path / "b.ini").write_text("[train]\nepochs = many\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "b.ini")
    (tmp_path / "c.ini").write_text("[train]\nwarmup = 3\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "c.ini")


# -- synth -----------------------------------------------------------------------

def test_synth_outputs_and_seed(workspace, capsys, tmp_path):
    data = workspace / "data"
    for name in ("synth.rcvr", "manifest.txt", "report.txt", "config.ini"):
        assert (data / name).exists()
    args = ["--seed", "7", "synth", "--n-event", "3", "--n-noise", "2"]
    assert run(workspace, "--out", str(tmp_path / "x"), *args) == 0
    assert run(workspace, "--out", str(tmp_path / "y"), *args) == 0
    assert "snr histogram" in capsys.readouterr().out
    a = (tmp_path / "x/synth.rcvr").read_bytes()
    assert a == (tmp_path / "y/synth.rcvr").read_bytes()
    assert a != (data / "synth.rcvr").read_bytes()
    assert load_config(tmp_path / "x/config.ini").synth.seed == 7


def test_usage_errors(workspace, tmp_path):
    (tmp_path / "bad.ini").write_text("[synth]\nsnr_range = 5, 1\n")
    assert main(["--config", str(tmp_path / "bad.ini"), "synth"]) == 1
    assert main(["--config", str(tmp_path / "missing.ini"), "synth"]) == 1
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        main(["score", "m.txt", "--model", "x", "--method", "magic"])
    assert err.value.code == 1


def test_data_errors(workspace, tmp_path):
    assert run(workspace, "train", str(tmp_path / "nope.txt")) == 2
    (tmp_path / "m.txt").write_text("missing.rcvr\n")
    assert run(workspace, "--out", str(tmp_path / "o"), "train", str(tmp_path / "m.txt")) == 2
    assert run(workspace, "score", str(workspace / "data/manifest.txt"), "--model",
               str(tmp_path)) == 2


# -- train / score ---------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "model"
    assert run(workspace, "--out", str(out), "train", str(workspace / "data/manifest.txt"),
               "--denoise", "0.2", "--epochs", "3") == 0
    return out


def test_train_outputs(trained, workspace):
    assert len(rows(trained / "history.csv")) == 3
    run_meta = json.loads((trained / "run.json").read_text())
    assert run_meta["denoise_sigma"] == 0.2 and run_meta["method"] == "single"
    cfg = load_config(trained / "config.ini")
    assert cfg.train.epochs == 3
    load_model(trained / "model.rcvw", cfg.architecture)


def test_train_ensemble(workspace):
    out = workspace / "ens"
    assert run(workspace, "--out", str(out), "train", str(workspace / "data/manifest.txt"),
               "--method", "ensemble") == 0
    meta = json.loads((out / "run.json").read_text())
    assert meta["models"] == ["model_m0.rcvw", "model_m1.rcvw"]
    assert meta["denoise_sigma"] == 0.0
    assert set(read_checkpoint(out / "projections.rcvw")) >= {"proj0.matrix", "proj1.matrix"}
    assert len(rows(out / "history_m1.csv")) == 2
    assert run(workspace, "--out", str(out / "scores"), "score",
               str(workspace / "data/manifest.txt"), "--model", str(out)) == 0
    assert {r["method"] for r in rows(out / "scores/scores.csv")} == {"ensemble"}


def test_score_rows_match_filter(trained, workspace, tmp_path):
    cfg = SynthConfig()
    recs = [generate_event(cfg, 0), generate_noise(cfg, 0), generate_noise(cfg, 1)]
    edge = Waveform(recs[0].samples, 100.0, "edge-event", "event", 100)
    write_container(tmp_path / "d.rcvr", recs + [edge])
    write_manifest(tmp_path / "m.txt", ["d.rcvr"])
    out = tmp_path / "s"
    assert main(["--out", str(out), "score", str(tmp_path / "m.txt"), "--model", str(trained),
                 "--dump-profiles"]) == 0
    got = rows(out / "scores.csv")
    assert [r["id"] for r in got] == [w.id for w in recs]
    assert all(np.isfinite(float(r["score"])) for r in got)
    assert (out / "config.ini").exists()
    prof = rows(out / "profiles.csv")
    assert len(prof) % 3 == 0 and {r["id"] for r in prof} == {w.id for w in recs}
    assert main(["--out", str(tmp_path / "s2"), "score", str(tmp_path / "m.txt"), "--model",
                 str(trained)]) == 0
    assert (out / "scores.csv").read_bytes() == (tmp_path / "s2/scores.csv").read_bytes()


def test_score_augmented_from_single_model(trained, workspace, tmp_path):
    assert main(["--out", str(tmp_path), "score", str(workspace / "data/manifest.txt"),
                 "--model", str(trained), "--method", "augmented", "--k", "2"]) == 0
    assert len(rows(tmp_path / "scores.csv")) == 24
    assert main(["score", str(workspace / "data/manifest.txt"), "--model", str(trained),
                 "--method", "ensemble"]) == 2


# -- evaluate --------------------------------------------------------------------

def test_evaluate_cv_default_folds_and_rerun(workspace, tmp_path):
    args = ["--threads", "1", "evaluate", str(workspace / "data/manifest.txt"), "--epochs", "1",
            "--methods", "single:0"]
    assert run(workspace, "--out", str(tmp_path / "a"), *args) == 0
    assert run(workspace, "--out", str(tmp_path / "b"), *args) == 0
    report = rows(tmp_path / "a/report.csv")
    folds = [r for r in report if r["fold"] not in ("mean", "std")]
    assert len(folds) == 5
    assert all(0.0 <= float(r["auc"]) <= 1.0 for r in folds)
    assert (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()
    for ckpt in sorted((tmp_path / "a/checkpoints").iterdir()):
        assert ckpt.read_bytes() == (tmp_path / "b/checkpoints" / ckpt.name).read_bytes()
    assert (tmp_path / "a/table.txt").exists() and (tmp_path / "a/config.ini").exists()


def test_evaluate_cross_dataset(workspace, tmp_path):
    assert run(workspace, "--seed", "3", "--out", str(tmp_path / "other"), "synth", "--n-event",
               "6", "--n-noise", "6", "--noise-spectrum", "white", "--name", "other") == 0
    assert run(workspace, "--out", str(tmp_path / "ev"), "evaluate",
               str(workspace / "data/manifest.txt"), str(tmp_path / "other/manifest.txt"),
               "--folds", "2", "--epochs", "1", "--methods", "single:0", "--no-checkpoints") == 0
    report = rows(tmp_path / "ev/report.csv")
    assert {(r["train_dataset"], r["test_dataset"]) for r in report} == {("data", "other")}
    assert not (tmp_path / "ev/checkpoints").exists()
