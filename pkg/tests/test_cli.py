import json
import os

import numpy as np
import pytest

from mtvae import cli, data, evaluation, render, train


def run(*argv):
    return cli.run_cli([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.txt"
    spec.write_text("n_train = 24\nn_val = 4  # tiny\nn_test = 4\nobserved_range = 4, 6\nfuture = 6\n")
    cfg = root / "small.cfg"
    cfg.write_text("hidden = 8\nlatent = 4\nbatch_size = 4\nlearning_rate = 0.001\nK = 3\n")
    assert run("gen-data", "--spec", spec, "--out", root / "d", "--seed", 9) == 0
    assert run("train", "--data", root / "d", "--variant", "mtvae-add", "--steps", 12,
               "--config", cfg, "--out", root / "ck", "--seed", 1) == 0
    return root


def test_gen_data_outputs(workspace):
    d = workspace / "d"
    assert {"train.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "run.json"} <= set(os.listdir(d))
    splits, manifest = data.load_splits(d)
    assert len(splits["train"]) == 24
    assert manifest["synthetic_spec"]["seed"] == 9


def test_train_outputs_and_manifest(workspace):
    ck = workspace / "ck"
    assert (ck / "model.ckpt").exists()
    rows = train.read_trace(ck / "trace.tsv")
    assert len(rows) == 12
    manifest = json.loads((ck / "run.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 1
    assert manifest["config"]["model"]["hidden"] == 8
    assert manifest["config"]["train"]["total_steps"] == 12
    assert manifest["config"]["model"]["observed_range"] == [4, 6]
    assert "total_s" in manifest["timings"] and manifest["version"]


def test_flag_overrides_config(workspace, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("hidden = 8\nlatent = 4\nbatch_size = 2\nK = 3\ntotal_steps = 50\nseed = 3\n")
    assert run("train", "--data", workspace / "d", "--config", cfg, "--steps", 2, "--seed", 4,
               "--variant", "pred-lstm", "--out", tmp_path / "o") == 0
    snap = json.loads((tmp_path / "o" / "run.json").read_text())["config"]
    assert snap["train"]["total_steps"] == 2 and snap["train"]["seed"] == 4
    assert snap["model"]["variant"] == "PredictionLSTM"


def test_training_matches_library(workspace, tmp_path):
    assert run("train", "--data", workspace / "d", "--variant", "mtvae-add", "--steps", 12,
               "--config", workspace / "small.cfg", "--out", tmp_path / "again", "--seed", 1) == 0
    a = train.load_checkpoint(workspace / "ck" / "model.ckpt")
    b = train.load_checkpoint(tmp_path / "again" / "model.ckpt")
    splits, _ = data.load_splits(workspace / "d")
    lib = train.train(a.model_config, splits["train"], a.train_config)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
        assert np.array_equal(a.params[k], lib.checkpoint.params[k])


def test_resume_continues_run(workspace, tmp_path):
    # a fixed anneal length keeps the schedule independent of --steps
    cfg = tmp_path / "fixed.cfg"
    cfg.write_text((workspace / "small.cfg").read_text() + "kl_anneal_steps = 4\n")
    full, out = tmp_path / "full", tmp_path / "r"
    common = ("--data", workspace / "d", "--config", cfg, "--seed", 1)
    assert run("train", *common, "--steps", 12, "--out", full) == 0
    assert run("train", *common, "--steps", 6, "--out", out) == 0
    assert run("train", "--data", workspace / "d", "--resume", out, "--steps", 12, "--out", out) == 0
    full = train.read_trace(full / "trace.tsv")
    resumed = train.read_trace(out / "trace.tsv")
    assert len(resumed) == 12
    assert [r.as_tuple() for r in full] == [r.as_tuple() for r in resumed]


def test_sample_is_deterministic(workspace, tmp_path):
    ctx = workspace / "d" / "test.jsonl"
    outs = []
    for name in ("a.jsonl", "b.jsonl"):
        assert run("sample", "--ckpt", workspace / "ck", "--context", ctx, "--n", 5, "--seed", 7,
                   "--out", tmp_path / name) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    ds = data.load_dataset(tmp_path / "a.jsonl")
    assert len(ds) == 5 and ds.records[0].frames.shape == (6, 8)
    assert (tmp_path / "a.jsonl.run.json").exists()


def test_sample_matches_library(workspace, capsys):
    ck = workspace / "ck"
    assert run("sample", "--ckpt", ck, "--context", workspace / "d" / "test.jsonl", "--n", 3,
               "--seed", 2, "--from", "posterior") == 0
    printed = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    _, model = cli._load_model(str(ck))
    record = data.load_dataset(workspace / "d" / "test.jsonl").records[0]
    ref = cli.sample_frames(model, record, 3, None, "posterior", 2)
    got = np.array([p["frames"] for p in printed])
    assert np.array_equal(got, ref)


def test_eval_matches_library(workspace, tmp_path, capsys):
    out = tmp_path / "report.json"
    assert run("eval", "--ckpt", workspace / "ck", "--data", workspace / "d", "--stride", 16,
               "--samples-rmse", 5, "--samples-smse", 20, "--seed", 3, "--out", out) == 0
    assert "r_mse" in capsys.readouterr().out
    report = json.loads(out.read_text())
    ck = train.load_checkpoint(workspace / "ck" / "model.ckpt")
    splits, manifest = data.load_splits(workspace / "d")
    lib = evaluation.evaluate(evaluation.Model(ck.model_config, ck.params), splits["test"],
                              evaluation.EvalConfig(samples_rmse=5, samples_smse=20, stride=16, seed=3),
                              spec=data.SyntheticSpec.from_dict(manifest["synthetic_spec"]),
                              validation=splits["val"])
    assert report["aggregates"] == json.loads(lib.to_json())["aggregates"]
    assert report["bandwidth"] == lib.bandwidth


def test_eval_fixed_bandwidth(workspace, tmp_path):
    out = tmp_path / "r.json"
    assert run("eval", "--ckpt", workspace / "ck", "--data", workspace / "d", "--samples-rmse", 2,
               "--samples-smse", 4, "--bandwidth", 0.25, "--out", out) == 0
    assert json.loads(out.read_text())["bandwidth"] == 0.25


def test_analogy_and_render(workspace, tmp_path):
    test = workspace / "d" / "test.jsonl"
    out = tmp_path / "d.jsonl"
    assert run("analogy", "--ckpt", workspace / "ck", "--a", test, "--b", test, "--c", test, "--out", out) == 0
    assert data.load_dataset(out).records[0].frames.shape == (6, 8)
    assert run("render", "--seq", test, "--out", tmp_path / "strip.svg") == 0
    svg = (tmp_path / "strip.svg").read_text()
    assert svg.startswith("<svg") and "#b22222" in svg
    assert run("render", "--seq", out, "--out", tmp_path / "frames", "--layout", "frames") == 0
    assert len(list((tmp_path / "frames").glob("frame_*.svg"))) == 6


def test_render_library():
    frames = np.random.default_rng(0).uniform(-1, 1, (3, 6))
    svg = render.strip_svg(frames, split=2)
    assert svg.count("<polyline") == 3 and svg.count("#b22222") == 4
    assert len(render.frame_svgs(frames)) == 3
    with pytest.raises(ValueError, match="keypoints"):
        render.strip_svg(np.zeros((2, 3)))


@pytest.mark.parametrize("argv, code, needle", [
    (["train", "--data", "/nonexistent/d", "--out", "x"], 1, "/nonexistent/d"),
    (["sample", "--ckpt", "/no/ckpt", "--context", "c.jsonl"], 1, "/no/ckpt"),
    (["train", "--bogus-flag"], 2, "usage"),
    (["frobnicate"], 2, "usage"),
    (["train", "--data", "d", "--variant", "nope", "--out", "x"], 2, "usage"),
])
def test_error_exits(argv, code, needle, capsys):
    assert cli.run_cli(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: ") and needle in err[-1]


def test_posterior_for_prediction_lstm_is_an_error(workspace, tmp_path, capsys):
    out = tmp_path / "p"
    assert run("train", "--data", workspace / "d", "--variant", "pred-lstm", "--steps", 1,
               "--config", workspace / "small.cfg", "--out", out) == 0
    assert run("sample", "--ckpt", out, "--context", workspace / "d" / "test.jsonl", "--from", "posterior") == 1
    assert "recognition" in capsys.readouterr().err


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nkeep = 0.8\nlayer-norm = false\nobserved_range = 8, 12\nvariant = MTVAEAdd\n")
    assert cli.read_config(p) == {"keep": 0.8, "layer_norm": False, "observed_range": (8, 12),
                                  "variant": "MTVAEAdd"}
    p.write_text("oops\n")
    with pytest.raises(cli.CliError, match=":1:"):
        cli.read_config(p)
    with pytest.raises(cli.CliError, match="unknown config keys: wat"):
        cli._split_config({"wat": 1})
