import csv
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from hocnn import config as cfgmod
from hocnn.cli import main
from hocnn.errors import ConfigurationError
from hocnn.network import checkpoint_bytes, load_checkpoint
from hocnn.retina import read_responses
from hocnn.stimulus import dataset_file_size, read_dataset

TINY = """
seed = 3
n_bootstrap = 50
[stimulus]
height = 24
width = 24
check_size = 4
n_frames = 10
n_train = 10
n_test = 3
n_repeats = 4
[cells]
n_linear = 2
n_multiplicative = 2
n_expansion = 2
n_distractor = 1
margin = 6
[model]
channels = [2, 2]
[train]
max_epochs = 2
[sta]
n_frames = 600
height = 16
width = 16
n_cells = 2
"""

PIPELINE = ("generate", "simulate", "train", "eval", "decode", "sta")


def write_config(tmp_path, text=TINY, name="c.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def run(cfg, out, *args, seed=None):
    argv = ["--config", str(cfg), "--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv + list(args))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    outs = [root / "a", root / "b"]
    for out in outs:
        for command in PIPELINE:
            assert run(cfg, out, command) == 0, command
    return cfg, outs


# --- configuration ------------------------------------------------------------


def test_reference_file_pins_every_default():
    assert cfgmod.load_config() == cfgmod.ExperimentConfig()
    text = cfgmod.REFERENCE_PATH.read_text()
    for name, section in cfgmod.config_to_dict(cfgmod.ExperimentConfig()).items():
        if isinstance(section, dict):
            assert f"[{name}]" in text
            for key in section:
                assert f"\n{key} = " in text, (name, key)


def test_dump_and_reload(tmp_path):
    cfg = cfgmod.load_config(write_config(tmp_path))
    assert cfg.stimulus.height == 24 and cfg.model.channels == (2, 2)
    again = cfgmod.load_config(write_config(tmp_path, cfgmod.dump_config(cfg), "d.toml"))
    assert again == cfg


@pytest.mark.parametrize(
    "text",
    [
        "bogus = 1",
        "[stimulus]\nheigth = 10",
        "[nothing]\na = 1",
        "[stimulus]\nheight = 'tall'",
        "[stimulus]\nstatic = 1",
        "[train]\nlr = true",
        "[model]\nkind = 'transformer'",
        "[train]\nfraction = 1.5",
        "[sta]\nheight = 5",
        "seed = [",
    ],
)
def test_bad_configs_rejected(tmp_path, text):
    with pytest.raises(ConfigurationError):
        cfgmod.load_config(write_config(tmp_path, text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        cfgmod.load_config(tmp_path / "absent.toml")


# --- commands -------------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, "[stimulus]\nwat = 1", "bad.toml")
    assert run(bad, tmp_path / "o", "generate") == 2
    assert "wat" in capsys.readouterr().err
    cfg = write_config(tmp_path)
    assert run(cfg, tmp_path / "o", "train") == 3  # nothing generated yet
    empty = write_config(tmp_path, TINY.replace("n_train = 10", "n_train = 0").replace("n_test = 3", "n_test = 0"), "e.toml")
    assert run(empty, tmp_path / "e", "generate") == 3


def test_nan_input_gives_numeric_exit(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "o"
    assert run(cfg, out, "generate") == 0
    assert run(cfg, out, "simulate") == 0
    path = out / "stimulus.hocv"
    raw = bytearray(path.read_bytes())
    meta_len = int.from_bytes(raw[6:10], "little")
    raw[10 + meta_len : 10 + meta_len + 4] = np.float32(np.nan).tobytes()
    path.write_bytes(bytes(raw))
    assert run(cfg, out, "train") == 4
    assert (out / "model.hock").exists() and (out / "train_log.csv").exists()


def test_collisions_need_force(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "o"
    assert run(cfg, out, "generate") == 0
    before = (out / "stimulus.hocv").read_bytes()
    assert run(cfg, out, "generate") == 2
    assert main(["--config", str(cfg), "--out", str(out), "--force", "--seed", "9", "generate"]) == 0
    assert (out / "stimulus.hocv").read_bytes() != before


def test_generate_file_size_matches_format(pipeline):
    cfg, (a, _) = pipeline
    ds = read_dataset(a / "stimulus.hocv")
    size = (a / "stimulus.hocv").stat().st_size
    assert size == dataset_file_size(ds)
    meta_len = int.from_bytes((a / "stimulus.hocv").read_bytes()[6:10], "little")
    assert size == 10 + meta_len + 4 * 13 * 10 * 24 * 24 + 8 * 13 * 10 * 8
    assert len(read_csv(a / "labels.csv")) == 1 + 13 * 10


def test_simulate_outputs(pipeline):
    _, (a, _) = pipeline
    rel = read_csv(a / "reliability.csv")
    assert len(rel) == 1 + 7
    test = read_responses(a / "responses_test.horx")
    assert test.counts.shape == (4, 7, 3 * 10 * 2)
    assert len(json.loads((a / "cells.json").read_text())) == 7


def test_checkpoint_round_trip(pipeline):
    _, (a, _) = pipeline
    raw = (a / "model.hock").read_bytes()
    state = load_checkpoint(a / "model.hock")
    assert checkpoint_bytes(state) == raw
    assert [l.kind for l in state.layers][:2] == ["hoconv3d", "batch_norm"]
    assert state.input_shape[1:] == (24, 24, 1)


def test_eval_aggregate_is_mean_of_cells(pipeline):
    _, (a, _) = pipeline
    rows = read_csv(a / "metrics.csv")
    per_cell = np.array([float(r[2]) for r in rows[1:-2]])
    assert rows[-2][0] == "mean" and rows[-1][0] == "stderr"
    finite = per_cell[np.isfinite(per_cell)]
    assert_allclose(float(rows[-2][2]), finite.mean(), rtol=1e-12)
    assert_allclose(float(rows[-1][2]), finite.std(ddof=1) / np.sqrt(len(finite)), rtol=1e-12)
    # frames before the 5-frame network history are not predicted
    assert len(read_csv(a / "predictions.csv")) == 1 + 7 * 3 * (10 - 4)


def test_decode_and_sta_outputs(pipeline):
    _, (a, _) = pipeline
    summary = read_csv(a / "decode_summary.csv")
    assert summary[0] == ["model", "subset", "parameter", "rho"]
    assert [r[2] for r in summary[1:]] == ["H11", "H12", "H13", "H21", "H22", "H23", "H31", "H32"]
    assert summary[1][0] == "hocnn"
    sta = read_csv(a / "sta_summary.csv")
    assert [r[-1] for r in sta[1:]] == ["ok", "ok"]
    temporal = read_csv(a / "sta_sta00_temporal.csv")
    assert len(temporal) == 1 + 40


def test_manifests_and_config_echo(pipeline):
    cfg, (a, _) = pipeline
    for command in PIPELINE:
        manifest = json.loads((a / f"manifest_{command}.json").read_text())
        assert manifest["command"] == command
        assert manifest["config"]["seed"] == 3
        assert "version" in manifest
    simulate = json.loads((a / "manifest_simulate.json").read_text())
    assert simulate["inputs"]["stimulus.hocv"] == json.loads((a / "manifest_generate.json").read_text())["outputs"]["stimulus.hocv"]
    assert cfgmod.load_config(a / "config.toml") == cfgmod.load_config(cfg)


def deterministic_files(out):
    return sorted(p.name for p in out.iterdir() if p.suffix in (".csv", ".hocv", ".horx", ".hock", ".hsta", ".pgm", ".json"))


def test_repeated_runs_are_byte_identical(pipeline):
    _, (a, b) = pipeline
    names = deterministic_files(a)
    assert names == deterministic_files(b)
    for name in names:
        if name == "train_log.csv":
            # wall-clock seconds are the only nondeterministic column
            strip = lambda p: [r[:4] for r in read_csv(p)]
            assert strip(a / name) == strip(b / name)
        elif name == "manifest_train.json":
            continue  # digests the train log
        else:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_two_seeds_give_distinct_logs(pipeline, tmp_path):
    cfg, (a, _) = pipeline
    out = tmp_path / "s"
    for command in ("generate", "simulate", "train"):
        assert run(cfg, out, command, seed=4) == 0
    first = [r[:3] for r in read_csv(a / "train_log.csv")]
    second = [r[:3] for r in read_csv(out / "train_log.csv")]
    assert first[0] == second[0] and first != second


def test_fraction_flag(pipeline, tmp_path, capsys):
    cfg, (a, _) = pipeline
    assert run(cfg, a, "--force", "train", "--fraction", "1.0") == 2
    assert "fraction" in capsys.readouterr().err
    out = tmp_path / "f"
    for command in ("generate", "simulate"):
        assert run(cfg, out, command) == 0
    assert run(cfg, out, "train", "--fraction", "0.5", "--model", "baseline") == 0
    assert load_checkpoint(out / "model.hock").layers[0].kind == "conv3d"


def test_zero_spike_sta_row_and_run_continues(tmp_path):
    cfg = write_config(tmp_path, TINY + "gain = 0.0\noffset = -40.0\n")
    out = tmp_path / "z"
    assert run(cfg, out, "sta") == 0
    rows = read_csv(out / "sta_summary.csv")
    assert len(rows) == 3
    assert all(r[-1].startswith("error") and r[1] == "0" for r in rows[1:])
    assert not (out / "sta.hsta").exists()

