import argparse
import json

import numpy as np
import pytest

from timexer.checkpoint import load_checkpoint, read_arrays
from timexer.cli import build_parser, dispatch, last_window_forecast, resolve_config
from timexer.data import DataManifest, PreparedData
from timexer.errors import ConfigError
from timexer.records import read_records

FAST = ["--model-dim", "8", "--heads", "2", "--ffn-dim", "16", "--lookback", "24", "--patch", "8",
        "--horizon", "6", "--max-epochs", "2", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert dispatch(["synth-data", "--T", "800", "--C", "2", "--lag", "3", "--seed", "7", "--out", str(root)]) == 0
    return root / "manifest.txt"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert dispatch(["train", "--data", str(dataset), "--out", str(out), *FAST]) == 0
    return out


class TestParsing:
    def test_missing_data_is_usage_error(self, capsys):
        assert dispatch(["train", "--out", "x"]) == 2
        assert "usage:" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert dispatch(["fly"]) == 2

    def test_unknown_flag(self, dataset):
        assert dispatch(["train", "--data", str(dataset), "--out", "x", "--wings", "2"]) == 2

    def test_flags_mirror_config_fields(self):
        args = build_parser().parse_args(["train", "--data", "d", "--out", "o", "--model-dim", "64",
                                          "--exo-lookback", "192", "--use-ffn", "false"])
        c = resolve_config(args, environ={})
        assert (c.model_dim, c.exo_lookback, c.use_ffn) == (64, 192, False)

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("seed=1\nheads=4\nhorizon=12\nlr=0.01\n")
        manifest = DataManifest("x.csv", "y", lookback=48, horizon=6)
        args = argparse.Namespace(config=str(cfg), seed="3", heads=None, horizon=None, lr=None)
        c = resolve_config(args, manifest, environ={"TXER_SEED": "2", "TXER_LR": "0.5"})
        assert (c.seed, c.heads, c.horizon, c.lookback, c.lr) == (3, 4, 12, 48, 0.5)

    def test_bad_environment_value(self):
        with pytest.raises(ConfigError):
            resolve_config(argparse.Namespace(), environ={"TXER_HEADS": "many"})


class TestCommands:
    def test_train_outputs(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"run_manifest.txt", "train_log.jsonl", "timing.jsonl", "checkpoint.txer", "metrics.jsonl"} <= names
        log = read_records(trained / "train_log.jsonl")
        assert log[-1]["summary"] and "seconds" not in log[0]
        assert "seconds" in read_records(trained / "timing.jsonl")[0]
        scales = {(r["split"], r["scale"]) for r in read_records(trained / "metrics.jsonl")}
        assert ("test", "normalized") in scales and ("test", "original") in scales

    def test_rerun_from_manifest_is_identical(self, dataset, trained, tmp_path):
        again = tmp_path / "again"
        assert dispatch(["train", "--data", str(dataset), "--out", str(again),
                         "--config", str(trained / "run_manifest.txt")]) == 0
        for name in ("train_log.jsonl", "checkpoint.txer", "metrics.jsonl"):
            assert (again / name).read_bytes() == (trained / name).read_bytes()

    def test_forecast_matches_in_process(self, dataset, trained, tmp_path):
        assert dispatch(["forecast", "--data", str(dataset), "--checkpoint", str(trained / "checkpoint.txer"),
                         "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "forecast.csv").read_text().splitlines()
        values = np.array([float(line.split(",")[1]) for line in lines[1:]])
        params, config = load_checkpoint(trained / "checkpoint.txer")
        expected = last_window_forecast(PreparedData.from_manifest(dataset), params, config)
        assert values.tobytes() == expected.tobytes()

    def test_evaluate_matches_train_metrics(self, dataset, trained, tmp_path):
        assert dispatch(["evaluate", "--data", str(dataset), "--checkpoint", str(trained / "checkpoint.txer"),
                         "--out", str(tmp_path), "--denormalize"]) == 0
        row = read_records(tmp_path / "metrics.jsonl")[0]
        train_rows = read_records(trained / "metrics.jsonl")
        assert row in [{k: v for k, v in r.items()} for r in train_rows]

    def test_cka_and_attention(self, dataset, trained, tmp_path):
        ck = str(trained / "checkpoint.txer")
        assert dispatch(["cka", "--data", str(dataset), "--checkpoint", ck, "--out", str(tmp_path),
                         "--samples", "32"]) == 0
        rows = (tmp_path / "cka.csv").read_text().splitlines()
        assert rows[0] == "layer,embedding,block_1"
        assert dispatch(["attn-map", "--data", str(dataset), "--checkpoint", ck, "--out", str(tmp_path)]) == 0
        arrays, header = read_arrays(tmp_path / "attention.txer")
        assert header["names"] == "exo_1,exo_2"
        assert arrays["cross"].shape == (1, 2)
        summary = read_records(tmp_path / "attention.jsonl")[0]
        assert summary["argmax"] in ("exo_1", "exo_2")

    @pytest.mark.parametrize("command, extra, record", [
        ("ablate", ["--variants", "ours_TV_V,wo_T"], "ablation.jsonl"),
        ("mask-sweep", ["--ratios", "0,0.99"], "mask_sweep.jsonl"),
        ("lookback-sweep", ["--exo-lengths", "24,48"], "lookback_sweep.jsonl"),
        ("patch-sweep", ["--patch-lengths", "6,8"], "patch_sweep.jsonl"),
        ("multivariate", [], "metrics.jsonl"),
    ])
    def test_sweeps_are_reproducible(self, dataset, tmp_path, command, extra, record):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert dispatch([command, "--data", str(dataset), "--out", str(out), *FAST, *extra]) == 0
            outs.append((out / record).read_bytes())
        assert outs[0] == outs[1]
        assert all(json.loads(line) for line in outs[0].decode().splitlines())

    def test_config_error_exit_code(self, dataset, tmp_path, capsys):
        code = dispatch(["train", "--data", str(dataset), "--out", str(tmp_path), "--patch", "500"])
        err = capsys.readouterr().err.strip()
        assert code == 1
        assert err.startswith("error: ConfigError:") and "\n" not in err

    def test_data_error_exit_code(self, tmp_path, capsys):
        assert dispatch(["train", "--data", str(tmp_path / "none.txt"), "--out", str(tmp_path)]) == 1
        assert capsys.readouterr().err.startswith("error: DataError:")
