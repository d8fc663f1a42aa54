import json
import re

import numpy as np
import pytest

from conftest import TINY_MODEL
from earlycrop.cli import RunConfig, load_run_config, main
from earlycrop.dataio import Dataset, DateAxis, TimeSeriesSample, save_dataset
from earlycrop.errors import ConfigError
from earlycrop.model import ModelConfig, init_model, save_params
from earlycrop.train import TrainConfig, train

SMALL = {"synth": {"n_samples": 120, "n_classes": 3, "n_blocks": 10, "T": 20, "B": 5},
         "model": {"d_model": 16, "n_heads": 2, "encoder_dims": [12, 16], "decoder_dims": [16]},
         "train": {"epochs": 2}, "experiments": {"trials": 2, "max_samples": 8},
         "seed": 7}

OUTPUTS = ("data.csv", "train.csv", "test.csv", "config.json", "model.json", "history.csv",
           "metrics_test.csv", "relevance_t.csv", "relevance_bt.csv", "profile.csv",
           "timeframes.csv", "prune_curves.csv", "prune_auc.csv", "earliness.csv",
           "figures/class_relevance.svg", "figures/parcel_relevance.svg",
           "figures/prune_curves.svg", "figures/earliness.svg")


def _config(tmp_path, **changes):
    doc = json.loads(json.dumps(SMALL))
    for k, v in changes.items():
        doc.setdefault(k, {}).update(v)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "run"
    assert main(["pipeline", "--config", str(_config(tmp)), "--out", str(out), "--quiet"]) == 0
    return out


def test_pipeline_emits_every_artifact(run_dir):
    for name in OUTPUTS:
        assert (run_dir / name).is_file(), name
    for name in OUTPUTS:
        if name.endswith(".svg"):
            assert (run_dir / name).read_text().startswith("<svg")


def test_commands_print_one_summary_line(run_dir, capsys):
    for cmd in (["eval"], ["timeframe", "--n", "3,5,10"], ["report"]):
        assert main(cmd + ["--out", str(run_dir), "--quiet"]) == 0
        out = capsys.readouterr().out
        assert out.count("\n") == 1 and out.startswith(cmd[0])


def test_timeframe_prints_nested_windows(run_dir, capsys):
    assert main(["timeframe", "--out", str(run_dir), "--n", "3,5,10", "--quiet"]) == 0
    line = capsys.readouterr().out
    spans = re.findall(r"dt_(\d+) (\S+)\.\.(\S+?)[;\n]", line)
    assert [n for n, _, _ in spans] == ["3", "5", "10"]
    for (_, s1, e1), (_, s2, e2) in zip(spans, spans[1:]):
        assert s2 <= s1 and e1 <= e2


def test_commands_are_idempotent(run_dir):
    before = {n: (run_dir / n).read_bytes() for n in ("model.json", "profile.csv",
                                                     "prune_curves.csv", "timeframes.csv")}
    for cmd in ("train", "explain", "timeframe", "prune-exp"):
        assert main([cmd, "--config", str(run_dir / "config.json"), "--out", str(run_dir),
                     "--quiet"]) == 0
    for n, data in before.items():
        assert (run_dir / n).read_bytes() == data, n


def test_eval_on_memorised_data(tmp_path, capsys):
    rng = np.random.default_rng(0)
    axis = DateAxis.regular(2019, 6)
    samples = [TimeSeriesSample(f"p{i}", i % 2, np.abs(rng.normal(0.2 + (i % 2), 0.05, (3, 6))),
                                i % 4, np.ones(6, bool), axis) for i in range(40)]
    ds = Dataset(samples, axis, ("a", "b"), ("B0", "B1", "B2"))
    params, _ = train(init_model(ModelConfig(B=3, C=2, **TINY_MODEL), 0), ds,
                      TrainConfig(epochs=30, batch_size=8, learning_rate=1e-2,
                                  validation_fraction=0.0))
    save_dataset(ds, tmp_path / "mem.csv")
    save_params(params, tmp_path / "m.json")
    assert main(["eval", "--data", str(tmp_path / "mem.csv"), "--model", str(tmp_path / "m.json"),
                 "--out", str(tmp_path), "--quiet"]) == 0
    assert "overall accuracy 1.0000" in capsys.readouterr().out
    assert (tmp_path / "metrics_mem.csv").read_text().splitlines()[-1] == "overall,1,1,40"


class TestExitCodes:
    def test_usage_errors(self, tmp_path, capsys):
        assert main(["bogus"]) == 1
        assert main(["eval", "--frobnicate"]) == 1
        assert main(["eval", "--seed", "-1"]) == 1
        assert main(["eval", "--seed", str(2 ** 64)]) == 1
        capsys.readouterr()

    def test_missing_files(self, tmp_path, capsys):
        assert main(["eval", "--out", str(tmp_path), "--quiet"]) == 1
        assert "error" in capsys.readouterr().err
        assert main(["report", "--out", str(tmp_path / "nowhere"), "--quiet"]) == 1
        assert main(["eval", "--config", str(tmp_path / "none.json"), "--quiet"]) == 1

    def test_report_needs_relevance(self, run_dir, tmp_path):
        (tmp_path / "train.csv").write_bytes((run_dir / "train.csv").read_bytes())
        assert main(["report", "--out", str(tmp_path), "--quiet"]) == 1

    def test_invalid_inputs(self, run_dir, tmp_path):
        assert main(["timeframe", "--out", str(run_dir), "--n", "3,x", "--quiet"]) == 1
        assert main(["timeframe", "--out", str(run_dir), "--n", "99", "--quiet"]) == 1
        assert main(["prune-exp", "--out", str(run_dir), "--trials", "0", "--quiet"]) == 1
        (tmp_path / "bad.json").write_text('{"synth": {"n_classes": 1}}')
        assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out",
                     str(tmp_path), "--quiet"]) == 1
        (tmp_path / "bad.json").write_text("{oops")
        assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--quiet"]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_a_runtime_failure(self, run_dir, tmp_path, capsys):
        cfg = _config(tmp_path, train={"learning_rate": 1e300, "epochs": 2})
        for name in ("train.csv", "test.csv"):
            (tmp_path / name).write_bytes((run_dir / name).read_bytes())
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 2
        assert "failed" in capsys.readouterr().err


class TestRunConfig:
    def test_seed_rules(self):
        cfg = RunConfig.from_dict({"seed": 5, "train": {"seed": 9}})
        assert (cfg.seed, cfg.synth.seed, cfg.train.seed) == (5, 5, 9)
        cfg = RunConfig.from_dict({"seed": 5, "train": {"seed": 9}}, seed=11)
        assert (cfg.seed, cfg.synth.seed, cfg.train.seed) == (11, 11, 11)

    def test_round_trip(self, tmp_path):
        cfg = RunConfig.from_dict(SMALL)
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        back = load_run_config(tmp_path / "c.json", out_dir=tmp_path / "x")
        assert back.to_dict() == {**cfg.to_dict(), "out_dir": str(tmp_path / "x")}
        assert back.model.encoder_dims == (12, 16)

    @pytest.mark.parametrize("doc", [{"extra": 1}, {"train": {"epochz": 3}}, {"seed": -2},
                                     {"timeframe": {"n_list": []}}, {"lrp": {"epsilon": -1}},
                                     {"experiments": {"trials": 0}}, [1, 2]])
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(doc)
