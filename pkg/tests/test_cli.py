import json
import shutil

import numpy as np
import pandas as pd
import pytest

from pfrp.cli import main
from pfrp.forecaster import load_checkpoint
from pfrp.pipeline import EvalReport
from pfrp.series import load_csv
from pfrp.utils import parse_vector

CONFIG = """
lookback = 24
horizons = [12]
seed = 0

[dataset]
name = "motifs"

[bank]
size = 20
horizon = 24
max_iter = 20

[encoder]
feature_dim = 8
hidden_dims = [16]
batch_size = 64
epochs = 1
overlap_threshold = 12

[pfrp]
top_k = 5
confidence_hidden = [8]
output_hidden = [8]
fusion_hidden = [4]
batch_size = 64
epochs = 2
lr = 0.001
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "motifs.csv"
    assert main(["generate", str(data), "--kind", "motifs", "--length", "1200", "--seed", "0"]) == 0
    config = root / "run.toml"
    config.write_text(CONFIG, encoding="utf-8")
    return root, data, config


def _run(command, out, workspace, *extra):
    _, data, config = workspace
    return main([command, "--config", str(config), "--data", str(data), "--output-dir", str(out), *extra])


def _full_run(out, workspace, *extra):
    for command in ("train-encoder", "build-bank", "train", "eval"):
        assert _run(command, out, workspace, *extra) == 0, command
    return EvalReport.model_validate_json((out / "eval_report.json").read_text(encoding="utf-8"))


def _stage_one_copy(source, target):
    target.mkdir()
    shutil.copy(source / "encoder.json", target / "encoder.json")
    shutil.copy(source / "bank.gmb", target / "bank.gmb")
    return target


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace[0] / "run"
    report = _full_run(out, workspace)
    return out, report


class TestGenerate:
    def test_written_series_loads(self, workspace):
        _, data, _ = workspace
        ts = load_csv(data)
        assert len(ts) == 1200
        assert np.all(np.isfinite(ts.values))


class TestPipeline:
    def test_artifacts(self, trained):
        out, report = trained
        assert len(pd.read_csv(out / "encoder_loss.csv")) == 2
        assert (out / "bank.gmb").exists()
        assert (out / "pfrp_h12" / "manifest.json").exists()
        assert (out / "weights_h12.csv").exists()
        assert [r.horizon for r in report.results] == [12]
        result = report.results[0]
        assert result.windows == 205
        assert np.isfinite(result.pfrp_mse) and np.isfinite(result.baseline_mse)
        assert 0.0 <= result.mean_w1 <= 1.0

    def test_predictions_csv(self, trained):
        out, _ = trained
        frame = pd.read_csv(out / "predictions_h12.csv")
        assert len(frame) == 205
        row = frame.iloc[0]
        y1, y2, y, w1 = parse_vector(row["y1"]), parse_vector(row["y2"]), parse_vector(row["y"]), row["w1"]
        assert y.size == 12
        np.testing.assert_allclose(y, w1 * y1 + (1.0 - w1) * y2, atol=1e-9)

    def test_reproducible(self, trained, workspace):
        _, first = trained
        second = _full_run(workspace[0] / "again", workspace)
        assert second.metrics() == first.metrics()

    def test_predict(self, trained, workspace):
        out, _ = trained
        assert _run("predict", out, workspace) == 0
        frame = pd.read_csv(out / "forecast_h12.csv")
        assert len(frame) == 12
        assert frame["step"].tolist() == list(range(1200, 1212))

    def test_plot(self, trained, workspace):
        out, _ = trained
        assert _run("plot", out, workspace, "--plot-indices", "0", "3") == 0
        for name in ("forecast_h12_w0.svg", "forecast_h12_w3.svg", "encoder_loss.svg", "weights_h12.svg"):
            assert (out / "plots" / name).read_text(encoding="utf-8").lstrip().startswith("<")
        assert _run("plot", out, workspace, "--plot-indices", "5000") == 3

    def test_bank_larger_than_training_set(self, trained, workspace):
        out, _ = trained
        before = (out / "bank.gmb").read_bytes()
        assert _run("build-bank", out, workspace, "--bank-size", "5000") == 2
        assert (out / "bank.gmb").read_bytes() == before

    def test_without_local_model(self, trained, workspace):
        out = _stage_one_copy(trained[0], workspace[0] / "no_local")
        assert _run("train", out, workspace, "--no-local-model") == 0
        assert _run("eval", out, workspace, "--no-local-model") == 0
        frame = pd.read_csv(out / "predictions_h12.csv")
        assert (frame["w1"] == 1.0).all()
        for _, row in frame.head(20).iterrows():
            np.testing.assert_array_equal(parse_vector(row["y"]), parse_vector(row["y1"]))

    def test_resume_continues_training(self, trained, workspace):
        out = _stage_one_copy(trained[0], workspace[0] / "resume")
        assert _run("train", out, workspace, "--epochs", "1") == 0
        first = load_checkpoint(out / "pfrp_h12").state
        assert _run("train", out, workspace, "--epochs", "1", "--resume") == 0
        second = load_checkpoint(out / "pfrp_h12").state
        assert first.step > 0
        assert second.step == 2 * first.step
        assert second.epochs_done == 2

    def test_sweep(self, trained, workspace):
        out = _stage_one_copy(trained[0], workspace[0] / "sweep")
        assert _run("sweep", out, workspace, "--bank-sizes", "10", "20", "--top-ks", "3", "15") == 0
        frame = pd.read_csv(out / "sweep_h12.csv")
        assert list(zip(frame["bank_size"], frame["top_k"])) == [(10, 3), (20, 3), (20, 15)]


class TestErrors:
    def test_missing_dataset(self, tmp_path):
        assert main(["train-encoder", "--data", str(tmp_path / "absent.csv"), "--output-dir", str(tmp_path)]) == 2

    def test_no_dataset(self, tmp_path):
        assert main(["train-encoder", "--output-dir", str(tmp_path)]) == 2

    def test_invalid_config_value(self, workspace, tmp_path):
        assert _run("train-encoder", tmp_path, workspace, "--top-k", "50") == 2

    def test_unparseable_data(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("value\n1.0\n2.0\nabc\n", encoding="utf-8")
        assert main(["periodicity", str(bad)]) == 3

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert _run("eval", tmp_path, workspace) == 3


class TestPeriodicity:
    def test_prints_components(self, workspace, capsys):
        _, data, _ = workspace
        assert main(["periodicity", str(data), "--lags", "24", "168"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert set(payload["acf"]) == {"24", "168"}
        assert 0.0 <= payload["score"] <= 1.0
