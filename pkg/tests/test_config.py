from pathlib import Path

import pytest

from pfrp.config import (
    DATASET_PRESETS,
    EncoderConfig,
    PfrpConfig,
    RunConfig,
    SplitSpec,
    load_run_config,
)
from pfrp.errors import ConfigError


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv("PFRP_SEED", raising=False)


class TestDefaults:
    def test_run_config(self):
        config = RunConfig()
        assert config.lookback == 96 and config.horizons == [96]
        assert config.encoder.tau == 0.05 and config.encoder.batch_size == 256
        assert config.encoder.overlap_threshold == 48
        assert config.bank.horizon == 720
        assert config.pfrp.lr == 1e-4

    def test_lookback_and_seed_propagate(self):
        config = RunConfig(lookback=48, seed=7, horizons=[24])
        assert config.encoder.lookback == 48
        assert config.encoder.seed == config.bank.seed == config.pfrp.seed == 7

    def test_explicit_stage_seed_wins(self):
        config = RunConfig(seed=7, bank={"seed": 3})
        assert config.bank.seed == 3 and config.encoder.seed == 7

    def test_for_horizon(self):
        config = RunConfig(horizons=[96, 192])
        assert config.for_horizon(192).pfrp.horizon == 192
        assert config.pfrp.horizon == 96


class TestValidation:
    def test_split_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SplitSpec(train_ratio=0.7, val_ratio=0.2, test_ratio=0.2)

    def test_overlap_threshold_within_lookback(self):
        with pytest.raises(ValueError):
            EncoderConfig(lookback=24, overlap_threshold=48)

    def test_even_kernel(self):
        with pytest.raises(ValueError):
            PfrpConfig(kernel_size=24)

    def test_horizon_beyond_bank(self):
        with pytest.raises(ValueError):
            RunConfig(horizons=[96], bank={"horizon": 48})

    def test_top_k_beyond_bank(self):
        with pytest.raises(ValueError):
            RunConfig(bank={"size": 5}, pfrp={"top_k": 10})

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"dataset.preset": "sunspots"})


class TestLoading:
    def test_toml_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('lookback = 48\nhorizons = [24, 48]\n\n[pfrp]\ntop_k = 4\nretrieval = "dtw"\n',
                        encoding="utf-8")
        config = load_run_config(path)
        assert config.lookback == 48 and config.horizons == [24, 48]
        assert config.pfrp.top_k == 4 and config.pfrp.retrieval == "dtw"

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[pfrp]\ntop_k = 4\n", encoding="utf-8")
        config = load_run_config(path, {"pfrp.top_k": 8, "bank.size": None, "output_dir": "out"})
        assert config.pfrp.top_k == 8
        assert config.bank.size == 1000
        assert config.output_dir == Path("out")

    def test_seed_environment_variable(self, monkeypatch):
        monkeypatch.setenv("PFRP_SEED", "42")
        config = load_run_config(overrides={"seed": 1})
        assert config.seed == 42 and config.pfrp.seed == 42

    def test_bad_seed_environment_variable(self, monkeypatch):
        monkeypatch.setenv("PFRP_SEED", "forty-two")
        with pytest.raises(ConfigError):
            load_run_config()

    def test_preset_fills_unset_values(self):
        config = load_run_config(overrides={"dataset.preset": "ETTh1", "bank.size": 500})
        preset = DATASET_PRESETS["etth1"]
        assert config.dataset.preset == "etth1"
        assert config.split.train_ratio == preset["split"][0]
        assert config.bank.size == 500
        assert config.pfrp.top_k == preset["top_k"]
        assert config.periodicity.lags == [24, 168]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.toml")

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("lookback = \n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_invalid_value(self):
        with pytest.raises(ConfigError) as info:
            load_run_config(overrides={"pfrp.lr": -1.0})
        assert info.value.exit_code == 2
