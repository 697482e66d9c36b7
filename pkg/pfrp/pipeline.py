"""
Pipeline stages behind the CLI subcommands.

Each stage reads its inputs from the run's output directory, writes its
artifacts atomically back into it and returns the in-memory result.
Artifacts of one run:

    encoder.json, encoder_loss.csv        stage 1a
    bank.gmb                              stage 1b
    pfrp_h{H}/manifest.json + models      stage 2, one per horizon
    eval_report.json, eval_report.csv     evaluation
    predictions_h{H}.csv, weights_h{H}.*  per-horizon evaluation outputs
    plots/                                SVG charts
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel

from pfrp.analysis import periodicity_components, weight_report
from pfrp.chart_styles import create_forecast_chart, create_line_chart, loss_frame, write_svg
from pfrp.config import DATASET_PRESETS, RunConfig
from pfrp.data_generator import generate_series, write_series_csv
from pfrp.errors import ConfigError, DataError
from pfrp.forecaster import (
    init_components,
    load_checkpoint,
    load_pretrained_local,
    predict_batch,
    predictions_to_frame,
    save_checkpoint,
    train_local,
    train_pfrp,
)
from pfrp.gmb import build_bank, load_bank, save_bank
from pfrp.localmodels import build_local_predictor
from pfrp.nn import load_model, save_model
from pfrp.pcl import train_encoder
from pfrp.series import load_csv, mae, mse, prepare_series, stack_windows
from pfrp.utils import atomic_write_csv, atomic_write_text, ensure_dir, improvement_pct, make_rng, parse_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def encoder(self):
        return self.root / "encoder.json"

    @property
    def encoder_loss(self):
        return self.root / "encoder_loss.csv"

    @property
    def bank(self):
        return self.root / "bank.gmb"

    @property
    def plots(self):
        return self.root / "plots"

    @property
    def report_json(self):
        return self.root / "eval_report.json"

    @property
    def report_csv(self):
        return self.root / "eval_report.csv"

    def checkpoint(self, horizon):
        return self.root / f"pfrp_h{horizon}"

    def train_loss(self, horizon):
        return self.root / f"pfrp_h{horizon}" / "train_loss.csv"

    def predictions(self, horizon):
        return self.root / f"predictions_h{horizon}.csv"

    def weights_csv(self, horizon):
        return self.root / f"weights_h{horizon}.csv"

    def weights_svg(self, horizon):
        return self.plots / f"weights_h{horizon}.svg"

    def forecast_csv(self, horizon):
        return self.root / f"forecast_h{horizon}.csv"


def run_paths(config: RunConfig):
    return RunPaths(Path(config.output_dir))


class HorizonResult(BaseModel):
    horizon: int
    windows: int
    baseline_mse: float
    baseline_mae: float
    pfrp_mse: float
    pfrp_mae: float
    mse_improvement_pct: float
    mae_improvement_pct: float
    baseline_runtime_s: float
    pfrp_runtime_s: float
    baseline_params: int
    pfrp_params: int
    mean_w1: float


class EvalReport(BaseModel):
    dataset: str
    results: List[HorizonResult]
    avg_baseline_mse: float
    avg_baseline_mae: float
    avg_pfrp_mse: float
    avg_pfrp_mae: float
    avg_mse_improvement_pct: float
    avg_mae_improvement_pct: float

    model_config = {
        "json_schema_extra": {
            "example": {"dataset": "traffic", "avg_baseline_mse": 0.2404, "avg_pfrp_mse": 0.1919}
        }
    }

    def metrics(self):
        """Numeric content without timings, for reproducibility comparisons"""
        timing = {"baseline_runtime_s", "pfrp_runtime_s"}
        return self.model_dump(exclude={"results": {"__all__": timing}})

    def to_frame(self):
        return pd.DataFrame([r.model_dump() for r in self.results])


def summarize(dataset, results):
    """Average per-horizon metrics; improvements computed on the averages"""
    if not results:
        raise DataError("no horizon was evaluated")
    avg = {name: float(np.mean([getattr(r, name) for r in results]))
           for name in ("baseline_mse", "baseline_mae", "pfrp_mse", "pfrp_mae")}
    return EvalReport(
        dataset=dataset,
        results=results,
        avg_baseline_mse=avg["baseline_mse"],
        avg_baseline_mae=avg["baseline_mae"],
        avg_pfrp_mse=avg["pfrp_mse"],
        avg_pfrp_mae=avg["pfrp_mae"],
        avg_mse_improvement_pct=improvement_pct(avg["baseline_mse"], avg["pfrp_mse"]),
        avg_mae_improvement_pct=improvement_pct(avg["baseline_mae"], avg["pfrp_mae"]),
    )


def load_dataset(config: RunConfig):
    path = config.dataset.path
    if path is None:
        raise ConfigError("no dataset path given (use --data or [dataset].path)")
    if not Path(path).exists():
        raise ConfigError(f"dataset file not found: {path}")
    freq = DATASET_PRESETS[config.dataset.preset]["freq"] if config.dataset.preset else None
    return load_csv(path, column=config.dataset.column, name=config.dataset.name, freq_label=freq)


def _prepared(config, horizon, ts=None):
    ts = ts if ts is not None else load_dataset(config)
    return prepare_series(ts, config.split, config.lookback, horizon)


def _bank_samples(config, ts=None):
    ts = ts if ts is not None else load_dataset(config)
    # Only train is windowed with the bank horizon
    prepared = prepare_series(ts, config.split, config.lookback, min(config.horizons),
                              train_horizon=config.bank.horizon)
    return prepared.windows("train", config.lookback, config.bank.horizon)


def run_train_encoder(config: RunConfig, progress=False):
    """Stage 1a: train the encoder on training windows carrying the bank horizon"""
    paths = run_paths(config)
    samples = _bank_samples(config)
    logger.info("Training encoder on %d windows (L=%d, H=%d)", len(samples), config.lookback, config.bank.horizon)
    result = train_encoder(samples, config.encoder, progress=progress)
    save_model(paths.encoder, result.model, kind="encoder")
    atomic_write_csv(paths.encoder_loss, loss_frame(result.loss_curve))
    return result


def run_build_bank(config: RunConfig, encoder=None, bank_size=None, save=True):
    """Stage 1b: cluster encoded training windows into the memory bank"""
    paths = run_paths(config)
    encoder = encoder or load_model(paths.encoder, expected_kind="encoder")
    samples = _bank_samples(config)
    K = bank_size or config.bank.size
    if K > len(samples):
        raise ConfigError(f"bank size K={K} exceeds the {len(samples)} training windows")
    bank = build_bank(
        encoder, samples, K, config.bank.horizon, seed=config.bank.seed, dataset_name=config.dataset.name,
        store_raw_x=config.bank.store_raw_x or config.pfrp.retrieval != "feature",
        max_iter=config.bank.max_iter, n_init=config.bank.restarts,
    )
    if save:
        save_bank(bank, paths.bank)
        logger.info("Saved bank with K=%d entries to %s", bank.size, paths.bank)
    return bank


def _train_baseline(cfg, lookback, train, val, progress):
    if cfg.pretrained_local is not None:
        return load_pretrained_local(cfg.pretrained_local, lookback, cfg.horizon)
    baseline = build_local_predictor(cfg.local_kind, lookback, cfg.horizon, make_rng(cfg.seed + 1), cfg.kernel_size)
    train_local(train, baseline, cfg, val, progress=progress)
    return baseline


def run_train(config: RunConfig, horizon=None, resume=False, progress=False, encoder=None, bank=None, save=True):
    """Stage 2: train gates, fusion and local model for one serving horizon"""
    paths = run_paths(config)
    horizon = horizon or config.horizons[0]
    cfg = config.for_horizon(horizon).pfrp
    prepared = _prepared(config, horizon)
    train = prepared.windows("train", config.lookback, horizon)
    val = prepared.windows("val", config.lookback, horizon)

    if resume:
        loaded = load_checkpoint(paths.checkpoint(horizon))
        components, state, baseline = loaded.components, loaded.state, loaded.baseline
        logger.info("Resuming horizon %d from step %d", horizon, state.step if state else 0)
    else:
        encoder = encoder or load_model(paths.encoder, expected_kind="encoder")
        bank = bank or load_bank(paths.bank)
        local = None
        if cfg.pretrained_local is not None:
            local = load_pretrained_local(cfg.pretrained_local, config.lookback, horizon)
        components = init_components(encoder, bank, cfg, local)
        state, baseline = None, None
    if baseline is None:
        baseline = _train_baseline(cfg, config.lookback, train, val, progress)

    result = train_pfrp(train, components, cfg, val, state=state, progress=progress)
    if save:
        save_checkpoint(paths.checkpoint(horizon), components, cfg, paths.encoder, paths.bank,
                        state=result.state, baseline=baseline)
        frame = pd.DataFrame({"epoch": np.arange(1, len(result.loss_curve) + 1), "train_loss": result.loss_curve})
        if result.val_curve:
            frame["val_loss"] = result.val_curve
        atomic_write_csv(paths.train_loss(horizon), frame)
    return components, baseline, result


def _plot_window(paths, horizon, index, x, y_true, y1, y2, y):
    path = paths.plots / f"forecast_h{horizon}_w{index}.svg"
    write_svg(create_forecast_chart(y_true, y1, y2, y, lookback=x,
                                    title=f"Test window {index}, horizon {horizon}"), path)
    return path


def evaluate_horizon(components, baseline, test_samples, horizon):
    """Metrics of PFRP and the local baseline on one set of windows"""
    if not test_samples:
        raise DataError(f"no test windows for horizon {horizon}")
    X, Y, _ = stack_windows(test_samples)
    t0 = time.perf_counter()
    base_pred = baseline.predict(X)
    t1 = time.perf_counter()
    records = predict_batch(components, X)
    t2 = time.perf_counter()
    pred = np.stack([r.y for r in records])
    result = HorizonResult(
        horizon=horizon,
        windows=len(test_samples),
        baseline_mse=mse(base_pred, Y),
        baseline_mae=mae(base_pred, Y),
        pfrp_mse=mse(pred, Y),
        pfrp_mae=mae(pred, Y),
        mse_improvement_pct=improvement_pct(mse(base_pred, Y), mse(pred, Y)),
        mae_improvement_pct=improvement_pct(mae(base_pred, Y), mae(pred, Y)),
        baseline_runtime_s=t1 - t0,
        pfrp_runtime_s=t2 - t1,
        baseline_params=baseline.parameter_count(),
        pfrp_params=components.parameter_count(),
        mean_w1=float(np.mean([r.fusion[0] for r in records])),
    )
    return result, records


def run_eval(config: RunConfig, horizons=None, plot_indices=None):
    """Evaluate every trained horizon on the test split and average the metrics"""
    paths = run_paths(config)
    horizons = horizons or config.horizons
    plot_indices = config.plot_indices if plot_indices is None else plot_indices
    ts = load_dataset(config)
    results = []
    for horizon in horizons:
        loaded = load_checkpoint(paths.checkpoint(horizon))
        if loaded.baseline is None:
            raise DataError(f"checkpoint for horizon {horizon} carries no baseline local model")
        test = _prepared(config, horizon, ts).windows("test", config.lookback, horizon)
        result, records = evaluate_horizon(loaded.components, loaded.baseline, test, horizon)
        results.append(result)
        logger.info("H=%d: baseline MSE %.6f, PFRP MSE %.6f (%.2f%%)", horizon, result.baseline_mse,
                    result.pfrp_mse, result.mse_improvement_pct)

        X, Y, starts = stack_windows(test)
        atomic_write_csv(paths.predictions(horizon), predictions_to_frame(records, Y, starts))
        weight_report(records, paths.weights_csv(horizon), paths.weights_svg(horizon))
        for index in plot_indices:
            if not 0 <= index < len(records):
                raise DataError(f"plot index {index} outside the {len(records)} test windows")
            r = records[index]
            _plot_window(paths, horizon, index, X[index], Y[index], r.y1, r.y2, r.y)

    report = summarize(config.dataset.name, results)
    atomic_write_text(paths.report_json, report.model_dump_json(indent=2))
    atomic_write_csv(paths.report_csv, report.to_frame())
    return report


def run_predict(config: RunConfig, horizon=None):
    """Forecast the H steps after the end of the series, in raw units"""
    paths = run_paths(config)
    horizon = horizon or config.horizons[0]
    loaded = load_checkpoint(paths.checkpoint(horizon))
    prepared = _prepared(config, horizon)
    x = prepared.standardized[-config.lookback:]
    record = predict_batch(loaded.components, x[None, :])[0]
    forecast = prepared.standardizer.invert(record.y)
    T = len(prepared.series)
    frame = pd.DataFrame({"step": np.arange(T, T + horizon), "forecast": forecast, "w1": record.fusion[0]})
    atomic_write_csv(paths.forecast_csv(horizon), frame)
    return forecast


def run_periodicity(config: RunConfig):
    return periodicity_components(load_dataset(config), config.periodicity)


def run_plot(config: RunConfig, horizon=None, indices=None):
    """Re-plot test windows from a saved predictions CSV"""
    paths = run_paths(config)
    horizon = horizon or config.horizons[0]
    csv = paths.predictions(horizon)
    if not csv.exists():
        raise DataError(f"no predictions for horizon {horizon}; run eval first ({csv})")
    frame = pd.read_csv(csv)
    indices = config.plot_indices if indices is None else indices
    written = []
    for index in indices:
        if not 0 <= index < len(frame):
            raise DataError(f"plot index {index} outside the {len(frame)} saved windows")
        row = frame.iloc[index]
        written.append(_plot_window(paths, horizon, index, None, parse_vector(row["y_true"]),
                                    parse_vector(row["y1"]), parse_vector(row["y2"]), parse_vector(row["y"])))
    if paths.encoder_loss.exists():
        losses = pd.read_csv(paths.encoder_loss)
        path = paths.plots / "encoder_loss.svg"
        write_svg(create_line_chart(losses, x="epoch", y="loss", title="Encoder training loss"), path)
        written.append(path)
    return written


def run_sweep(config: RunConfig, bank_sizes, top_ks, horizon=None, progress=False):
    """Test MSE for every (K, k) pair with k <= K; one CSV row per pair"""
    paths = run_paths(config)
    horizon = horizon or config.horizons[0]
    encoder = load_model(paths.encoder, expected_kind="encoder")
    test = _prepared(config, horizon).windows("test", config.lookback, horizon)
    rows = []
    baseline = None
    for K in bank_sizes:
        bank = run_build_bank(config, encoder=encoder, bank_size=K, save=False)
        for k in top_ks:
            if k > K:
                logger.info("Skipping k=%d > K=%d", k, K)
                continue
            run_cfg = config.model_copy(update={"pfrp": config.pfrp.model_copy(update={"top_k": k})})
            components, trained_baseline, _ = run_train(run_cfg, horizon, progress=progress, encoder=encoder,
                                                        bank=bank, save=False)
            baseline = baseline or trained_baseline
            result, _ = evaluate_horizon(components, baseline, test, horizon)
            rows.append({"bank_size": K, "top_k": k, "horizon": horizon, "pfrp_mse": result.pfrp_mse,
                         "pfrp_mae": result.pfrp_mae, "baseline_mse": result.baseline_mse,
                         "mse_improvement_pct": result.mse_improvement_pct})
            logger.info("Sweep K=%d k=%d: MSE %.6f", K, k, result.pfrp_mse)
    frame = pd.DataFrame(rows)
    atomic_write_csv(paths.root / f"sweep_h{horizon}.csv", frame)
    return frame


def run_all(config: RunConfig, progress=False):
    """train-encoder, build-bank, train every horizon, eval"""
    ensure_dir(config.output_dir)
    run_train_encoder(config, progress=progress)
    run_build_bank(config)
    for horizon in config.horizons:
        run_train(config, horizon, progress=progress)
    return run_eval(config)


def generate(kind, path, length=20000, seed=0):
    return write_series_csv(path, generate_series(kind, length=length, seed=seed))
