"""
Command-line entry point: pfrp <subcommand> [options]

Subcommands: train-encoder, build-bank, train, eval, predict, periodicity,
plot, generate, sweep. Exit codes: 0 success, 2 usage or configuration
error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import os
import sys

from pfrp import pipeline
from pfrp.config import load_run_config
from pfrp.data_generator import GENERATORS
from pfrp.errors import PfrpError
from pfrp.utils import ensure_dir

logger = logging.getLogger("pfrp")

# CLI destination -> dotted RunConfig key
OVERRIDES = {
    "data": "dataset.path",
    "column": "dataset.column",
    "preset": "dataset.preset",
    "name": "dataset.name",
    "output_dir": "output_dir",
    "seed": "seed",
    "lookback": "lookback",
    "horizons": "horizons",
    "bank_size": "bank.size",
    "bank_horizon": "bank.horizon",
    "store_raw_x": "bank.store_raw_x",
    "encoder_epochs": "encoder.epochs",
    "strategy": "encoder.strategy",
    "top_k": "pfrp.top_k",
    "epochs": "pfrp.epochs",
    "retrieval": "pfrp.retrieval",
    "local_model": "pfrp.local_kind",
    "no_confidence_gate": "pfrp.no_confidence_gate",
    "no_output_gate": "pfrp.no_output_gate",
    "no_local_model": "pfrp.no_local_model",
    "pretrained_local": "pfrp.pretrained_local",
    "plot_indices": "plot_indices",
}


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--data", help="CSV dataset path")
    common.add_argument("--column", help="column name or index (default: last numeric column)")
    common.add_argument("--preset", help="dataset preset (traffic, electricity, weather, etth1, ...)")
    common.add_argument("--name", help="dataset name recorded in artifacts")
    common.add_argument("--output-dir", help="directory for every artifact of the run")
    common.add_argument("--seed", type=int)
    common.add_argument("--lookback", type=int)
    common.add_argument("--horizon", dest="horizons", type=int, nargs="+", help="serving horizon(s)")
    common.add_argument("--bank-size", type=int, help="memory bank size K")
    common.add_argument("--bank-horizon", type=int, help="horizon stored in the bank (default 720)")
    common.add_argument("--store-raw-x", action="store_true", default=None,
                        help="keep raw lookbacks in the bank for window-based retrieval")
    common.add_argument("--encoder-epochs", type=int)
    common.add_argument("--strategy", choices=["pcl", "cl", "pl"], help="encoder training strategy")
    common.add_argument("--top-k", type=int)
    common.add_argument("--epochs", type=int, help="stage-2 epochs")
    common.add_argument("--retrieval", choices=["feature", "mse", "dtw", "pcc"])
    common.add_argument("--local-model", choices=["linear", "dlinear"])
    common.add_argument("--no-confidence-gate", action="store_true", default=None)
    common.add_argument("--no-output-gate", action="store_true", default=None)
    common.add_argument("--no-local-model", action="store_true", default=None)
    common.add_argument("--pretrained-local", help="frozen local model checkpoint (JSON)")
    common.add_argument("--plot-indices", type=int, nargs="+", help="test windows to plot")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--progress", action="store_true", help="show progress bars")
    return common


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="pfrp", description="Retrieval-augmented time series forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train-encoder", parents=[common], help="train the lookback encoder")
    sub.add_parser("build-bank", parents=[common], help="build the global memory bank")
    train = sub.add_parser("train", parents=[common], help="train stage-2 components per horizon")
    train.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    sub.add_parser("eval", parents=[common], help="evaluate on the test split")
    sub.add_parser("predict", parents=[common], help="forecast beyond the end of the series")
    periodicity = sub.add_parser("periodicity", parents=[common], help="periodicity score of a series")
    periodicity.add_argument("csv", nargs="?", help="CSV file (same as --data)")
    periodicity.add_argument("--lags", type=int, nargs="+")
    periodicity.add_argument("--bins", type=int)
    sub.add_parser("plot", parents=[common], help="plot saved test-window predictions")

    gen = sub.add_parser("generate", help="write a synthetic series to CSV")
    gen.add_argument("path", help="output CSV path")
    gen.add_argument("--kind", choices=sorted(GENERATORS), default="motifs")
    gen.add_argument("--length", type=int, default=20000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--log-level", default=None)

    sweep = sub.add_parser("sweep", parents=[common], help="test MSE over a grid of K and k")
    sweep.add_argument("--bank-sizes", type=int, nargs="+", required=True)
    sweep.add_argument("--top-ks", type=int, nargs="+", required=True)
    return parser


def configure_logging(level=None):
    level = (level or os.getenv("PFRP_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _load_config(args):
    overrides = {key: getattr(args, dest, None) for dest, key in OVERRIDES.items()}
    if getattr(args, "csv", None):
        overrides["dataset.path"] = args.csv
    if getattr(args, "lags", None):
        overrides["periodicity.lags"] = args.lags
    if getattr(args, "bins", None):
        overrides["periodicity.bins"] = args.bins
    return load_run_config(args.config, overrides)


def _print_report(report):
    print(report.to_frame()[["horizon", "baseline_mse", "pfrp_mse", "mse_improvement_pct",
                             "baseline_mae", "pfrp_mae", "mae_improvement_pct"]].to_string(index=False))
    print(f"average MSE {report.avg_baseline_mse:.6f} -> {report.avg_pfrp_mse:.6f} "
          f"({report.avg_mse_improvement_pct:.2f}%), MAE {report.avg_baseline_mae:.6f} -> "
          f"{report.avg_pfrp_mae:.6f} ({report.avg_mae_improvement_pct:.2f}%)")


def run(args):
    if args.command == "generate":
        path = pipeline.generate(args.kind, args.path, length=args.length, seed=args.seed)
        print(f"wrote {args.length} values to {path}")
        return 0

    config = _load_config(args)
    if args.command != "periodicity":
        ensure_dir(config.output_dir)

    if args.command == "train-encoder":
        result = pipeline.run_train_encoder(config, progress=args.progress)
        print(f"encoder loss {result.loss_curve[0]:.6f} -> {result.loss_curve[-1]:.6f}")
    elif args.command == "build-bank":
        bank = pipeline.run_build_bank(config)
        print(f"bank K={bank.size} H_bank={bank.horizon} seed={bank.seed} -> {pipeline.run_paths(config).bank}")
    elif args.command == "train":
        for horizon in config.horizons:
            _, _, result = pipeline.run_train(config, horizon, resume=args.resume, progress=args.progress)
            print(f"H={horizon}: {result.state.epochs_done} epochs, step {result.state.step}")
    elif args.command == "eval":
        _print_report(pipeline.run_eval(config))
    elif args.command == "predict":
        for horizon in config.horizons:
            forecast = pipeline.run_predict(config, horizon)
            print(f"H={horizon}: " + " ".join(f"{v:.6g}" for v in forecast))
    elif args.command == "periodicity":
        components = pipeline.run_periodicity(config)
        print(json.dumps({
            "acf": {str(k): v for k, v in components.acf_values.items()},
            "acf_score": components.acf_score,
            "entropy": components.entropy,
            "inv_entropy": components.inv_entropy,
            "score": components.score,
        }, indent=2))
    elif args.command == "plot":
        for path in pipeline.run_plot(config):
            print(path)
    elif args.command == "sweep":
        frame = pipeline.run_sweep(config, args.bank_sizes, args.top_ks, progress=args.progress)
        print(frame.to_string(index=False))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return run(args)
    except PfrpError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
