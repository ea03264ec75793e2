"""Command line entry point: run, sweep, report, fetch-data and serve.

Examples::

    python cli.py run --experiment permuted --methods sgd,ewc-s,wva-s --tasks 3 --passes 10 \
        --lambda ewc-s=100 --lambda wva-s=10
    python cli.py run --experiment split --methods wva-s --lambda 10 --early-stop
    python cli.py report results/run1 results/run2 --out results/combined
"""
import argparse
import logging
import logging.config
import sys
from pathlib import Path

from data import DEFAULT_DATA_DIR, DEFAULT_MIRROR, fetch_mnist
from errors import ConfigurationError, DataError, NumericError, WvaError
from harness import (
    EWC_LAMBDA_GRID,
    WVA_LAMBDA_GRID,
    final_mean_accuracy,
    run_lambda_sweep,
    run_sequential,
    run_split_early_stop,
)
from results import emit_results, report, write_sweep
from schemas import (
    METHOD_LABELS,
    ExperimentKind,
    ExperimentResult,
    parse_config,
    read_config_file,
)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

LOGGING_INI = Path(__file__).with_name("logging.ini")


def configure_logging(verbose: bool = False) -> None:
    if LOGGING_INI.is_file():
        logging.config.fileConfig(str(LOGGING_INI), disable_existing_loggers=False)
    else:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)-5.5s [%(name)s] %(message)s")
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


def _csv_list(text: str):
    return [item.strip() for item in text.split(",") if item.strip()]


def _float_list(text: str):
    try:
        return [float(v) for v in _csv_list(text)]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file mirroring ExperimentConfig; flags override it")
    p.add_argument("--experiment", choices=[k.value for k in ExperimentKind])
    p.add_argument("--methods", type=_csv_list, help=f"comma-separated subset of {','.join(METHOD_LABELS)}")
    p.add_argument("--tasks", type=int)
    p.add_argument("--passes", type=int)
    p.add_argument("--lambda", dest="lambdas", action="append", metavar="[METHOD=]VALUE",
                   help="lambda for one method (ewc-s=100) or for every regularized method (10); repeatable")
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", dest="hidden_sizes", type=lambda t: [int(v) for v in _csv_list(t)],
                   help="hidden layer sizes, e.g. 300,150")
    p.add_argument("--subsample", type=int, help="use this many training examples (desk scale)")
    p.add_argument("--subsample-test", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--eval-split", choices=["test", "train", "both"])
    p.add_argument("--early-stop", action="store_true", default=None)
    p.add_argument("--patience", type=int)
    p.add_argument("--fisher-labels", choices=["sampled", "true"])
    p.add_argument("--data-dir")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--format", dest="formats", type=_csv_list, help="csv,json")
    p.add_argument("--persist-artifacts", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Sequential training experiments: SGD, EWC and WVA")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write result files")
    _add_config_flags(run)
    run.add_argument("--registry", action="store_true", help="also store the results in the run registry")
    run.add_argument("--name", help="experiment name in the registry")

    sweep = sub.add_parser("sweep", help="coarse lambda sweep per method")
    _add_config_flags(sweep)
    sweep.add_argument("--ewc-grid", type=_float_list, default=list(EWC_LAMBDA_GRID))
    sweep.add_argument("--wva-grid", type=_float_list, default=list(WVA_LAMBDA_GRID))

    rep = sub.add_parser("report", help="aggregate runs.csv files from prior runs")
    rep.add_argument("paths", nargs="+", help="run directories or runs.csv files")
    rep.add_argument("--out", required=True)

    fetch = sub.add_parser("fetch-data", help="download and verify the MNIST IDX files")
    fetch.add_argument("--dest", default=DEFAULT_DATA_DIR)
    fetch.add_argument("--mirror", default=DEFAULT_MIRROR)

    serve = sub.add_parser("serve", help="serve the run registry over HTTP")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _lambda_overrides(values, methods):
    lambdas = {}
    for value in values:
        key, sep, number = value.partition("=")
        try:
            if sep:
                lambdas[key.strip().lower()] = float(number)
            else:
                lambdas.update({m: float(key) for m in methods if m != "sgd"})
        except ValueError as e:
            raise ConfigurationError(f"Bad --lambda value {value!r}") from e
    return lambdas


def config_from_args(args, require_lambdas: bool = True):
    data = read_config_file(args.config) if args.config else {}
    flags = ("experiment", "methods", "tasks", "passes", "learning_rate", "batch_size", "epochs", "seed",
             "hidden_sizes", "subsample", "subsample_test", "eval_interval", "eval_split", "fisher_labels",
             "data_dir", "output_dir", "formats", "persist_artifacts")
    for name in flags:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if args.lambdas:
        methods = data.get("methods") or list(METHOD_LABELS)
        data["lambdas"] = {**data.get("lambdas", {}), **_lambda_overrides(args.lambdas, methods)}
    if args.early_stop or args.patience is not None:
        early = dict(data.get("early_stop", {}))
        if args.early_stop:
            early["enabled"] = True
        if args.patience is not None:
            early["patience"] = args.patience
        data["early_stop"] = early
    return parse_config(data, require_lambdas)


def cmd_run(args) -> int:
    config = config_from_args(args)
    if config.early_stop.enabled and config.experiment is ExperimentKind.split and config.tasks == 2:
        records = run_split_early_stop(config)
    else:
        records = run_sequential(config)
    emit_results(records, config)

    print(f"{'method':<8} {'passes':>6} {'failed':>6} {'final mean acc':>15}")
    for label in config.methods:
        mine = [r for r in records if r.method == label]
        good = [r for r in mine if not r.failed]
        final = sum(map(final_mean_accuracy, good)) / len(good) if good else float("nan")
        print(f"{label:<8} {len(mine):>6} {len(mine) - len(good):>6} {final:>15.4f}")

    if args.registry:
        from database import SessionLocal
        from registry import init_registry, store_experiment

        init_registry()
        db = SessionLocal()
        try:
            name = args.name or Path(config.output_dir).name
            experiment = store_experiment(db, ExperimentResult(config=config, records=records), name)
            print(f"Stored in registry as experiment {experiment.experiment_id}")
        finally:
            db.close()
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = config_from_args(args, require_lambdas=False)
    results = run_lambda_sweep(config, ewc_grid=args.ewc_grid, wva_grid=args.wva_grid)
    path = write_sweep(results, config.output_dir)
    print(f"Sweep table written to {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    finals = report(args.paths, args.out)
    print(f"{'method':<8} {'final mean acc':>15}")
    for method, value in finals.items():
        print(f"{method:<8} {value:>15.4f}")
    return EXIT_OK


def cmd_fetch(args) -> int:
    dest = fetch_mnist(args.dest, args.mirror)
    print(f"MNIST files ready in {dest}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "fetch-data": cmd_fetch,
    "serve": cmd_serve,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"Data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"Numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except WvaError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(cli_main())
