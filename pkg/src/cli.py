"""
Command line interface: dataset synthesis, training, evaluation, MI benchmarks,
plots and the ablation grid.
"""
import argparse
import dataclasses
import logging
import sys
from typing import List, Optional

from src.ablation import run_ablation
from src.benchmark import dataset_benchmark, gaussian_benchmark
from src.config import ABLATION_PRESETS, TABLE_ROWS, TrainingConfig, resolve_config
from src.mi_estimators import Representation
from src.plots import emit_plots
from src.synthetic_data import SequenceDatasetConfig, generate_sequence_dataset, load_dataset
from src.trainer import evaluate, resume, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2


def int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid list of integers: {text}")


def add_training_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("training", "Any configuration field; flags override the config file "
                                                  "and AMIE_* environment variables.")
    group.add_argument("--config", "-c", dest="config_file", default=None,
                       help="key=value file with configuration fields")
    for f in dataclasses.fields(TrainingConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar=f.name.upper(),
                           help=f"default: {f.default}")


def training_flags(parsed_args: argparse.Namespace) -> dict:
    return {f.name: getattr(parsed_args, f.name) for f in dataclasses.fields(TrainingConfig)}


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__, add_help=True)
    parser.add_argument("--debug", "-d", default=False, action="store_true", help="Use debug logging level.")
    parser.add_argument("--verbose", "-V", default=False, action="store_true", help="Show progress bars.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen_data = commands.add_parser("gen-data", help="Render a synthetic talking-mouth dataset")
    gen_data.add_argument("output", help="Dataset directory")
    gen_data.add_argument("--identities", type=int, default=10)
    gen_data.add_argument("--frames", type=int, default=32)
    gen_data.add_argument("--image-size", type=int, default=64)
    gen_data.add_argument("--noise", type=float, default=0.1)
    gen_data.add_argument("--seed", type=int, default=0)

    train_parser = commands.add_parser("train", help="Train a generator")
    train_parser.add_argument("--resume", metavar="RUN_DIR", default=None,
                              help="Continue the run in RUN_DIR from its latest checkpoint")
    add_training_flags(train_parser)

    eval_parser = commands.add_parser("eval", help="Evaluate a run on held-out identities")
    eval_parser.add_argument("run_dir")
    eval_parser.add_argument("--dataset", default=None, help="Dataset directory, defaults to the run's dataset")
    eval_parser.add_argument("--checkpoint", default=None, help="Checkpoint name, defaults to the latest")

    estimate = commands.add_parser("estimate-mi", help="Neural MI estimation benchmarks")
    estimate.add_argument("source", choices=["gaussian", "dataset"])
    estimate.add_argument("dataset", nargs="?", default=None, help="Dataset directory for the 'dataset' source")
    estimate.add_argument("--representation", choices=[r.value for r in Representation], default=None)
    estimate.add_argument("--rho", type=float, default=0.9)
    estimate.add_argument("--dim", type=int, default=1)
    estimate.add_argument("--steps", type=int, default=None)
    estimate.add_argument("--batch-size", type=int, default=None)
    estimate.add_argument("--learning-rate", type=float, default=None)
    estimate.add_argument("--seed", type=int, default=0)

    plot = commands.add_parser("plot", help="Write the plots of an evaluated run")
    plot.add_argument("run_dir")

    ablate = commands.add_parser("ablate", help="Train and evaluate every ablation mode for several seeds")
    ablate.add_argument("ablation_dir", help="Directory for all runs and the result tables")
    ablate.add_argument("--modes", default=",".join(TABLE_ROWS),
                        help=f"Comma separated modes out of {', '.join(ABLATION_PRESETS)}")
    ablate.add_argument("--seeds", type=int_list, default=[0, 1, 2, 3, 4])
    add_training_flags(ablate)
    return parser


def run_command(parsed_args: argparse.Namespace) -> int:
    command = parsed_args.command
    verbose = parsed_args.verbose
    if command == "gen-data":
        config = SequenceDatasetConfig(num_identities=parsed_args.identities,
                                       frames_per_sequence=parsed_args.frames,
                                       image_size=parsed_args.image_size,
                                       noise=parsed_args.noise,
                                       seed=parsed_args.seed)
        generate_sequence_dataset(config, output_dir=parsed_args.output, verbose=verbose)
    elif command == "train":
        if parsed_args.resume:
            max_steps = parsed_args.max_steps
            artifacts = resume(parsed_args.resume, max_steps=int(max_steps) if max_steps else None, verbose=verbose)
        else:
            config = resolve_config(training_flags(parsed_args), parsed_args.config_file)
            artifacts = train(config, verbose=verbose)
        print("\n".join(artifacts.metrics.to_lines()))
    elif command == "eval":
        report = evaluate(parsed_args.run_dir, parsed_args.dataset, parsed_args.checkpoint, verbose=verbose)
        print("\n".join(report.to_lines()))
    elif command == "estimate-mi":
        options = {name: getattr(parsed_args, name) for name in ("steps", "batch_size", "learning_rate")
                   if getattr(parsed_args, name) is not None}
        if parsed_args.source == "gaussian":
            result = gaussian_benchmark(rho=parsed_args.rho, dim=parsed_args.dim,
                                        representation=Representation(parsed_args.representation or "dv"),
                                        seed=parsed_args.seed, verbose=verbose, **options)
        else:
            if not parsed_args.dataset:
                raise ValueError("estimate-mi dataset needs a dataset directory")
            result = dataset_benchmark(load_dataset(parsed_args.dataset),
                                       representation=Representation(parsed_args.representation or "js"),
                                       seed=parsed_args.seed, verbose=verbose, **options)
        print("\n".join(result.to_lines()))
    elif command == "plot":
        for path in emit_plots(parsed_args.run_dir):
            print(path)
    elif command == "ablate":
        base = resolve_config(training_flags(parsed_args), parsed_args.config_file)
        modes = [mode.strip() for mode in parsed_args.modes.split(",") if mode.strip()]
        _, summary = run_ablation(base, parsed_args.ablation_dir, modes, parsed_args.seeds, verbose=verbose)
        print(summary.to_string())
    return EXIT_OK


def main(args: Optional[List[str]] = None) -> int:
    parsed_args = create_parser().parse_args(args=args)
    logging.basicConfig(level=logging.DEBUG if parsed_args.debug else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run_command(parsed_args)
    except ValueError as err:
        logger.error(f"Invalid input: {err}")
        return EXIT_INVALID
    except (RuntimeError, OSError) as err:
        logger.error(f"{type(err).__name__}: {err}")
        if parsed_args.debug:
            logger.exception(err)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
