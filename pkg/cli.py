"""
Multibin Command Line
Training, evaluation, benchmarking and cost reporting

    python cli.py train --config config.json --set strategy=ovr
    python cli.py bench --config config.json --train
    python cli.py sweep --set dataset=cifar10 --set model=quantum
    python cli.py cost 6 --strategy ovo
    python cli.py fetch mnist

Exit codes: 0 ok, 2 configuration or usage, 3 data, 4 numeric failure,
130 interrupted. Diagnostics go to stderr, tables to stdout.
"""

import argparse
import logging
import signal
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import pandas as pd

import harness
from data_pipeline import DatasetId
from dataset_fetcher import fetch_dataset
from errors import ExitCode, Interrupted, MultibinError
from multiclass import Strategy, inference_cost

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
RESULTS_CSV = "results.csv"


@dataclass
class CliInvocation:
    """What was asked for, independent of argparse"""
    subcommand: str
    config_path: Optional[str] = None
    overrides: List[str] = field(default_factory=list)
    verbosity: int = 0  # -1 quiet, 0 normal, 1 verbose

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "CliInvocation":
        overrides = list(args.set or [])
        if args.workers:
            overrides.append(f"workers={args.workers}")
        verbosity = -1 if args.quiet else 1 if args.verbose else 0
        return cls(args.command, args.config, overrides, verbosity)

    @property
    def log_level(self) -> int:
        return {-1: logging.WARNING, 0: logging.INFO, 1: logging.DEBUG}[self.verbosity]


class MultibinCli:
    """Runs one subcommand with a config, a stop event and stdout for data"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.invocation = CliInvocation.from_args(args)
        self.stop_event = threading.Event()

    def _config(self) -> harness.ExperimentConfig:
        return harness.load_experiment_config(self.invocation.config_path, self.invocation.overrides)

    def _handle_sigint(self, signum, frame):
        if self.stop_event.is_set():
            raise KeyboardInterrupt
        logger.warning("Interrupt received: finishing in-flight tasks (press again to abort)")
        self.stop_event.set()

    def _emit(self, frame: pd.DataFrame) -> None:
        print(frame.to_string(index=False) if isinstance(frame.index, pd.RangeIndex) else frame.to_string())

    def cmd_train(self) -> int:
        config = self._config()
        manifest, _ = harness.train_experiment(config, force=self.args.force, stop_event=self.stop_event)
        print(f"{config.run_dir / harness.MANIFEST_NAME}\t{len(manifest.entries)} models")
        return ExitCode.OK.value

    def cmd_eval(self) -> int:
        config = self._config()
        result = harness.run_experiment(config, force=True, stop_event=self.stop_event, train=False)
        self._emit(harness.results_frame([result]))
        return ExitCode.OK.value

    def cmd_bench(self) -> int:
        config = self._config()
        csv_path = Path(config.out_dir) / RESULTS_CSV
        if self.args.repeat:
            results, mean_row = harness.run_seed_repeats(config, force=self.args.force,
                                                         stop_event=self.stop_event)
            harness.append_results_csv(csv_path, results)
            self._emit(harness.results_frame([r.row() for r in results] + [mean_row]))
            return ExitCode.OK.value
        result = harness.run_experiment(config, force=self.args.force, stop_event=self.stop_event,
                                        train=self.args.train)
        harness.append_results_csv(csv_path, [result])
        self._emit(harness.results_frame([result]))
        return ExitCode.OK.value

    def cmd_sweep(self) -> int:
        config = self._config()
        results = harness.run_k_sweep(config, self.args.k_range, force=self.args.force,
                                      stop_event=self.stop_event)
        harness.append_results_csv(Path(config.out_dir) / RESULTS_CSV, results)
        self._emit(harness.render_sweep_table(results))
        return ExitCode.OK.value

    def cmd_cost(self) -> int:
        strategies = [self.args.strategy] if self.args.strategy else [s.value for s in Strategy]
        ledgers = [inference_cost(s, self.args.K, self.args.policy).to_dict() for s in strategies]
        frame = pd.DataFrame(ledgers, columns=["strategy", "K", "models_total", "worst_case_evals"])
        self._emit(frame)
        return ExitCode.OK.value

    def cmd_fetch(self) -> int:
        config = self._config()
        dataset = self.args.dataset or config.dataset
        results = fetch_dataset(dataset, config.data_dir)
        for result in results:
            print(f"{result.path}\t{result.status.value}\t{result.bytes}")
        return ExitCode.OK.value

    def run(self) -> int:
        command = getattr(self, f"cmd_{self.invocation.subcommand}")
        previous = signal.signal(signal.SIGINT, self._handle_sigint)
        try:
            return command()
        except Interrupted as e:
            print(f"interrupted: {e}", file=sys.stderr)
            return ExitCode.INTERRUPTED.value
        except MultibinError as e:
            print(f"error: {e}", file=sys.stderr)
            return e.exit_code.value
        except KeyboardInterrupt:
            print("interrupted", file=sys.stderr)
            return ExitCode.INTERRUPTED.value
        finally:
            signal.signal(signal.SIGINT, previous)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--force", action="store_true", help="rerun even if records exist")
    common.add_argument("--workers", type=int, help="concurrent binary trainings")
    common.add_argument("--quiet", action="store_true", help="warnings and errors only")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="multibin",
                                     description="Multinomial classification from binary models")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train all binary models and write the manifest")
    sub.add_parser("eval", parents=[common], help="evaluate an existing manifest on the test split")
    bench = sub.add_parser("bench", parents=[common], help="evaluate and append to the results CSV")
    bench.add_argument("--train", action="store_true", help="train when no manifest exists")
    bench.add_argument("--repeat", action="store_true", help="run every repeat_seeds seed and add a mean row")
    sweep = sub.add_parser("sweep", parents=[common], help="accuracy versus K")
    sweep.add_argument("--k-range", type=lambda s: [int(v) for v in s.split(",")],
                       help="comma separated K values (default: config k_range)")
    cost = sub.add_parser("cost", parents=[common], help="models and evaluations per prediction")
    cost.add_argument("K", type=int)
    cost.add_argument("--strategy", help="one strategy (default: all)")
    cost.add_argument("--policy", default="balanced")
    fetch = sub.add_parser("fetch", parents=[common], help="download a dataset into data_dir")
    fetch.add_argument("dataset", nargs="?", choices=[d.value for d in DatasetId],
                       help="default: the config dataset")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    cli = MultibinCli(build_parser().parse_args(argv))
    logging.basicConfig(level=cli.invocation.log_level, format=LOG_FORMAT, stream=sys.stderr)
    return cli.run()


if __name__ == "__main__":
    sys.exit(main())
