import csv
import json
import logging
import sys
from argparse import ArgumentParser, ArgumentTypeError, Namespace
from pathlib import Path
from time import monotonic
from typing import Dict, NoReturn, Optional, Sequence

import yaml

from ._autodiff import NonFiniteError
from ._checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ._evaluation import (
    EvaluationError,
    embedding_separation,
    evaluate,
    export_embeddings,
    report_rows,
    write_curves,
    write_report_csv,
    write_report_json,
    write_tasks,
)
from ._meta_learner import TrainedModel, TrainingAbortedError, train
from ._metrics import MetricsSink, environment_info, format_exception
from ._send_request import TelemetryRequestError
from ._task_network import ModulationOperator
from ._utils import atomic_writer
from .config import ConfigError, EvaluationConfig, ModelKind, RunConfig, load_run_config
from .events import (
    CheckpointSavedEvent,
    EvaluationFinishedEvent,
    RunAbortedEvent,
    RunEndedEvent,
    RunStartedEvent,
)
from .tasks import RngStream, TaskDistributionError, resolve_mode_set

__all__ = ("main", "build_parser", "UsageError", "EXIT_OK", "EXIT_USAGE", "EXIT_RUNTIME",
           "CHECKPOINT_FILE",)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

CHECKPOINT_FILE = "checkpoint.ckpt"
CONFIG_SNAPSHOT_FILE = "config.yaml"


class UsageError(Exception):
    """
    Raised for malformed command lines: unknown subcommands or flags, missing
    required flags and values that fail to parse.
    """
    pass


class _ArgumentParser(ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _mode_set_arg(value: str) -> object:
    try:
        return resolve_mode_set(int(value) if value.isdigit() else value.split(","))
    except TaskDistributionError as e:
        raise ArgumentTypeError(str(e)) from None


def build_parser() -> ArgumentParser:
    parser = _ArgumentParser(prog="mmaml",
                             description="Multimodal meta-learning for few-shot regression")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    train_cmd = commands.add_parser("train", help="Meta-train a model")
    train_cmd.add_argument("--config", type=Path, required=True, help="YAML run config")
    train_cmd.add_argument("--model", choices=[k.value for k in ModelKind])
    train_cmd.add_argument("--operator", choices=[o.value for o in ModulationOperator
                                                  if o is not ModulationOperator.IDENTITY])
    train_cmd.add_argument("--seed", type=int)
    train_cmd.add_argument("--iterations", type=int)
    train_cmd.add_argument("--out", type=Path, help="Run directory")
    train_cmd.add_argument("--resume", type=Path, help="Checkpoint to continue from")

    eval_cmd = commands.add_parser("eval", help="Evaluate a checkpoint")
    eval_cmd.add_argument("--checkpoint", type=Path, required=True)
    eval_cmd.add_argument("--tasks-per-mode", type=int,
                          help="Defaults to the run's evaluation.tasks_per_mode")
    eval_cmd.add_argument("--seed", type=int, help="Evaluation stream seed")
    eval_cmd.add_argument("--modes", type=_mode_set_arg, help="2, 3, 5 or a list of modes")
    eval_cmd.add_argument("--workers", type=int, default=1)
    eval_cmd.add_argument("--out", type=Path, help="Report file (stdout when omitted)")
    fmt = eval_cmd.add_mutually_exclusive_group()
    fmt.add_argument("--json", dest="format", action="store_const", const="json")
    fmt.add_argument("--csv", dest="format", action="store_const", const="csv")

    embed_cmd = commands.add_parser("export-embeddings", help="Export task embeddings as CSV")
    embed_cmd.add_argument("--checkpoint", type=Path, required=True)
    embed_cmd.add_argument("--tasks", type=int,
                           help="Defaults to the run's evaluation.embedding_tasks")
    embed_cmd.add_argument("--out", type=Path, required=True)
    embed_cmd.add_argument("--seed", type=int)
    embed_cmd.add_argument("--modes", type=_mode_set_arg)

    gen_cmd = commands.add_parser("gen-tasks", help="Write sampled tasks as JSON lines")
    gen_cmd.add_argument("--modes", type=_mode_set_arg, required=True)
    gen_cmd.add_argument("--count", type=int, required=True)
    gen_cmd.add_argument("--out", type=Path, required=True)
    gen_cmd.add_argument("--seed", type=int, default=0)

    curves_cmd = commands.add_parser("curves", help="Write prediction curves as CSV")
    curves_cmd.add_argument("--checkpoint", type=Path, required=True)
    curves_cmd.add_argument("--out", type=Path, required=True)
    curves_cmd.add_argument("--points", type=int, default=200)
    curves_cmd.add_argument("--seed", type=int)
    curves_cmd.add_argument("--modes", type=_mode_set_arg)
    return parser


def _apply_overrides(config: RunConfig, args: Namespace) -> RunConfig:
    training = config.training
    if args.seed is not None:
        training = training.replace(seed=args.seed)
    if args.iterations is not None:
        training = training.replace(iterations=args.iterations)
    if args.operator is not None:
        training = training.replace(operator=ModulationOperator(args.operator))
    return RunConfig(
        model=ModelKind(args.model) if args.model else config.model,
        out_dir=str(args.out) if args.out is not None else config.out_dir,
        training=training,
        evaluation=config.evaluation,
        telemetry=config.telemetry,
    )


def _run_train(args: Namespace) -> int:
    config = _apply_overrides(load_run_config(args.config), args)
    out_dir = Path(config.out_dir)
    resume = load_checkpoint(args.resume) if args.resume is not None else None

    out_dir.mkdir(parents=True, exist_ok=True)
    with atomic_writer(out_dir / CONFIG_SNAPSHOT_FILE) as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)

    started = monotonic()
    final: Dict[str, float] = {}
    with MetricsSink(out_dir, config.telemetry) as sink:
        sink.emit(RunStartedEvent(sink.run_id, model=config.model.value,
                                  config=config.to_dict(), environment=environment_info(),
                                  start_iteration=resume.iteration if resume else 0))

        def on_checkpoint(model: TrainedModel) -> None:
            path = save_checkpoint(model, out_dir / CHECKPOINT_FILE)
            sink.emit(CheckpointSavedEvent(sink.run_id, iteration=model.iteration,
                                           path=str(path)))

        try:
            model = train(config.model, config.training, sink=sink, resume=resume,
                          on_checkpoint=on_checkpoint,
                          on_step=lambda _, metrics: final.update(loss=metrics.mean_query_loss))
        except (TrainingAbortedError, NonFiniteError) as e:
            sink.emit(RunAbortedEvent(sink.run_id, iteration=getattr(e, "iteration", None) or 0,
                                      exception=format_exception(e)))
            raise

        sink.emit(RunEndedEvent(
            sink.run_id, iterations=model.iteration,
            final_loss=final.get("loss"),
            duration_ms=round((monotonic() - started) * 1000)))
    print(out_dir / CHECKPOINT_FILE)
    return EXIT_OK


def _evaluation_config(checkpoint: Path) -> EvaluationConfig:
    # evaluation section of the run directory's config snapshot, if any
    snapshot = checkpoint.parent / CONFIG_SNAPSHOT_FILE
    if snapshot.is_file():
        return load_run_config(snapshot).evaluation
    return EvaluationConfig()


def _run_eval(args: Namespace) -> int:
    defaults = _evaluation_config(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    tasks_per_mode = defaults.tasks_per_mode if args.tasks_per_mode is None \
        else args.tasks_per_mode
    seed = defaults.seed if args.seed is None else args.seed
    report = evaluate(model, args.modes, tasks_per_mode, seed=seed, workers=args.workers)
    if args.format == "csv":
        if args.out is not None:
            write_report_csv(report, args.out)
        else:
            csv.writer(sys.stdout).writerows(report_rows(report))
    else:
        if args.out is not None:
            write_report_json(report, args.out)
        else:
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))

    run_dir = args.checkpoint.parent
    with MetricsSink(run_dir) as sink:
        sink.emit(EvaluationFinishedEvent(sink.run_id, report.to_dict()))
    return EXIT_OK


def _run_export_embeddings(args: Namespace) -> int:
    defaults = _evaluation_config(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    count = defaults.embedding_tasks if args.tasks is None else args.tasks
    seed = defaults.seed if args.seed is None else args.seed
    rows = export_embeddings(model, args.modes, count, args.out, seed=seed)
    if len(rows) >= 2:
        result = embedding_separation(rows, RngStream(seed))
        logger.info("Nearest-centroid mode accuracy %.3f (chance %.3f)", result.accuracy,
                    result.chance)
    return EXIT_OK


def _run_gen_tasks(args: Namespace) -> int:
    if args.count < 0:
        raise UsageError(f"--count must be >= 0, got {args.count!r}")
    write_tasks(args.modes, args.count, args.out, seed=args.seed)
    return EXIT_OK


def _run_curves(args: Namespace) -> int:
    if args.points < 2:
        raise UsageError(f"--points must be >= 2, got {args.points!r}")
    seed = _evaluation_config(args.checkpoint).seed if args.seed is None else args.seed
    model = load_checkpoint(args.checkpoint)
    write_curves(model, args.out, mode_set=args.modes, points=args.points, seed=seed)
    return EXIT_OK


_COMMANDS = {
    "train": _run_train,
    "eval": _run_eval,
    "export-embeddings": _run_export_embeddings,
    "gen-tasks": _run_gen_tasks,
    "curves": _run_curves,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    :return: 0 on success, 1 for usage and configuration errors, 2 when a run
             aborts (non-finite values, unreadable checkpoints, I/O failures).
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, EvaluationError) as e:
        print(f"[Error] {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAbortedError, NonFiniteError, CheckpointError, TelemetryRequestError,
            OSError) as e:
        print(f"[Error] {e!r}", file=sys.stderr)
        return EXIT_RUNTIME
