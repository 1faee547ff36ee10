"""Command-line entry point: data generation, training, evaluation, diagnostics,
the property suite and the linear-theory checks.

Every numeric result is printed as JSON on stdout and mirrored to files. Any
failure prints ``{"error", "message", "exit_code"}`` on stderr and exits with
that code.
"""
import argparse
import concurrent.futures
import dataclasses
import json
import logging
import statistics
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import run_store
import theory
from checkpoint import load_checkpoint, read_manifest, save_checkpoint
from config import (
    NORM_MODES,
    RunConfig,
    TaskSequenceSpec,
    load_json_config,
    load_run_config,
    log_file_path,
    log_level,
    parse_data_spec,
    parse_run_config,
)
from datagen import (
    check_learnability,
    dataset_fingerprint,
    generate,
    load_dataset,
    save_dataset,
)
from diagnostics import (
    collect_probe,
    delta_diagnostics,
    median_shift,
    probe_from_dict,
    probe_to_dict,
    write_deltas_csv,
)
from errors import (
    ConfigError,
    ConfitError,
    DiagnosticError,
    TheoryBoundViolation,
    UsageError,
    VerificationFailure,
)
from metrics import (
    AccuracyMatrix,
    ablation_orderings,
    summarize,
    write_acc_matrix_csv,
    write_metrics_json,
    write_orderings_csv,
)
from run_store import CellKey, config_fingerprint
from trainer import continual_run, evaluate
from utils import atomic_write_json, write_csv
from verify import run_suite, suite_report

logger = logging.getLogger("confit")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

BN_MODES = {"shared": "shared_bn", "task": "task_bn", "xconv": "xconv_bn"}
SCHEDULES = {"plain": "plain_ft", "hierarchical": "hierarchical", "lp": "linear_probe_only",
             "stl": "stl"}
MOMENTS = {"running": "running", "t-mean": "t_mean", "t-var": "t_var", "t-both": "t_both"}
GRID_SCHEDULES = ("plain_ft", "hierarchical")
GRID_HEADER = ["schedule", "norm_mode", "seeds", "acc_mean", "fgt_mean", "median_delta1",
               "median_delta2_minus_delta0"]
CELL_HEADER = ["schedule", "norm_mode", "seed", "acc", "fgt", "median_delta1",
               "median_delta2_minus_delta0"]


def setup_logging():
    """Console logging on stderr, plus a rotating file when CONFIT_LOG_FILE is set."""
    logging.basicConfig(level=log_level(), format=LOG_FORMAT, stream=sys.stderr)
    log_file = log_file_path()
    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handler = RotatingFileHandler(log_file, maxBytes=5 * 1024 * 1024, backupCount=3)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)
        logger.info("also logging to %s (rotating, 5 MB x 3)", log_file)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def emit(document):
    print(json.dumps(document, indent=2, sort_keys=True))


def _plain(document):
    """Tuples to lists, so a config dict parses the way a JSON file does."""
    return json.loads(json.dumps(document))


# -- gen-data ---------------------------------------------------------------------

def data_spec_from_args(arguments) -> TaskSequenceSpec:
    spec = (parse_data_spec(load_json_config(arguments.spec)) if arguments.spec
            else TaskSequenceSpec())
    overrides = {
        name: getattr(arguments, name)
        for name in ("num_tasks", "classes_per_task", "train_per_class", "test_per_class",
                     "channels", "height", "width", "prototype_scale", "noise_scale", "cutoff",
                     "pretext_classes", "seed")
        if getattr(arguments, name) is not None
    }
    return dataclasses.replace(spec, **overrides)


def cmd_gen_data(arguments):
    spec = data_spec_from_args(arguments)
    sequence = generate(spec)
    scores = check_learnability(sequence, allow_degenerate=arguments.allow_degenerate)
    out = save_dataset(sequence, arguments.out)
    emit({"out": str(out), "num_tasks": len(sequence.tasks),
          "pretext": sequence.pretext is not None,
          "probe_accuracy": {str(task_id): score for task_id, score in scores.items()}})
    return 0


# -- train ------------------------------------------------------------------------

def run_config_from_args(arguments) -> RunConfig:
    run_config = load_run_config(arguments.config) if arguments.config else RunConfig()
    train = run_config.train
    if arguments.bn_mode:
        train = dataclasses.replace(train, norm_mode=BN_MODES[arguments.bn_mode])
    if arguments.schedule:
        train = dataclasses.replace(
            train, schedule=dataclasses.replace(train.schedule,
                                                mode=SCHEDULES[arguments.schedule]))
    if arguments.seed is not None:
        train = dataclasses.replace(train, seed=arguments.seed)
    return dataclasses.replace(run_config, train=train)


def checkpoint_extra(run_config: RunConfig, result, completed) -> dict:
    extra = {
        "config": _plain(run_config.to_dict()),
        "num_tasks": result.matrix.num_tasks,
        "completed": completed,
        "acc_rows": [list(row) for row in result.matrix.to_rows()],
    }
    if "first" in result.probes:
        extra["probe_first"] = probe_to_dict(result.probes["first"])
    return extra


def write_run_outputs(out, run_config: RunConfig, result):
    """Metrics, matrix, deltas and per-epoch logs of a finished run."""
    out = Path(out)
    summary = summarize(result.matrix)
    extra = {
        "norm_mode": run_config.train.norm_mode,
        "schedule": run_config.train.schedule.mode,
        "seed": run_config.train.seed,
        "bank_overhead": result.model.bank_overhead(),
    }
    if "first" in result.probes and "final" in result.probes:
        deltas = delta_diagnostics(result.probes["first"], result.probes["final"])
        write_deltas_csv(out / "deltas.csv", deltas)
        extra.update(median_shift(deltas))
    else:
        logger.warning("no probe from right after task 1; skipping deltas.csv")
    write_acc_matrix_csv(result.matrix, out / "acc_matrix.csv")
    write_metrics_json(out / "metrics.json", summary, **extra)
    atomic_write_json(out / "logs.json", [log.to_dict() for log in result.logs])
    return {**summary, **extra}


def train_once(data_dir, run_config: RunConfig, out, checkpoint_after=None, resume=None):
    sequence = load_dataset(data_dir)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stl = run_config.train.schedule.mode == "stl"
    model = matrix = probes = None
    if resume:
        manifest = read_manifest(resume)
        extra = manifest["extra"]
        model = load_checkpoint(resume)
        matrix = AccuracyMatrix.from_rows(extra["num_tasks"], extra["acc_rows"])
        if matrix.num_tasks != len(sequence.tasks):
            raise ConfigError(f"checkpoint covers {matrix.num_tasks} tasks, dataset has "
                              f"{len(sequence.tasks)}")
        if "probe_first" in extra:
            probes = {"first": probe_from_dict(extra["probe_first"])}

    def on_task_end(j, result):
        if stl:
            return
        if j == 1 or j == checkpoint_after:
            save_checkpoint(result.model, out / f"checkpoint_after_{j}",
                            checkpoint_extra(run_config, result, j))

    result = continual_run(sequence, run_config.train, model, matrix, probes, on_task_end)
    if stl:
        for task_id, learner in result.learners.items():
            save_checkpoint(learner, out / "learners" / f"task{task_id}",
                            checkpoint_extra(run_config, result, task_id))
    else:
        save_checkpoint(result.model, out / "checkpoint",
                        checkpoint_extra(run_config, result, len(sequence.tasks)))
    return write_run_outputs(out, run_config, result)


def grid_cell_document(document, schedule, norm_mode, seed) -> dict:
    """The effective run config of one grid cell, as a plain JSON document."""
    run_config = parse_run_config(document)
    train = dataclasses.replace(
        run_config.train, seed=seed, norm_mode=norm_mode,
        schedule=dataclasses.replace(run_config.train.schedule, mode=schedule))
    return _plain(dataclasses.replace(run_config, train=train).to_dict())


def grid_cell(data_dir, cell_document, schedule, norm_mode, seed, out) -> dict:
    """One (schedule, norm mode, seed) run; module-level so worker processes can pickle it."""
    cell_out = Path(out) / "cells" / f"{schedule}_{norm_mode}_seed{seed}"
    summary = train_once(data_dir, parse_run_config(cell_document), cell_out)
    return {name: summary.get(name) for name in CELL_HEADER}


def _mean_over(runs, name):
    values = [run[name] for run in runs if run.get(name) is not None]
    return repr(statistics.fmean(values)) if values else ""


def grid_rows(cells) -> list[list]:
    """Table-style comparison: per (schedule, norm mode), means over seeds."""
    rows = []
    for schedule in GRID_SCHEDULES:
        for norm_mode in NORM_MODES:
            runs = [cell for (cell_schedule, cell_norm, _), cell in sorted(cells.items())
                    if cell_schedule == schedule and cell_norm == norm_mode]
            if runs:
                rows.append([schedule, norm_mode, len(runs)]
                            + [_mean_over(runs, name) for name in CELL_HEADER[3:]])
    return rows


def run_grid(data_dir, run_config: RunConfig, seeds, out, workers=1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data_hash = dataset_fingerprint(data_dir)
    document = _plain(run_config.to_dict())
    documents, keys = {}, {}
    for schedule in GRID_SCHEDULES:
        for norm_mode in NORM_MODES:
            for seed in seeds:
                cell = (schedule, norm_mode, seed)
                documents[cell] = grid_cell_document(document, *cell)
                keys[cell] = CellKey(*cell, config_fingerprint(documents[cell]), data_hash)
    connection = run_store.open_store(out)
    try:
        cells = {}
        for cell, key in keys.items():
            summary = run_store.cell_summary(connection, key)
            if summary is not None:
                cells[cell] = summary
        pending = [cell for cell in keys if cell not in cells]
        logger.info("grid: %d cells finished, %d to run", len(cells), len(pending))
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(grid_cell, str(data_dir), documents[cell], *cell,
                                       str(out)): cell
                           for cell in pending}
                for future in concurrent.futures.as_completed(futures):
                    cell = futures[future]
                    cells[cell] = future.result()
                    run_store.mark_finished(connection, keys[cell], cells[cell])
        else:
            for cell in pending:
                cells[cell] = grid_cell(str(data_dir), documents[cell], *cell, str(out))
                run_store.mark_finished(connection, keys[cell], cells[cell])
    finally:
        connection.close()
    write_csv(out / "grid_cells.csv", CELL_HEADER,
              [[cell[name] for name in CELL_HEADER] for _, cell in sorted(cells.items())])
    rows = grid_rows(cells)
    write_csv(out / "grid.csv", GRID_HEADER, rows)
    orderings = ablation_orderings(cells)
    write_orderings_csv(orderings, out / "orderings.csv")
    return {"cells": len(cells), "ran": len(pending),
            "grid": [dict(zip(GRID_HEADER, row)) for row in rows], "orderings": orderings}


def parse_seeds(value) -> list[int]:
    try:
        seeds = [int(item) for item in value.split(",") if item.strip()]
    except ValueError as error:
        raise UsageError(
            f"--seeds must be a comma-separated list of integers: {value!r}") from error
    if not seeds or min(seeds) < 0:
        raise UsageError("--seeds needs at least one non-negative seed")
    return seeds


def cmd_train(arguments):
    if arguments.resume and (arguments.config or arguments.bn_mode or arguments.schedule
                             or arguments.grid):
        raise UsageError("--resume takes its configuration from the checkpoint; "
                         "drop --config, --bn-mode, --schedule and --grid")
    if arguments.workers < 1:
        raise UsageError("--workers must be >= 1")
    if arguments.grid:
        run_config = run_config_from_args(arguments)
        seeds = parse_seeds(arguments.seeds) if arguments.seeds else [run_config.train.seed]
        emit(run_grid(arguments.data, run_config, seeds, arguments.out, arguments.workers))
        return 0
    if arguments.resume:
        run_config = parse_run_config(read_manifest(arguments.resume)["extra"]["config"])
    else:
        run_config = run_config_from_args(arguments)
    summary = train_once(arguments.data, run_config, arguments.out, arguments.checkpoint_after,
                         arguments.resume)
    emit(summary)
    return 0


# -- eval / diag --------------------------------------------------------------------

def cmd_eval(arguments):
    model = load_checkpoint(arguments.ckpt)
    task = load_dataset(arguments.data).task(arguments.task)
    moment_mode = MOMENTS[arguments.moments]
    accuracy = evaluate(model, task.task_id, task.test_x, task.test_y, moment_mode,
                        arguments.batch_size)
    document = {"task": task.task_id, "moments": moment_mode, "accuracy": accuracy,
                "checkpoint": str(arguments.ckpt)}
    if arguments.out:
        atomic_write_json(arguments.out, document)
    emit(document)
    return 0


def cmd_diag(arguments):
    sequence = load_dataset(arguments.data)
    first_task = sequence.task(1)
    probes = []
    for directory in (arguments.ckpt_after_1, arguments.ckpt_final):
        model = load_checkpoint(directory)
        if 1 not in model.heads:
            raise DiagnosticError(f"{directory} has not learned task 1")
        probes.append(collect_probe(model, first_task.test_x, 1, arguments.batch_size))
    deltas = delta_diagnostics(*probes)
    out = Path(arguments.out or arguments.ckpt_final)
    write_deltas_csv(out / "deltas.csv", deltas)
    emit({"deltas": [dataclasses.asdict(delta) for delta in deltas], **median_shift(deltas)})
    return 0


# -- verify / theory ----------------------------------------------------------------

def cmd_verify(arguments):
    if arguments.cases < 2:
        raise UsageError("--cases must be >= 2")
    results = run_suite(arguments.cases, arguments.seed)
    report = suite_report(results, arguments.cases, arguments.seed)
    if arguments.out:
        atomic_write_json(Path(arguments.out) / "verify_report.json", report)
    emit(report)
    if not report["passed"]:
        raise VerificationFailure(f"failed checks: {', '.join(report['failed_checks'])}")
    return 0


def cmd_theory(arguments):
    k, n, d = arguments.k, arguments.n, arguments.d
    records = theory.bound_sweep(arguments.instances, arguments.seed, k, n, d,
                                 arguments.perturbation)
    instance = theory.realizable_instance(arguments.seed, k, n, d, arguments.tasks)
    drift_probe = theory.drift_experiment(instance, "probe", arguments.seed)
    drift_random = theory.drift_experiment(instance, "random", arguments.seed)
    multi_head = theory.multi_head_sweep(max(arguments.instances // 5, 1), arguments.seed,
                                         k, n, d)
    out = Path(arguments.out)
    out.mkdir(parents=True, exist_ok=True)
    report = theory.write_theory_report(out, records, drift_probe, drift_random, multi_head)
    emit({"out": str(out), **report["summary"],
          "max_drift_probe": drift_probe.max_drift,
          "max_drift_random": drift_random.max_drift,
          "multi_head_violations": sum(not check["satisfied"] for check in multi_head)})
    if drift_random.max_drift <= 1e-3:
        logger.warning("random-head control drifted only %.3e", drift_random.max_drift)
    problems = []
    if report["summary"]["violations"]:
        problems.append(f"{report['summary']['violations']} bound violations")
    if not drift_probe.satisfied():
        problems.append(f"probe-initialized drift {drift_probe.max_drift:.3e}")
    if any(not check["satisfied"] for check in multi_head):
        problems.append("multi-head relaxation violated")
    if problems:
        raise TheoryBoundViolation("; ".join(problems))
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="confit", description="Continual fine-tuning lab")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate a synthetic task sequence")
    gen.add_argument("--out", required=True, help="dataset directory to write")
    gen.add_argument("--spec", help="JSON data spec (or a run config with a data section)")
    for name, kind in (("num-tasks", int), ("classes-per-task", int), ("train-per-class", int),
                       ("test-per-class", int), ("channels", int), ("height", int),
                       ("width", int), ("prototype-scale", float), ("noise-scale", float),
                       ("cutoff", int), ("pretext-classes", int), ("seed", int)):
        gen.add_argument(f"--{name}", type=kind, help=f"override the spec's {name}")
    gen.add_argument("--allow-degenerate", action="store_true",
                     help="only warn about tasks a linear classifier cannot learn")
    gen.set_defaults(handler=cmd_gen_data)

    train = commands.add_parser("train", help="train a continual run (or the ablation grid)")
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--config", help="JSON run config")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--bn-mode", choices=sorted(BN_MODES), help="normalization mode")
    train.add_argument("--schedule", choices=sorted(SCHEDULES), help="fine-tuning schedule")
    train.add_argument("--seed", type=int, help="training seed")
    train.add_argument("--grid", action="store_true",
                       help="run {plain, hierarchical} x {shared, task, xconv}")
    train.add_argument("--seeds", help="comma-separated seeds for --grid")
    train.add_argument("--workers", type=int, default=1, help="parallel grid cells")
    train.add_argument("--checkpoint-after", type=int,
                       help="also checkpoint right after this task")
    train.add_argument("--resume", help="checkpoint directory to continue from")
    train.set_defaults(handler=cmd_train)

    evaluation = commands.add_parser("eval", help="accuracy of one task from a checkpoint")
    evaluation.add_argument("--ckpt", required=True, help="checkpoint directory")
    evaluation.add_argument("--data", required=True, help="dataset directory")
    evaluation.add_argument("--task", type=int, required=True, help="task id (1-based)")
    evaluation.add_argument("--moments", choices=list(MOMENTS), default="running",
                            help="normalization moments at test time")
    evaluation.add_argument("--batch-size", type=int, default=256, help="eval batch size")
    evaluation.add_argument("--out", help="also write the result JSON here")
    evaluation.set_defaults(handler=cmd_eval)

    diag = commands.add_parser("diag", help="per-layer mean-shift deltas for task 1")
    diag.add_argument("--ckpt-after-1", required=True, help="checkpoint right after task 1")
    diag.add_argument("--ckpt-final", required=True, help="checkpoint after the last task")
    diag.add_argument("--data", required=True, help="dataset directory")
    diag.add_argument("--out", help="directory for deltas.csv (default: --ckpt-final)")
    diag.add_argument("--batch-size", type=int, default=256, help="probe batch size")
    diag.set_defaults(handler=cmd_diag)

    verify = commands.add_parser("verify", help="run the randomized property suite")
    verify.add_argument("--cases", type=int, default=200, help="mean-invariance cases")
    verify.add_argument("--seed", type=int, default=0, help="suite seed")
    verify.add_argument("--out", help="directory for verify_report.json")
    verify.set_defaults(handler=cmd_verify)

    linear = commands.add_parser("theory", help="linear-model forgetting checks")
    linear.add_argument("--k", type=int, default=3, help="feature dimension")
    linear.add_argument("--n", type=int, default=10, help="samples per task")
    linear.add_argument("--d", type=int, default=50, help="input dimension")
    linear.add_argument("--instances", type=int, default=100, help="bound-sweep instances")
    linear.add_argument("--tasks", type=int, default=5, help="tasks in the drift experiment")
    linear.add_argument("--perturbation", type=float, default=0.02,
                        help="spectral norm of the previous extractor's perturbation")
    linear.add_argument("--seed", type=int, default=0, help="first instance seed")
    linear.add_argument("--out", default=".", help="directory for theory_report.{json,csv}")
    linear.set_defaults(handler=cmd_theory)
    return parser


def main(argv=None) -> int:
    setup_logging()
    try:
        arguments = build_parser().parse_args(argv)
        return arguments.handler(arguments)
    except ConfitError as error:
        print(json.dumps(error.to_json()), file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
