"""Task-incremental training: pretraining, staged fine-tuning, evaluation and whole runs.

A new task gets a fresh head and fresh normalization banks, then trains
through the stages of its schedule:

- ``hierarchical``: head only, then head + every norm affine parameter, then
  everything, with a zero-initialized head;
- ``plain_ft`` / ``stl``: one stage over everything with a small random head
  (``stl`` trains every task on its own copy of the initial model);
- ``linear_probe_only``: the head alone on top of a frozen feature stack, which
  also runs in eval mode so no running statistic moves.

Running statistics update in every stage that trains the features. After
training, the task's banks are frozen and Xconv means are recovered.
"""
import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from config import StageSchedule, TrainConfig
from datagen import TaskData, TaskSequence
from diagnostics import batch_slices, collect_probe, true_moments
from errors import ConfigError, DataError, DuplicateTaskError, MissingBankError, NumericError
from layers import TEMPLATE_TASK, softmax_cross_entropy
from metrics import AccuracyMatrix
from model import ContinualModel, build_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage:
    name: str
    epochs: int
    groups: frozenset


def schedule_stages(schedule: StageSchedule, stage2_trains_norm=True) -> list[Stage]:
    everything = frozenset({"head", "norm", "conv"})
    if schedule.mode in ("plain_ft", "stl"):
        return [Stage("all", schedule.total_epochs, everything)]
    if schedule.mode == "linear_probe_only":
        return [Stage("head", schedule.total_epochs, frozenset({"head"}))]
    head, head_norm, rest = schedule.stage_epochs()
    second = frozenset({"head", "norm"}) if stage2_trains_norm else frozenset({"head"})
    return [Stage("head", head, frozenset({"head"})),
            Stage("head_norm", head_norm, second),
            Stage("all", rest, everything)]


class Sgd:
    """Plain SGD with optional heavy-ball momentum and L2 weight decay."""

    def __init__(self, lr, momentum=0.0, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, targets):
        touched = {}
        for layer, name in targets:
            param = layer.parameters()[name]
            grad = layer.gradients().get(name)
            if grad is None:
                continue
            if self.weight_decay:
                grad = grad + self.weight_decay * param
            if self.momentum:
                key = (layer.name, name)
                velocity = self.velocity.get(key)
                velocity = grad if velocity is None else self.momentum * velocity + grad
                self.velocity[key] = velocity
                grad = velocity
            param -= (self.lr * grad).astype(param.dtype, copy=False)
            touched[id(layer)] = layer
        for layer in touched.values():
            layer.mark_updated()


@dataclass
class TaskLog:
    task_id: int
    stage_epochs: dict[str, int]
    epochs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "stage_epochs": self.stage_epochs, "epochs": self.epochs}


def _batches(model, size, batch_size):
    order = model.rng.permutation(size)
    for start in range(0, size, batch_size):
        yield order[start:start + batch_size]


def _run_stage(model: ContinualModel, task: TaskData, stage: Stage, config: TrainConfig,
               train_features: bool, log: TaskLog):
    x = task.train_x.astype(model.dtype, copy=False)
    y = task.train_y.astype(np.int64)
    targets = model.parameter_targets(stage.groups, task.task_id)
    floor = model.backward_floor(stage.groups)
    optimizer = Sgd(config.lr, config.sgd_momentum, config.weight_decay)
    for epoch in range(stage.epochs):
        losses, correct = [], 0
        for index in _batches(model, len(y), config.batch_size):
            logits = model.forward(x[index], task.task_id, train=True,
                                   train_features=train_features)
            loss, grad = softmax_cross_entropy(logits, y[index])
            if not np.isfinite(loss):
                raise NumericError(f"task {task.task_id}: loss diverged in stage {stage.name}")
            model.backward(grad, task.task_id, floor=floor)
            optimizer.step(targets)
            losses.append(loss * len(index))
            correct += int(np.sum(logits.argmax(axis=1) == y[index]))
        entry = {"stage": stage.name, "epoch": epoch + 1,
                 "loss": float(sum(losses) / len(y)), "train_accuracy": correct / len(y)}
        log.epochs.append(entry)
        logger.info("task %d stage %s epoch %d/%d: loss %.4f, train acc %.3f", task.task_id,
                    stage.name, epoch + 1, stage.epochs, entry["loss"], entry["train_accuracy"])


def train_task(model: ContinualModel, task: TaskData, config: TrainConfig,
               schedule: StageSchedule | None = None) -> TaskLog:
    schedule = schedule or config.schedule
    if task.task_id in model.heads:
        raise DuplicateTaskError(f"task {task.task_id} is already trained")
    if len(task.train_y) == 0:
        raise DataError(f"task {task.task_id} has no training samples")
    model.add_task(task.task_id, task.num_classes, schedule.head_init)
    train_features = schedule.mode != "linear_probe_only"
    if not train_features:
        model.recover_all()
    stages = schedule_stages(schedule, config.stage2_trains_norm)
    log = TaskLog(task.task_id, {stage.name: stage.epochs for stage in stages})
    for stage in stages:
        _run_stage(model, task, stage, config, train_features, log)
    model.freeze_task(task.task_id)
    model.recover_all()
    return log


def pretrain(model: ContinualModel, pretext: TaskData, config: TrainConfig) -> TaskLog | None:
    """Train every parameter on the pretext task, then drop its head.

    The normalization template records keep what they learned here; every
    later task's banks start as copies of them.
    """
    if config.pretrain_epochs == 0:
        return None
    if pretext.task_id != TEMPLATE_TASK:
        raise ConfigError("the pretext task must use task id 0")
    schedule = StageSchedule(total_epochs=config.pretrain_epochs, mode="plain_ft")
    model.add_task(TEMPLATE_TASK, pretext.num_classes, schedule.head_init)
    log = TaskLog(TEMPLATE_TASK, {"all": config.pretrain_epochs})
    _run_stage(model, pretext, schedule_stages(schedule)[0], config, True, log)
    model.drop_task(TEMPLATE_TASK)
    return log


def initial_model(sequence: TaskSequence, config: TrainConfig) -> ContinualModel:
    """Seeded model for a run, pretrained on the pretext task when there is one."""
    channels, height, width = config.model.input_shape
    sample = sequence.tasks[0].train_x
    if sample.shape[1:] != (channels, height, width):
        raise ConfigError(f"model input_shape {config.model.input_shape} does not match data "
                          f"{tuple(sample.shape[1:])}")
    model = build_model(config.model, config.norm_mode, np.random.default_rng(config.seed),
                        config.dtype, config.momentum, config.stab_eps, config.recovery)
    if sequence.pretext is not None and config.pretrain_epochs:
        pretrain(model, sequence.pretext, config)
    return model


# -- evaluation -------------------------------------------------------------------

@contextmanager
def transductive_moments(model: ContinualModel, task_id, x, moment_mode, batch_size=256):
    """Temporarily normalize with the data's own moments, layer by layer from the input up."""
    if moment_mode == "running":
        yield
        return
    use_mean = moment_mode in ("t_mean", "t_both")
    use_var = moment_mode in ("t_var", "t_both")
    norms = model.norm_layers()
    try:
        for norm in norms:
            mean, var = true_moments(model, x, model.layer_index(norm), task_id, batch_size)
            norm.override = (mean if use_mean else None, var if use_var else None)
        yield
    finally:
        for norm in norms:
            norm.override = None


def evaluate(model: ContinualModel, task_id, x, y, moment_mode="running", batch_size=256):
    """Accuracy of ``task_id``'s own head on (x, y)."""
    if task_id not in model.heads:
        raise MissingBankError(f"task {task_id} has not been trained")
    if len(y) == 0:
        raise DataError(f"task {task_id}: empty test set")
    if moment_mode not in ("running", "t_mean", "t_var", "t_both"):
        raise ConfigError(f"unknown moment mode {moment_mode!r}")
    model.recover_all()
    x = x.astype(model.dtype, copy=False)
    labels = np.asarray(y).astype(np.int64)
    correct = 0
    with transductive_moments(model, task_id, x, moment_mode, batch_size):
        for part in batch_slices(len(labels), batch_size):
            logits = model.forward(x[part], task_id, train=False)
            correct += int(np.sum(logits.argmax(axis=1) == labels[part]))
    return correct / len(labels)


# -- whole runs -------------------------------------------------------------------

@dataclass
class RunResult:
    matrix: AccuracyMatrix
    logs: list[TaskLog]
    model: ContinualModel
    probes: dict = field(default_factory=dict)
    learners: dict = field(default_factory=dict)


def continual_run(sequence: TaskSequence, config: TrainConfig, model=None, matrix=None,
                  probes=None, on_task_end=None) -> RunResult:
    """Learn the tasks in order, evaluating every learned task after each one.

    Passing a ``model`` (with the ``matrix`` and ``probes`` so far) resumes a
    run: tasks the model already has heads for are skipped.
    ``on_task_end(j, result)`` runs after task j's evaluations.
    """
    tasks = sequence.tasks
    if not tasks:
        raise DataError("a run needs at least one task")
    if [task.task_id for task in tasks] != list(range(1, len(tasks) + 1)):
        raise DataError("task ids must run 1..T in order")
    stl = config.schedule.mode == "stl"
    if stl and model is not None:
        raise ConfigError("single-task runs cannot resume from a checkpoint")
    model = model or initial_model(sequence, config)
    matrix = matrix or AccuracyMatrix(len(tasks))
    result = RunResult(matrix, [], model, dict(probes or {}))
    template = copy.deepcopy(model) if stl else None
    for j, task in enumerate(tasks, start=1):
        if task.task_id in model.heads:
            continue
        if stl:
            learner = copy.deepcopy(template)
            result.logs.append(train_task(learner, task, config))
            result.learners[task.task_id] = learner
        else:
            result.logs.append(train_task(model, task, config))
        for earlier in tasks[:j]:
            evaluator = result.learners[earlier.task_id] if stl else model
            accuracy = evaluate(evaluator, earlier.task_id, earlier.test_x, earlier.test_y,
                                config.moment_mode, config.eval_batch_size)
            matrix.record(earlier.task_id, j, accuracy)
        logger.info("after task %d: %s", j, ", ".join(
            f"a[{i},{j}]={matrix.get(i, j):.3f}" for i in range(1, j + 1)))
        first_model = result.learners[1] if stl else model
        if j == 1:
            result.probes["first"] = collect_probe(first_model, tasks[0].test_x, 1,
                                                   config.eval_batch_size)
        if j == len(tasks):
            result.probes["final"] = collect_probe(first_model, tasks[0].test_x, 1,
                                                   config.eval_batch_size)
        if on_task_end is not None:
            on_task_end(j, result)
    return result
