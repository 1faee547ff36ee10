"""Synthetic task sequences and their on-disk format.

Every class is a smooth random prototype image (a sum of low-frequency
cosines) and every sample is its prototype plus i.i.d. Gaussian noise. Each
task, and the optional pretext task used for pretraining, draws from its own
child of the spec's seed sequence, so generation is a pure function of the spec.

On disk a dataset is a directory with ``manifest.json`` and CFT1 tensors named
``task<t>.{train,test}.{x,y}.cft`` (``pretext.*`` for the pretext task); labels
are stored as integral f64 values.
"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from config import TaskSequenceSpec
from errors import ChecksumError, DataError, VersionMismatchError
from tensor_io import decode_tensor, read_tensor_bytes, sha256_hex, write_tensor
from utils import atomic_write_json, read_json, require_dir

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PRETEXT_TASK = 0
SPLITS = ("train", "test")


@dataclass
class TaskData:
    task_id: int
    num_classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    prototypes: np.ndarray | None = None

    @property
    def prefix(self) -> str:
        return "pretext" if self.task_id == PRETEXT_TASK else f"task{self.task_id}"


@dataclass
class TaskSequence:
    spec: TaskSequenceSpec
    tasks: list[TaskData]
    pretext: TaskData | None = None

    def task(self, task_id: int) -> TaskData:
        for task in self.tasks:
            if task.task_id == task_id:
                return task
        raise DataError(f"dataset has no task {task_id}")


def smooth_prototype(rng, channels, height, width, cutoff, scale) -> np.ndarray:
    """Random field with spatial frequencies up to ``cutoff``, unit std per channel times scale."""
    rows = np.arange(height)[:, None] / height
    cols = np.arange(width)[None, :] / width
    field = np.zeros((channels, height, width))
    for u in range(cutoff + 1):
        for v in range(cutoff + 1):
            amplitude = rng.standard_normal(channels) / (1.0 + u + v)
            phase = rng.uniform(0.0, 2.0 * np.pi, channels)
            wave = np.cos(2.0 * np.pi * (u * rows + v * cols)[None] + phase[:, None, None])
            field += amplitude[:, None, None] * wave
    std = field.reshape(channels, -1).std(axis=1)
    return scale * field / np.where(std > 0, std, 1.0)[:, None, None]


def _draw_split(rng, prototypes, per_class, noise_scale):
    num_classes = prototypes.shape[0]
    labels = np.repeat(np.arange(num_classes), per_class)
    order = rng.permutation(labels.size)
    labels = labels[order]
    noise = rng.standard_normal((labels.size,) + prototypes.shape[1:])
    return prototypes[labels] + noise_scale * noise, labels.astype(np.float64)


def _make_task(task_id, num_classes, spec: TaskSequenceSpec, rng) -> TaskData:
    prototypes = np.stack([
        smooth_prototype(rng, spec.channels, spec.height, spec.width, spec.cutoff,
                         spec.prototype_scale)
        for _ in range(num_classes)
    ])
    train_x, train_y = _draw_split(rng, prototypes, spec.train_per_class, spec.noise_scale)
    test_x, test_y = _draw_split(rng, prototypes, spec.test_per_class, spec.noise_scale)
    return TaskData(task_id, num_classes, train_x, train_y, test_x, test_y, prototypes)


def generate(spec: TaskSequenceSpec) -> TaskSequence:
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_tasks + 1)
    tasks = [
        _make_task(index + 1, spec.classes_per_task, spec, np.random.default_rng(children[index]))
        for index in range(spec.num_tasks)
    ]
    pretext = None
    if spec.pretext_classes:
        pretext = _make_task(PRETEXT_TASK, spec.pretext_classes, spec,
                             np.random.default_rng(children[-1]))
    logger.info("generated %d tasks x %d classes (%dx%dx%d), pretext classes: %d",
                spec.num_tasks, spec.classes_per_task, spec.channels, spec.height, spec.width,
                spec.pretext_classes)
    return TaskSequence(spec, tasks, pretext)


def probe_accuracy(task: TaskData, ridge: float = 1e-3) -> float:
    """Test accuracy of a ridge least-squares linear classifier on raw pixels."""
    def design(x):
        flat = x.reshape(x.shape[0], -1)
        return np.hstack([flat, np.ones((flat.shape[0], 1))])

    features = design(task.train_x)
    targets = np.eye(task.num_classes)[task.train_y.astype(np.int64)]
    gram = features.T @ features + ridge * np.eye(features.shape[1])
    weights = np.linalg.solve(gram, features.T @ targets)
    predictions = (design(task.test_x) @ weights).argmax(axis=1)
    return float(np.mean(predictions == task.test_y.astype(np.int64)))


def check_learnability(sequence: TaskSequence, factor: float = 3.0,
                       allow_degenerate: bool = False) -> dict[int, float]:
    """Probe every task; a task below ``factor`` times chance is degenerate.

    With few classes the bar is capped halfway between chance and 1, since
    ``factor`` times chance can exceed 1. Degenerate tasks raise ``DataError``
    unless ``allow_degenerate`` is set, in which case they are only logged.
    """
    scores = {}
    degenerate = []
    for task in sequence.tasks:
        scores[task.task_id] = probe_accuracy(task)
        chance = 1.0 / task.num_classes
        if scores[task.task_id] < min(factor * chance, (1.0 + chance) / 2.0):
            logger.warning("task %d looks degenerate: linear probe accuracy %.3f (chance %.3f)",
                           task.task_id, scores[task.task_id], chance)
            degenerate.append(task.task_id)
    if degenerate and not allow_degenerate:
        raise DataError(f"degenerate tasks {degenerate}: linear probe accuracy below the "
                        f"{factor:g}x chance bar; lower noise_scale or pass --allow-degenerate")
    return scores


# -- files ------------------------------------------------------------------------

def _task_files(task: TaskData) -> dict[str, np.ndarray]:
    files = {}
    for split in SPLITS:
        files[f"{task.prefix}.{split}.x.cft"] = getattr(task, f"{split}_x")
        files[f"{task.prefix}.{split}.y.cft"] = getattr(task, f"{split}_y")
    return files


def save_dataset(sequence: TaskSequence, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    checksums = {}
    entries = []
    for task in sequence.tasks + ([sequence.pretext] if sequence.pretext else []):
        for name, array in _task_files(task).items():
            checksums[name] = write_tensor(directory / name, np.asarray(array, dtype=np.float64))
        entries.append({
            "task_id": task.task_id,
            "num_classes": task.num_classes,
            "train_shape": list(task.train_x.shape),
            "test_shape": list(task.test_x.shape),
        })
    atomic_write_json(directory / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "seed": sequence.spec.seed,
        "spec": asdict(sequence.spec),
        "tasks": [entry for entry in entries if entry["task_id"] != PRETEXT_TASK],
        "pretext": next((entry for entry in entries if entry["task_id"] == PRETEXT_TASK), None),
        "files": checksums,
    })
    logger.info("saved dataset with %d tasks to %s", len(sequence.tasks), directory)
    return directory


def _load_file(directory, name, checksums) -> np.ndarray:
    if name not in checksums:
        raise DataError(f"manifest lists no checksum for {name}")
    data = read_tensor_bytes(directory / name)
    array = decode_tensor(data, source=name)
    if sha256_hex(data) != checksums[name]:
        raise ChecksumError(f"{name}: checksum does not match the manifest")
    return array


def _load_task(directory, entry, checksums) -> TaskData:
    task = TaskData(entry["task_id"], entry["num_classes"], None, None, None, None)
    for name in _task_files(task):
        _, split, axis, _ = name.rsplit(".", 3)
        setattr(task, f"{split}_{axis}", _load_file(directory, name, checksums))
    for split in SPLITS:
        labels = getattr(task, f"{split}_y")
        if labels.size and (labels.min() < 0 or labels.max() >= task.num_classes
                            or not np.array_equal(labels, np.round(labels))):
            raise DataError(f"{task.prefix}.{split}: labels must be integers in "
                            f"[0, {task.num_classes})")
    return task


def load_dataset(directory) -> TaskSequence:
    directory = require_dir(directory, "dataset directory")
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"dataset format {manifest.get('format_version')} != supported {FORMAT_VERSION}")
    checksums = manifest["files"]
    spec = TaskSequenceSpec(**manifest["spec"])
    tasks = [_load_task(directory, entry, checksums) for entry in manifest["tasks"]]
    pretext = None
    if manifest["pretext"]:
        pretext = _load_task(directory, manifest["pretext"], checksums)
    return TaskSequence(spec, tasks, pretext)


def dataset_fingerprint(directory) -> str:
    """sha256 over the manifest's format version, spec and per-file checksums."""
    directory = require_dir(directory, "dataset directory")
    manifest = read_json(directory / "manifest.json")
    identity = {name: manifest.get(name) for name in ("format_version", "spec", "files")}
    canonical = json.dumps(identity, sort_keys=True, separators=(",", ":"))
    return sha256_hex(canonical.encode("utf-8"))
