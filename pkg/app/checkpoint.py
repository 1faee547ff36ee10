"""Checkpoint directories: ``manifest.json`` plus one CFT1 file per tensor.

Tensor files are named ``<layer>.<param>[.task<t>][.phase<p>].cft``; ``task0``
is the normalization template every task bank is copied from. Recovered Xconv
means are a cache and are recomputed on load, never stored. The manifest
carries the topology, the task list, the run RNG state, a free-form ``extra``
section (config echo, accuracy rows) and a sha256 for every tensor file.
"""
import logging
from pathlib import Path

import numpy as np

from errors import ChecksumError, CorruptFileError, VersionMismatchError
from layers import TEMPLATE_TASK, BatchNormState, Linear, XconvBatchNorm, XconvRecord
from model import ContinualModel, build_model, model_config_from_dict
from tensor_io import decode_tensor, read_tensor_bytes, sha256_hex, write_tensor
from utils import atomic_write_json, read_json, require_dir

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")
XCONV_FIELDS = ("gamma", "beta", "running_var")


def tensor_name(layer, param, task=None, phase=None) -> str:
    name = f"{layer}.{param}"
    if task is not None:
        name += f".task{task}"
    if phase is not None:
        name += f".phase{phase}"
    return name + ".cft"


def _model_tensors(model: ContinualModel):
    """Yield (file name, array) for every persisted tensor, in a fixed order."""
    for conv in model.conv_layers():
        for param, array in conv.parameters().items():
            yield tensor_name(conv.name, param), array
    for norm in model.norm_layers():
        for key in sorted(norm.records):
            record = norm.records[key]
            task = key if norm.task_specific else None
            if isinstance(norm, XconvBatchNorm):
                for param in XCONV_FIELDS:
                    yield tensor_name(norm.name, param, task), getattr(record, param)
                for phase, mean in enumerate(record.pre_means):
                    yield tensor_name(norm.name, "pre_mean", task, phase), mean
            else:
                for param in BN_FIELDS:
                    yield tensor_name(norm.name, param, task), getattr(record, param)
    for task_id in sorted(model.heads):
        head = model.heads[task_id]
        for param, array in head.parameters().items():
            yield tensor_name("head", param, task_id), array


def _norm_manifest(model: ContinualModel) -> dict:
    entries = {}
    for norm in model.norm_layers():
        entries[norm.name] = [
            {
                "task": key,
                "frozen": bool(record.frozen),
                "input_spatial": (list(record.input_spatial)
                                  if getattr(record, "input_spatial", None) else None),
            }
            for key, record in sorted(norm.records.items())
        ]
    return entries


def save_checkpoint(model: ContinualModel, directory, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, array in _model_tensors(model):
        files[name] = write_tensor(directory / name, array)
    atomic_write_json(directory / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "topology": model.describe(),
        "tasks": [
            {"task_id": task_id, "num_classes": int(head.weight.shape[0]),
             "frozen": bool(head.frozen)}
            for task_id, head in sorted(model.heads.items())
        ],
        "current_task": model.current_task,
        "norm_records": _norm_manifest(model),
        "rng_state": model.rng.bit_generator.state,
        "extra": extra or {},
        "files": files,
    })
    logger.info("saved checkpoint with tasks %s to %s", model.trained_tasks(), directory)
    return directory


def read_manifest(directory) -> dict:
    directory = require_dir(directory, "checkpoint directory")
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format {manifest.get('format_version')} != supported {FORMAT_VERSION}")
    return manifest


def _loader(directory, files, dtype):
    def load(name):
        if name not in files:
            raise CorruptFileError(f"manifest lists no checksum for {name}")
        data = read_tensor_bytes(directory / name)
        array = decode_tensor(data, source=name)
        if sha256_hex(data) != files[name]:
            raise ChecksumError(f"{name}: checksum does not match the manifest")
        if array.dtype != dtype:
            raise CorruptFileError(f"{name}: dtype {array.dtype} != model dtype {dtype}")
        return array
    return load


def _load_norm(norm, entries, load):
    for entry in entries:
        key = entry["task"]
        task = key if norm.task_specific else None
        if isinstance(norm, XconvBatchNorm):
            template = norm.records[TEMPLATE_TASK]
            record = XconvRecord(
                *(load(tensor_name(norm.name, param, task)) for param in XCONV_FIELDS),
                pre_means=[load(tensor_name(norm.name, "pre_mean", task, phase))
                           for phase in range(len(template.pre_means))],
                input_spatial=tuple(entry["input_spatial"]) if entry["input_spatial"] else None,
            )
        else:
            record = BatchNormState(
                *(load(tensor_name(norm.name, param, task)) for param in BN_FIELDS),
                momentum=norm.momentum, stab_eps=norm.stab_eps)
        record.frozen = entry["frozen"]
        norm.records[key] = record


def load_checkpoint(directory) -> ContinualModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    topology = manifest["topology"]
    dtype = np.dtype(topology["dtype"])
    model = build_model(model_config_from_dict(topology["model"]), topology["norm_mode"],
                        np.random.default_rng(0), dtype, topology["momentum"],
                        topology["stab_eps"], topology["recovery"])
    load = _loader(directory, manifest["files"], dtype)
    for conv in model.conv_layers():
        conv.weight = load(tensor_name(conv.name, "weight"))
        if conv.spec.has_bias:
            conv.bias = load(tensor_name(conv.name, "bias"))
    for norm in model.norm_layers():
        _load_norm(norm, manifest["norm_records"][norm.name], load)
    for entry in manifest["tasks"]:
        task_id = entry["task_id"]
        head = Linear(f"head{task_id}", load(tensor_name("head", "weight", task_id)),
                      load(tensor_name("head", "bias", task_id)))
        head.frozen = entry["frozen"]
        model.heads[task_id] = head
    model.current_task = manifest["current_task"]
    model.rng = np.random.Generator(np.random.PCG64())
    model.rng.bit_generator.state = manifest["rng_state"]
    model.recover_all()
    logger.info("loaded checkpoint with tasks %s from %s", model.trained_tasks(), directory)
    return model
