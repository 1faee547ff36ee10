import json

import numpy as np
import pytest

from checkpoint import load_checkpoint, read_manifest, save_checkpoint, tensor_name
from conftest import tiny_config
from errors import ChecksumError, MissingPathError, VersionMismatchError
from trainer import evaluate, initial_model, train_task


@pytest.fixture(params=["shared_bn", "task_bn", "xconv_bn"])
def trained(request, sequence):
    config = tiny_config(norm_mode=request.param)
    model = initial_model(sequence, config)
    train_task(model, sequence.tasks[0], config)
    return model


def test_tensor_names():
    assert tensor_name("norm1", "pre_mean", 2, 3) == "norm1.pre_mean.task2.phase3.cft"
    assert tensor_name("conv0", "weight") == "conv0.weight.cft"


def test_save_load_save_is_byte_identical(tmp_path, trained):
    save_checkpoint(trained, tmp_path / "a", extra={"note": "x"})
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b", extra={"note": "x"})
    first = json.loads((tmp_path / "a" / "manifest.json").read_text())
    second = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert first == second
    for name in first["files"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_loaded_model_evaluates_identically(tmp_path, sequence, trained):
    save_checkpoint(trained, tmp_path)
    loaded = load_checkpoint(tmp_path)
    task = sequence.tasks[0]
    assert evaluate(loaded, 1, task.test_x, task.test_y) == evaluate(
        trained, 1, task.test_x, task.test_y)
    assert loaded.heads[1].frozen
    assert all(norm.record(1).frozen for norm in loaded.norm_layers() if norm.task_specific)


def test_rng_state_is_restored(tmp_path, trained):
    save_checkpoint(trained, tmp_path)
    loaded = load_checkpoint(tmp_path)
    assert np.array_equal(loaded.rng.permutation(20), trained.rng.permutation(20))


def test_recovered_means_are_not_stored(tmp_path, sequence):
    config = tiny_config(norm_mode="xconv_bn")
    model = initial_model(sequence, config)
    train_task(model, sequence.tasks[0], config)
    save_checkpoint(model, tmp_path)
    files = read_manifest(tmp_path)["files"]
    assert not any("running_mean" in name for name in files)
    assert "norm1.pre_mean.task1.phase3.cft" in files


def test_tampered_tensor(tmp_path, trained):
    save_checkpoint(trained, tmp_path)
    path = tmp_path / "head.weight.task1.cft"
    data = bytearray(path.read_bytes())
    data[-1] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path)


def test_version_mismatch(tmp_path, trained):
    save_checkpoint(trained, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["format_version"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingPathError):
        load_checkpoint(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(MissingPathError):
        load_checkpoint(tmp_path / "absent")
