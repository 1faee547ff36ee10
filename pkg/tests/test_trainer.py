"""Staged fine-tuning, evaluation and whole continual runs on tiny data."""
import numpy as np
import pytest

from checkpoint import load_checkpoint, save_checkpoint
from config import ModelConfig, StageSchedule
from conftest import tiny_config
from diagnostics import true_moments
from errors import ConfigError, DataError, DuplicateTaskError, MissingBankError
from layers import Linear
from metrics import AccuracyMatrix, fgt
from trainer import (
    Sgd,
    continual_run,
    evaluate,
    initial_model,
    schedule_stages,
    train_task,
)


def conv_weights(model):
    return [conv.weight.copy() for conv in model.conv_layers()]


class TestSchedule:
    def test_hierarchical_stages(self):
        stages = schedule_stages(StageSchedule(total_epochs=10))
        assert [(stage.name, stage.epochs) for stage in stages] == [
            ("head", 2), ("head_norm", 3), ("all", 5)]
        assert stages[1].groups == {"head", "norm"}

    def test_floors_give_the_remainder_to_the_last_stage(self):
        assert StageSchedule(total_epochs=7).stage_epochs() == (1, 2, 4)
        assert sum(StageSchedule(total_epochs=1).stage_epochs()) == 1

    def test_second_stage_can_skip_norm(self):
        stages = schedule_stages(StageSchedule(total_epochs=10), stage2_trains_norm=False)
        assert stages[1].groups == {"head"}

    @pytest.mark.parametrize("mode,groups", [
        ("plain_ft", {"head", "norm", "conv"}),
        ("stl", {"head", "norm", "conv"}),
        ("linear_probe_only", {"head"}),
    ])
    def test_single_stage_modes(self, mode, groups):
        (stage,) = schedule_stages(StageSchedule(total_epochs=4, mode=mode))
        assert stage.epochs == 4 and stage.groups == groups

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            StageSchedule(fractions=(0.5, 0.5, 0.5))


def test_sgd_step_and_weight_decay(rng):
    head = Linear("head", rng.standard_normal((2, 3)), np.zeros(2))
    start = head.weight.copy()
    head.forward(rng.standard_normal((4, 3)), train=True)
    head.backward(rng.standard_normal((4, 2)))
    grad = head.gradients()["weight"].copy()
    Sgd(0.1, weight_decay=0.01).step([(head, "weight")])
    assert np.allclose(head.weight, start - 0.1 * (grad + 0.01 * start))


def test_train_task_rejects_a_known_task(sequence, config):
    model = initial_model(sequence, config)
    train_task(model, sequence.tasks[0], config)
    with pytest.raises(DuplicateTaskError):
        train_task(model, sequence.tasks[0], config)


def test_training_log_follows_stages(sequence, config):
    model = initial_model(sequence, config)
    log = train_task(model, sequence.tasks[0], config)
    assert log.stage_epochs == {"head": 1, "head_norm": 1, "all": 3}
    assert [entry["stage"] for entry in log.epochs] == ["head", "head_norm", "all", "all", "all"]
    assert all(np.isfinite(entry["loss"]) for entry in log.epochs)


def test_input_shape_must_match_data(sequence):
    with pytest.raises(ConfigError):
        initial_model(sequence, tiny_config(model=ModelConfig()))


class TestEvaluate:
    def test_unknown_task(self, sequence, config):
        model = initial_model(sequence, config)
        task = sequence.tasks[0]
        with pytest.raises(MissingBankError):
            evaluate(model, 1, task.test_x, task.test_y)

    def test_empty_test_set(self, sequence, config):
        model = initial_model(sequence, config)
        task = sequence.tasks[0]
        train_task(model, task, config)
        with pytest.raises(DataError):
            evaluate(model, 1, task.test_x[:0], task.test_y[:0])

    @pytest.mark.parametrize("moments", ["t_mean", "t_var", "t_both"])
    def test_transductive_eval_restores_stored_moments(self, sequence, config, moments):
        model = initial_model(sequence, config)
        task = sequence.tasks[0]
        train_task(model, task, config)
        before = evaluate(model, 1, task.test_x, task.test_y)
        accuracy = evaluate(model, 1, task.test_x, task.test_y, moments, batch_size=5)
        assert 0.0 <= accuracy <= 1.0
        assert all(norm.override is None for norm in model.norm_layers())
        assert evaluate(model, 1, task.test_x, task.test_y) == before


def bank_arrays(model, task_id):
    """Copies of everything task ``task_id`` owns: its head and its normalization banks."""
    head = model.heads[task_id]
    arrays = [head.weight.copy(), head.bias.copy()]
    for norm in model.norm_layers():
        record = norm.record(task_id)
        arrays += [record.gamma.copy(), record.beta.copy(), record.running_var.copy()]
        if hasattr(record, "pre_means"):
            arrays += [mean.copy() for mean in record.pre_means]
        else:
            arrays.append(record.running_mean.copy())
    return arrays


class TestIsolation:
    @pytest.mark.parametrize("norm_mode", ["task_bn", "xconv_bn"])
    def test_later_task_leaves_earlier_banks_untouched(self, sequence, norm_mode):
        config = tiny_config(norm_mode=norm_mode)
        model = initial_model(sequence, config)
        train_task(model, sequence.tasks[0], config)
        before = bank_arrays(model, 1)
        weights = conv_weights(model)
        train_task(model, sequence.tasks[1], config)
        assert not all(np.array_equal(a, b) for a, b in zip(weights, conv_weights(model)))
        after = bank_arrays(model, 1)
        assert len(after) == len(before)
        assert all(np.array_equal(a, b) for a, b in zip(before, after))

    @pytest.mark.parametrize("norm_mode", ["task_bn", "xconv_bn"])
    def test_head_stage_moves_only_the_head(self, sequence, norm_mode):
        config = tiny_config(norm_mode=norm_mode)
        model = initial_model(sequence, config)
        weights = conv_weights(model)
        biases = [conv.bias.copy() for conv in model.conv_layers() if conv.bias is not None]
        template = [(norm.record(0).gamma.copy(), norm.record(0).beta.copy())
                    for norm in model.norm_layers()]
        head_only = StageSchedule(total_epochs=2, fractions=(1.0, 0.0, 0.0))
        log = train_task(model, sequence.tasks[0], config, head_only)
        assert log.stage_epochs == {"head": 2, "head_norm": 0, "all": 0}
        assert all(np.array_equal(a, b) for a, b in zip(weights, conv_weights(model)))
        assert all(np.array_equal(bias, conv.bias) for bias, conv in
                   zip(biases, [conv for conv in model.conv_layers() if conv.bias is not None]))
        for norm, (gamma, beta) in zip(model.norm_layers(), template):
            assert np.array_equal(norm.record(1).gamma, gamma)
            assert np.array_equal(norm.record(1).beta, beta)
        assert np.any(model.heads[1].weight != 0.0)

    @pytest.mark.parametrize("norm_mode", ["task_bn", "xconv_bn"])
    def test_transductive_moments_match_stored_moments_on_train_data(self, sequence,
                                                                    norm_mode):
        """Head-only full-batch training at momentum 1 leaves the train set's exact moments."""
        config = tiny_config(norm_mode=norm_mode, momentum=1.0, batch_size=64)
        model = initial_model(sequence, config)
        task = sequence.tasks[0]
        train_task(model, task, config, StageSchedule(total_epochs=1, fractions=(1.0, 0.0, 0.0)))
        for norm in model.norm_layers():
            mean, var = true_moments(model, task.train_x, model.layer_index(norm), 1)
            assert np.allclose(mean, norm.stored_mean(1), atol=1e-9)
            assert np.allclose(var, norm.record(1).running_var, atol=1e-9)
        running = evaluate(model, 1, task.train_x, task.train_y)
        assert evaluate(model, 1, task.train_x, task.train_y, "t_both") == running


@pytest.mark.parametrize("norm_mode", ["shared_bn", "task_bn", "xconv_bn"])
def test_same_seed_same_matrix(sequence, norm_mode):
    config = tiny_config(norm_mode=norm_mode)
    assert continual_run(sequence, config).matrix == continual_run(sequence, config).matrix


def test_run_fills_matrix_and_probes(sequence, config):
    result = continual_run(sequence, config)
    assert len(result.matrix.to_rows()) == 6
    assert len(result.logs) == 3
    assert set(result.probes) == {"first", "final"}
    assert result.model.trained_tasks() == [1, 2, 3]


@pytest.mark.parametrize("norm_mode", ["task_bn", "xconv_bn"])
def test_linear_probe_only_never_forgets(sequence, norm_mode):
    config = tiny_config(norm_mode=norm_mode,
                         schedule=StageSchedule(total_epochs=3, mode="linear_probe_only"))
    model = initial_model(sequence, config)
    before = conv_weights(model)
    result = continual_run(sequence, config, model=model)
    assert fgt(result.matrix) == 0.0
    assert all(np.array_equal(a, b) for a, b in zip(before, conv_weights(result.model)))


def test_stl_trains_separate_learners(sequence):
    config = tiny_config(schedule=StageSchedule(total_epochs=2, mode="stl"))
    model = initial_model(sequence, config)
    before = conv_weights(model)
    result = continual_run(sequence, config, model=None)
    assert sorted(result.learners) == [1, 2, 3]
    assert all(learner.trained_tasks() == [task_id]
               for task_id, learner in result.learners.items())
    assert all(np.array_equal(a, b) for a, b in zip(before, conv_weights(result.model)))


def test_stl_cannot_resume(sequence):
    config = tiny_config(schedule=StageSchedule(total_epochs=2, mode="stl"))
    with pytest.raises(ConfigError):
        continual_run(sequence, config, model=initial_model(sequence, config))


def test_task_ids_must_be_in_order(sequence, config):
    sequence.tasks.reverse()
    with pytest.raises(DataError):
        continual_run(sequence, config)


@pytest.mark.parametrize("norm_mode", ["task_bn", "xconv_bn"])
def test_resume_from_checkpoint_matches_uninterrupted_run(tmp_path, sequence, norm_mode):
    config = tiny_config(norm_mode=norm_mode)
    saved = {}

    def save_after_second(j, result):
        if j == 2:
            save_checkpoint(result.model, tmp_path / "after2")
            saved["rows"] = result.matrix.to_rows()
            saved["probes"] = dict(result.probes)

    full = continual_run(sequence, config, on_task_end=save_after_second)
    resumed = continual_run(sequence, config, model=load_checkpoint(tmp_path / "after2"),
                            matrix=AccuracyMatrix.from_rows(3, saved["rows"]),
                            probes=saved["probes"])
    assert len(resumed.logs) == 1
    assert resumed.matrix == full.matrix
    for a, b in zip(conv_weights(full.model), conv_weights(resumed.model)):
        assert np.array_equal(a, b)
    for a, b in zip(full.probes["final"].true_means, resumed.probes["final"].true_means):
        assert np.array_equal(a, b)
