"""Representational-shift diagnostics for the first task.

A probe records, for every normalization layer, the true mean of task 1's
test data at that layer's input and the mean the layer would normalize task 1
with. Comparing the probe taken right after task 1 with the one taken after
the last task gives, per layer:

- ``delta0``: stored vs true mean right after task 1;
- ``delta1``: how far task 1's true mean moved between the two probes;
- ``delta2``: stored vs true mean after the last task.
"""
import logging
from dataclasses import dataclass

import numpy as np

from errors import DataError, DiagnosticError
from utils import write_csv

logger = logging.getLogger(__name__)

DELTA_HEADER = ["layer", "delta0", "delta1", "delta2"]


def batch_slices(size, batch_size):
    for start in range(0, size, batch_size):
        yield slice(start, start + batch_size)


def true_moments(model, x, layer_index, task_id, batch_size=256):
    """Exact per-channel mean and variance of the input of ``model.layers[layer_index]``.

    Two streaming passes of eval-mode forwards: sums for the mean, then summed
    squared deviations from it.
    """
    if len(x) == 0:
        raise DataError("moments need at least one sample")
    x = x.astype(model.dtype, copy=False)
    total, count = 0.0, 0
    for part in batch_slices(len(x), batch_size):
        act = model.features(x[part], task_id, stop=layer_index)
        total = total + act.sum(axis=(0, 2, 3))
        count += act.shape[0] * act.shape[2] * act.shape[3]
    mean = total / count
    squares = 0.0
    for part in batch_slices(len(x), batch_size):
        act = model.features(x[part], task_id, stop=layer_index)
        squares = squares + ((act - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
    return mean, squares / count


@dataclass
class LayerMeanProbe:
    layers: list[str]
    true_means: list[np.ndarray]
    stored_means: list[np.ndarray]

    def __post_init__(self):
        if not len(self.layers) == len(self.true_means) == len(self.stored_means):
            raise DiagnosticError("probe layer lists differ in length")
        for name, true, stored in zip(self.layers, self.true_means, self.stored_means):
            if true.shape != stored.shape:
                raise DiagnosticError(f"{name}: true and stored means differ in width")


def collect_probe(model, test_x, task_id=1, batch_size=256) -> LayerMeanProbe:
    model.recover_all()
    names, true_means, stored_means = [], [], []
    for norm in model.norm_layers():
        mean, _ = true_moments(model, test_x, model.layer_index(norm), task_id, batch_size)
        names.append(norm.name)
        true_means.append(mean)
        stored_means.append(np.array(norm.stored_mean(task_id), copy=True))
    logger.debug("probed task %d at %d norm layers", task_id, len(names))
    return LayerMeanProbe(names, true_means, stored_means)


def probe_to_dict(probe: LayerMeanProbe) -> dict:
    return {
        "layers": list(probe.layers),
        "true_means": [mean.tolist() for mean in probe.true_means],
        "stored_means": [mean.tolist() for mean in probe.stored_means],
    }


def probe_from_dict(document: dict) -> LayerMeanProbe:
    try:
        return LayerMeanProbe(
            list(document["layers"]),
            [np.asarray(mean, dtype=np.float64) for mean in document["true_means"]],
            [np.asarray(mean, dtype=np.float64) for mean in document["stored_means"]],
        )
    except (KeyError, TypeError) as error:
        raise DiagnosticError(f"malformed probe record: {error}") from error


@dataclass(frozen=True)
class LayerDelta:
    layer: str
    delta0: float
    delta1: float
    delta2: float


def delta_diagnostics(first: LayerMeanProbe | None, final: LayerMeanProbe | None):
    if first is None or final is None:
        raise DiagnosticError("deltas need probes after the first and after the last task")
    if first.layers != final.layers:
        raise DiagnosticError(f"probe layers differ: {first.layers} vs {final.layers}")
    deltas = []
    for index, name in enumerate(first.layers):
        deltas.append(LayerDelta(
            name,
            float(np.linalg.norm(first.stored_means[index] - first.true_means[index])),
            float(np.linalg.norm(first.true_means[index] - final.true_means[index])),
            float(np.linalg.norm(final.stored_means[index] - final.true_means[index])),
        ))
    return deltas


def median_shift(deltas) -> dict:
    """Median over layers of delta1 and of (delta2 - delta0)."""
    return {
        "median_delta1": float(np.median([delta.delta1 for delta in deltas])),
        "median_delta2_minus_delta0": float(np.median([delta.delta2 - delta.delta0
                                                       for delta in deltas])),
    }


def write_deltas_csv(path, deltas):
    write_csv(path, DELTA_HEADER,
              [[delta.layer, repr(delta.delta0), repr(delta.delta1), repr(delta.delta2)]
               for delta in deltas])
