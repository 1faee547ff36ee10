"""Trainable layers with explicit forward and backward passes.

A train-mode forward caches what the matching backward needs; the cache is
consumed by that backward, and a second backward (or one after an eval-mode
forward) raises ``UsageError``. Parameters are exposed as live arrays so the
optimizer updates them in place; every update bumps the owning layer's
``version``, which is how Xconv BN notices that its recovered means are stale.

Normalization layers keep one record per task id. Id 0 is the template
record: it is what pretraining trains and what every new task's record is
copied from.
"""
import logging
from dataclasses import dataclass

import numpy as np

from errors import (
    BankFrozenError,
    ConfigError,
    DataError,
    DegenerateBatchError,
    DuplicateTaskError,
    MissingBankError,
    RecoveryError,
    ShapeError,
    StaleRecoveryError,
    UsageError,
)
from tensor_core import (
    ConvSpec,
    avg_pool,
    conv2d_backward,
    conv2d_forward,
    conv_mean_from_phase_means,
    polyphase_merge,
    polyphase_split,
    require_rank,
)

logger = logging.getLogger(__name__)

TEMPLATE_TASK = 0


# -- functional batch normalization -------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    stab_eps: float = 1e-5
    frozen: bool = False

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError(f"BN momentum must lie in (0, 1], got {self.momentum}")
        if self.stab_eps <= 0:
            raise ConfigError(f"BN stab_eps must be > 0, got {self.stab_eps}")

    @classmethod
    def fresh(cls, channels, dtype=np.float64, momentum=0.1, stab_eps=1e-5):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            stab_eps=stab_eps,
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
                              self.running_var.copy(), self.momentum, self.stab_eps)


@dataclass
class BnCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    consumed: bool = False


def batch_moments(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch mean and biased batch variance per channel."""
    require_rank(a, 4, "BN input")
    count = a.shape[0] * a.shape[2] * a.shape[3]
    if count < 2:
        raise DegenerateBatchError(f"BN needs B*H*W >= 2 values per channel, got {count}")
    mean = a.mean(axis=(0, 2, 3))
    var = ((a - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def normalize(a, mean, var, gamma, beta, stab_eps):
    inv_std = 1.0 / np.sqrt(var + stab_eps)
    x_hat = (a - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
    return out, x_hat, inv_std


def momentum_update(running: np.ndarray, observed: np.ndarray, momentum: float):
    """running <- running + momentum * (observed - running), in place."""
    running += momentum * (observed - running)


def batch_normalize_train(a, gamma, beta, stab_eps):
    """Normalize with batch moments; returns (out, cache, batch mean, batch var)."""
    mean, var = batch_moments(a)
    out, x_hat, inv_std = normalize(a, mean, var, gamma, beta, stab_eps)
    return out, BnCache(x_hat, inv_std, gamma), mean, var


def bn_forward_train(a, state: BatchNormState):
    if state.frozen:
        raise BankFrozenError("BN state of a finished task cannot be trained")
    out, cache, mean, var = batch_normalize_train(a, state.gamma, state.beta, state.stab_eps)
    momentum_update(state.running_mean, mean, state.momentum)
    momentum_update(state.running_var, var, state.momentum)
    return out, cache


def bn_forward_eval(a, state: BatchNormState):
    require_rank(a, 4, "BN input")
    out, _, _ = normalize(a, state.running_mean, state.running_var, state.gamma, state.beta,
                          state.stab_eps)
    return out


def bn_backward(cache: BnCache, grad_out):
    """Gradient of the train-mode map; running statistics are treated as constants."""
    if cache is None or cache.consumed:
        raise UsageError("BN backward needs a fresh train-mode forward cache")
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(f"BN grad_out shape {grad_out.shape} != {cache.x_hat.shape}")
    cache.consumed = True
    axes = (0, 2, 3)
    grad_gamma = (grad_out * cache.x_hat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_x_hat = grad_out * cache.gamma[None, :, None, None]
    grad_input = cache.inv_std[None, :, None, None] * (
        grad_x_hat
        - grad_x_hat.mean(axis=axes)[None, :, None, None]
        - cache.x_hat * (grad_x_hat * cache.x_hat).mean(axis=axes)[None, :, None, None]
    )
    return grad_input, grad_gamma, grad_beta


# -- cross-convolution BN records -------------------------------------------------

@dataclass
class XconvRecord:
    """One task's Xconv BN bank: affine params, pre-conv phase means, post-conv variance.

    ``recovered_mean`` is a cache tagged with the conv ``version`` it was
    computed against; it is not part of the persisted bank.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_var: np.ndarray
    pre_means: list[np.ndarray]
    input_spatial: tuple[int, int] | None = None
    frozen: bool = False
    recovered_mean: np.ndarray | None = None
    recovered_for: int | None = None

    @classmethod
    def fresh(cls, in_channels, out_channels, phases, dtype=np.float64, input_spatial=None):
        return cls(
            gamma=np.ones(out_channels, dtype=dtype),
            beta=np.zeros(out_channels, dtype=dtype),
            running_var=np.ones(out_channels, dtype=dtype),
            pre_means=[np.zeros(in_channels, dtype=dtype) for _ in range(phases)],
            input_spatial=input_spatial,
        )

    def copy(self) -> "XconvRecord":
        return XconvRecord(self.gamma.copy(), self.beta.copy(), self.running_var.copy(),
                           [mean.copy() for mean in self.pre_means], self.input_spatial)

    def invalidate(self):
        self.recovered_mean = None
        self.recovered_for = None


def xconv_update_pre_means(a, record: XconvRecord, m: int, momentum: float):
    """Fold one conv input batch into the record's m*m pre-convolution phase means."""
    if record.frozen:
        raise BankFrozenError("Xconv bank of a finished task cannot be updated")
    require_rank(a, 4, "conv input")
    spatial = (a.shape[2], a.shape[3])
    if record.input_spatial is not None and record.input_spatial != spatial:
        raise ShapeError(
            f"conv input size changed within a task: {record.input_spatial} -> {spatial}")
    for mean, part in zip(record.pre_means, polyphase_split(a, m)):
        momentum_update(mean, avg_pool(part), momentum)
    record.input_spatial = spatial
    record.invalidate()


def recover_mean_broadcast(record: XconvRecord, spec: ConvSpec, weight, bias=None):
    """Convolve the literal phase-wise constant input and average the result."""
    height, width = record.input_spatial
    m = spec.stride
    phases = [np.broadcast_to(mean[None, :, None, None],
                              (1, mean.shape[0], height // m, width // m))
              for mean in record.pre_means]
    constant = polyphase_merge(phases, m)
    return avg_pool(conv2d_forward(constant, spec, weight, bias))


def xconv_recover_mean(record: XconvRecord, spec: ConvSpec, weight, bias=None,
                       method: str = "closed_form", version: int | None = None):
    """Post-convolution running mean of the record under the current conv weights."""
    if record.input_spatial is None:
        raise RecoveryError("Xconv bank has no recorded input size; train it first")
    height, width = record.input_spatial
    if method == "closed_form":
        mean = conv_mean_from_phase_means(record.pre_means, spec, weight, height, width, bias)
    elif method == "broadcast":
        mean = recover_mean_broadcast(record, spec, weight, bias)
    else:
        raise ConfigError(f"unknown recovery method {method!r}")
    record.recovered_mean = mean
    record.recovered_for = version
    return mean


# -- layers ---------------------------------------------------------------------

class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.version = 0

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def gradients(self) -> dict[str, np.ndarray]:
        return {}

    def mark_updated(self):
        self.version += 1


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name, spec: ConvSpec, weight, bias=None):
        super().__init__(name)
        if weight.shape != spec.weight_shape:
            raise ShapeError(f"{name}: weight shape {weight.shape} != {spec.weight_shape}")
        self.spec = spec
        self.weight = weight
        self.bias = bias if spec.has_bias else None
        self.input_hooks = []
        self._input = None
        self._grads = {}

    @classmethod
    def initialized(cls, name, spec: ConvSpec, rng, dtype=np.float64):
        """He-normal weights, zero bias."""
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        weight = (rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        bias = np.zeros(spec.out_channels, dtype=dtype) if spec.has_bias else None
        return cls(name, spec, weight, bias)

    def forward(self, x, train):
        if train:
            for hook in self.input_hooks:
                hook(x)
            self._input = x
        return conv2d_forward(x, self.spec, self.weight, self.bias)

    def backward(self, grad):
        if self._input is None:
            raise UsageError(f"{self.name}: backward without a train-mode forward")
        grad_input, grad_weight, grad_bias = conv2d_backward(
            self._input, self.spec, self.weight, grad)
        self._input = None
        self._grads = {"weight": grad_weight}
        if grad_bias is not None:
            self._grads["bias"] = grad_bias
        return grad_input

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def gradients(self):
        return self._grads

    def assign(self, name, value):
        current = self.parameters()[name]
        if value.shape != current.shape:
            raise ShapeError(f"{self.name}.{name}: shape {value.shape} != {current.shape}")
        current[...] = value
        self.mark_updated()


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name):
        super().__init__(name)
        self._mask = None

    def forward(self, x, train):
        mask = x > 0
        if train:
            self._mask = mask
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        if self._mask is None:
            raise UsageError(f"{self.name}: backward without a train-mode forward")
        grad_input = np.where(self._mask, grad, 0.0).astype(grad.dtype, copy=False)
        self._mask = None
        return grad_input


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name):
        super().__init__(name)
        self._shape = None

    def forward(self, x, train):
        if train:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        if self._shape is None:
            raise UsageError(f"{self.name}: backward without a train-mode forward")
        grad_input = grad.reshape(self._shape)
        self._shape = None
        return grad_input


class Linear(Layer):
    kind = "linear"

    def __init__(self, name, weight, bias):
        super().__init__(name)
        self.weight = weight
        self.bias = bias
        self.frozen = False
        self._input = None
        self._grads = {}

    @classmethod
    def initialized(cls, name, in_features, out_features, init, rng, dtype=np.float64):
        """``zeros`` for a probed head, ``uniform`` for a small random head."""
        if init == "zeros":
            weight = np.zeros((out_features, in_features), dtype=dtype)
        elif init == "uniform":
            limit = 1.0 / np.sqrt(in_features)
            weight = rng.uniform(-limit, limit, (out_features, in_features)).astype(dtype)
        else:
            raise ConfigError(f"unknown head init {init!r}")
        return cls(name, weight, np.zeros(out_features, dtype=dtype))

    def forward(self, x, train):
        require_rank(x, 2, f"{self.name} input")
        if x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"{self.name}: expects {self.weight.shape[1]} features, got {x.shape[1]}")
        if train:
            self._input = x
        return x @ self.weight.T + self.bias

    def backward(self, grad):
        if self._input is None:
            raise UsageError(f"{self.name}: backward without a train-mode forward")
        self._grads = {"weight": grad.T @ self._input, "bias": grad.sum(axis=0)}
        grad_input = grad @ self.weight
        self._input = None
        return grad_input

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def gradients(self):
        return self._grads


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    require_rank(logits, 2, "logits")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match {logits.shape[0]} logits")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"labels must lie in [0, {logits.shape[1]})")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / logits.shape[0]


# -- normalization layers ---------------------------------------------------------

class NormLayer(Layer):
    """Shared machinery of the task-banked normalization layers.

    ``override`` holds (mean, var) replacements for eval-mode forwards; either
    entry may be None to keep the stored moment.
    """

    kind = "norm"
    task_specific = True

    def __init__(self, name, momentum, stab_eps):
        super().__init__(name)
        self.momentum = momentum
        self.stab_eps = stab_eps
        self.records = {}
        self.active = TEMPLATE_TASK
        self.override = None
        self._cache = None
        self._grads = {}

    def key(self, task_id):
        return task_id if self.task_specific else TEMPLATE_TASK

    def add_task(self, task_id):
        if not self.task_specific or task_id == TEMPLATE_TASK:
            return
        if task_id in self.records:
            raise DuplicateTaskError(f"{self.name}: task {task_id} already has a bank")
        self.records[task_id] = self.records[TEMPLATE_TASK].copy()

    def remove_task(self, task_id):
        if self.task_specific and task_id != TEMPLATE_TASK:
            self.records.pop(task_id, None)

    def activate(self, task_id):
        key = self.key(task_id)
        if key not in self.records:
            raise MissingBankError(f"{self.name}: no bank for task {task_id}")
        self.active = key

    def freeze(self, task_id):
        if self.task_specific and task_id != TEMPLATE_TASK:
            self.records[task_id].frozen = True

    def record(self, task_id=None):
        key = self.active if task_id is None else self.key(task_id)
        if key not in self.records:
            raise MissingBankError(f"{self.name}: no bank for task {task_id}")
        return self.records[key]

    def task_ids(self):
        return sorted(key for key in self.records if key != TEMPLATE_TASK)

    def forward(self, x, train):
        record = self.record()
        if train:
            if record.frozen:
                raise BankFrozenError(f"{self.name}: bank of a finished task cannot be trained")
            out, self._cache = self._train_forward(x, record)
            return out
        if self.override is None:
            return self._eval_forward(x, record)
        mean, var = self.eval_moments(record)
        mean = mean if self.override[0] is None else self.override[0]
        var = var if self.override[1] is None else self.override[1]
        out, _, _ = normalize(x, mean, var, record.gamma, record.beta, self.stab_eps)
        return out

    def backward(self, grad):
        grad_input, grad_gamma, grad_beta = bn_backward(self._cache, grad)
        self._cache = None
        self._grads = {"gamma": grad_gamma, "beta": grad_beta}
        return grad_input

    def parameters(self):
        record = self.record()
        return {"gamma": record.gamma, "beta": record.beta}

    def gradients(self):
        return self._grads

    def stored_mean(self, task_id):
        """The mean this layer normalizes task ``task_id`` with in eval mode."""
        return self.eval_moments(self.record(task_id))[0]

    def recover(self):
        """Refresh derived eval statistics; classic BN has none."""

    def _train_forward(self, x, record):
        raise NotImplementedError

    def _eval_forward(self, x, record):
        mean, var = self.eval_moments(record)
        out, _, _ = normalize(x, mean, var, record.gamma, record.beta, self.stab_eps)
        return out

    def eval_moments(self, record):
        raise NotImplementedError


class BatchNorm2d(NormLayer):
    """Classic BN, either one state shared by every task or one state per task."""

    def __init__(self, name, channels, task_specific, momentum=0.1, stab_eps=1e-5,
                 dtype=np.float64):
        super().__init__(name, momentum, stab_eps)
        self.task_specific = task_specific
        self.channels = channels
        self.records[TEMPLATE_TASK] = BatchNormState.fresh(channels, dtype, momentum, stab_eps)

    def _train_forward(self, x, record):
        return bn_forward_train(x, record)

    def _eval_forward(self, x, record):
        return bn_forward_eval(x, record)

    def eval_moments(self, record):
        return record.running_mean, record.running_var


class XconvBatchNorm(NormLayer):
    """BN that keeps pre-convolution phase means and recovers post-conv means on demand.

    Registers an input hook on its conv: every train-mode conv forward folds the
    conv input into the active record's phase means. Train-mode normalization is
    classic BN on batch moments; eval mode uses the recovered mean, which must
    have been computed against the conv's current ``version``.
    """

    def __init__(self, name, conv: Conv2d, momentum=0.1, stab_eps=1e-5, recovery="closed_form",
                 dtype=np.float64, input_spatial=None):
        super().__init__(name, momentum, stab_eps)
        self.conv = conv
        self.recovery = recovery
        spec = conv.spec
        self.records[TEMPLATE_TASK] = XconvRecord.fresh(
            spec.in_channels, spec.out_channels, spec.stride ** 2, dtype, input_spatial)
        conv.input_hooks.append(self._capture_pre_means)

    def _capture_pre_means(self, a):
        xconv_update_pre_means(a, self.record(), self.conv.spec.stride, self.momentum)

    def _train_forward(self, x, record):
        out, cache, _, var = batch_normalize_train(x, record.gamma, record.beta, self.stab_eps)
        momentum_update(record.running_var, var, self.momentum)
        return out, cache

    def eval_moments(self, record):
        if record.recovered_mean is None or record.recovered_for != self.conv.version:
            raise StaleRecoveryError(
                f"{self.name}: recovered mean is stale; run recovery after weight changes")
        return record.recovered_mean, record.running_var

    def recover(self):
        for record in self.records.values():
            if record.input_spatial is None:
                continue
            xconv_recover_mean(record, self.conv.spec, self.conv.weight, self.conv.bias,
                               self.recovery, self.conv.version)
