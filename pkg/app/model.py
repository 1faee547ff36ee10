"""Multi-head continual model: a shared conv feature stack plus one linear head per task.

Normalization follows one of three modes:

- ``shared_bn``: classic BN with one state shared by all tasks;
- ``task_bn``: classic BN with one state per task;
- ``xconv_bn``: cross-convolution BN with one bank per task whose post-conv
  means are recovered from pre-conv means through the current conv weights.
"""
import logging
from dataclasses import asdict

import numpy as np

from config import ConvBlock, ModelConfig, NORM_MODES
from errors import ConfigError, DuplicateTaskError, MissingBankError
from layers import (
    TEMPLATE_TASK,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    NormLayer,
    ReLU,
    XconvBatchNorm,
)
from tensor_core import ConvSpec

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = ("head", "norm", "conv")


class ContinualModel:
    def __init__(self, layers, heads_in, norm_mode, config: ModelConfig, rng, dtype,
                 momentum, stab_eps, recovery):
        self.layers = layers
        self.feature_dim = heads_in
        self.norm_mode = norm_mode
        self.config = config
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.momentum = momentum
        self.stab_eps = stab_eps
        self.recovery = recovery
        self.heads: dict[int, Linear] = {}
        self.current_task = None

    # -- structure --------------------------------------------------------------

    def conv_layers(self) -> list[Conv2d]:
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    def norm_layers(self) -> list[NormLayer]:
        return [layer for layer in self.layers if isinstance(layer, NormLayer)]

    def layer_index(self, layer) -> int:
        return next(index for index, item in enumerate(self.layers) if item is layer)

    def trained_tasks(self) -> list[int]:
        return sorted(task_id for task_id in self.heads if task_id != TEMPLATE_TASK)

    def describe(self) -> dict:
        return {
            "norm_mode": self.norm_mode,
            "dtype": self.dtype.name,
            "momentum": self.momentum,
            "stab_eps": self.stab_eps,
            "recovery": self.recovery,
            "model": {
                "input_shape": list(self.config.input_shape),
                "blocks": [asdict(block) for block in self.config.blocks],
            },
            "layers": [{"name": layer.name, "kind": layer.kind} for layer in self.layers],
        }

    def bank_overhead(self) -> int:
        """Extra values stored per task beyond the head, for the current norm mode."""
        total = 0
        for norm in self.norm_layers():
            if isinstance(norm, XconvBatchNorm):
                spec = norm.conv.spec
                total += 3 * spec.out_channels + spec.stride ** 2 * spec.in_channels
            elif norm.task_specific:
                total += 4 * norm.channels
        return total

    # -- tasks ------------------------------------------------------------------

    def add_task(self, task_id, num_classes, head_init="zeros"):
        if task_id in self.heads:
            raise DuplicateTaskError(f"task {task_id} is already trained")
        for norm in self.norm_layers():
            norm.add_task(task_id)
        self.heads[task_id] = Linear.initialized(
            f"head{task_id}", self.feature_dim, num_classes, head_init, self.rng, self.dtype)
        self.current_task = task_id

    def drop_task(self, task_id):
        """Forget a task's head and banks (used for the pretext head after pretraining)."""
        self.heads.pop(task_id, None)
        for norm in self.norm_layers():
            norm.remove_task(task_id)

    def freeze_task(self, task_id):
        self.heads[task_id].frozen = True
        for norm in self.norm_layers():
            norm.freeze(task_id)

    def activate(self, task_id):
        if task_id not in self.heads:
            raise MissingBankError(f"no head for task {task_id}")
        for norm in self.norm_layers():
            norm.activate(task_id)

    def recover_all(self):
        """Recompute every Xconv bank's post-conv mean against the current weights."""
        for norm in self.norm_layers():
            norm.recover()

    # -- passes -----------------------------------------------------------------

    def features(self, x, task_id, train=False, stop=None):
        """Run the feature stack (or its first ``stop`` layers) with ``task_id``'s banks."""
        self.activate(task_id)
        out = x
        for layer in self.layers[:stop]:
            out = layer.forward(out, train)
        return out

    def forward(self, x, task_id, train=False, train_features=None):
        train_features = train if train_features is None else train_features
        features = self.features(x, task_id, train=train_features)
        return self.heads[task_id].forward(features, train)

    def backward(self, grad_logits, task_id, floor=0):
        """Backpropagate through the head and feature layers with index >= ``floor``."""
        grad = self.heads[task_id].backward(grad_logits)
        for layer in reversed(self.layers[floor:]):
            grad = layer.backward(grad)
        return grad

    def backward_floor(self, groups) -> int:
        """Lowest layer index a backward must reach for the given parameter groups."""
        if "conv" in groups:
            return 0
        if "norm" in groups:
            return min(self.layer_index(norm) for norm in self.norm_layers())
        return len(self.layers)

    def parameter_targets(self, groups, task_id) -> list[tuple[object, str]]:
        """(layer, parameter name) pairs the optimizer may update in the given groups."""
        unknown = set(groups) - set(PARAMETER_GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups: {sorted(unknown)}")
        targets = []
        if "conv" in groups:
            targets += [(conv, name) for conv in self.conv_layers() for name in conv.parameters()]
        if "norm" in groups:
            targets += [(norm, name) for norm in self.norm_layers() for name in ("gamma", "beta")]
        if "head" in groups and not self.heads[task_id].frozen:
            targets += [(self.heads[task_id], name) for name in ("weight", "bias")]
        return targets


def _norm_layer(name, conv, norm_mode, momentum, stab_eps, recovery, dtype, input_spatial):
    channels = conv.spec.out_channels
    if norm_mode == "shared_bn":
        return BatchNorm2d(name, channels, False, momentum, stab_eps, dtype)
    if norm_mode == "task_bn":
        return BatchNorm2d(name, channels, True, momentum, stab_eps, dtype)
    if norm_mode == "xconv_bn":
        return XconvBatchNorm(name, conv, momentum, stab_eps, recovery, dtype, input_spatial)
    raise ConfigError(f"norm mode must be one of {NORM_MODES}, got {norm_mode!r}")


def build_model(config: ModelConfig, norm_mode, rng, dtype=np.float64, momentum=0.1,
                stab_eps=1e-5, recovery="closed_form") -> ContinualModel:
    """Conv -> Norm -> ReLU blocks followed by a flatten; heads are added per task."""
    channels, height, width = config.input_shape
    layers = []
    for index, block in enumerate(config.blocks):
        spec = ConvSpec(block.out_channels, channels, block.kernel, block.stride,
                        block.padding, block.bias)
        conv = Conv2d.initialized(f"conv{index}", spec, rng, dtype)
        input_spatial = (height, width)
        if norm_mode == "xconv_bn" and (height % spec.stride or width % spec.stride):
            raise ConfigError(
                f"conv{index}: input {height}x{width} does not split into stride-{spec.stride} "
                "phases; Xconv BN needs divisible sizes")
        height, width = spec.output_size(height, width)
        layers.append(conv)
        layers.append(_norm_layer(f"norm{index}", conv, norm_mode, momentum, stab_eps,
                                  recovery, dtype, input_spatial))
        layers.append(ReLU(f"relu{index}"))
        channels = block.out_channels
    layers.append(Flatten("flatten"))
    logger.debug("built %s model with %d blocks, %d features", norm_mode, len(config.blocks),
                 channels * height * width)
    return ContinualModel(layers, channels * height * width, norm_mode, config, rng, dtype,
                          momentum, stab_eps, recovery)


def model_config_from_dict(document: dict) -> ModelConfig:
    return ModelConfig(
        input_shape=tuple(document["input_shape"]),
        blocks=tuple(ConvBlock(**block) for block in document["blocks"]),
    )
