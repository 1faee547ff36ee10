"""Dense tensor kernels: channel pooling, padding, convolution and polyphase splits.

Activations are numpy arrays in (B, C, H, W) layout. Convolution weights are
output-major, shape (C', C, K, K); the mean-invariance derivation indexes the
kernel input-major as W[c, c', i, j], which for a 1x1 kernel is just the
transposed channel matrix. The convolution is a cross-correlation (no kernel
flip); the mean identities hold for either convention.

Every function here is pure: inputs are never written to.
"""
from dataclasses import dataclass

import numpy as np

from errors import DecompositionError, ShapeError, StrideError


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    in_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        if min(self.out_channels, self.in_channels, self.kernel, self.stride) < 1:
            raise ShapeError(f"conv channels, kernel and stride must be positive: {self}")
        if self.padding < 0:
            raise ShapeError(f"conv padding must be >= 0: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return self.out_channels, self.in_channels, self.kernel, self.kernel

    @property
    def exact_recovery(self) -> bool:
        """Stride 1 with padding K-1: every input pixel meets every kernel tap."""
        return self.stride == 1 and self.padding == self.kernel - 1

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        sizes = []
        for size in (height, width):
            span = size + 2 * self.padding - self.kernel
            if span < 0:
                raise ShapeError(
                    f"kernel {self.kernel} does not fit input {height}x{width} "
                    f"with padding {self.padding}")
            if span % self.stride:
                raise StrideError(
                    f"input {height}x{width} with kernel {self.kernel}, padding "
                    f"{self.padding} gives a non-integral output at stride {self.stride}")
            sizes.append(span // self.stride + 1)
        return sizes[0], sizes[1]


def require_rank(a: np.ndarray, rank: int, what: str = "tensor"):
    if a.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {a.shape}")


def avg_pool(a: np.ndarray) -> np.ndarray:
    """Per-channel mean over the batch and spatial axes: (B, C, H, W) -> (C,)."""
    require_rank(a, 4, "avg_pool input")
    return a.mean(axis=(0, 2, 3))


def avg_pool_dp(a: np.ndarray) -> np.ndarray:
    """``avg_pool`` broadcast back to the input's shape."""
    require_rank(a, 4, "avg_pool_dp input")
    return np.broadcast_to(avg_pool(a)[None, :, None, None], a.shape).copy()


def zero_pad(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _check_conv_args(a, spec: ConvSpec, weight):
    require_rank(a, 4, "conv input")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv weight shape {weight.shape} != {spec.weight_shape}")
    if a.shape[1] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {a.shape[1]}")


def _check_bias(spec: ConvSpec, bias):
    if spec.has_bias:
        if bias is None or bias.shape != (spec.out_channels,):
            raise ShapeError(f"conv bias must have shape ({spec.out_channels},)")
    elif bias is not None:
        raise ShapeError("conv spec has no bias but a bias tensor was given")


def _tap_slices(i, j, stride, out_h, out_w):
    return (slice(None), slice(None),
            slice(i, i + stride * (out_h - 1) + 1, stride),
            slice(j, j + stride * (out_w - 1) + 1, stride))


def _correlate(padded, weight, stride, out_h, out_w):
    """Sum over kernel taps of channel-mixed strided windows of a padded input."""
    out = np.zeros((padded.shape[0], weight.shape[0], out_h, out_w),
                   dtype=np.result_type(padded, weight))
    for i in range(weight.shape[2]):
        for j in range(weight.shape[3]):
            window = padded[_tap_slices(i, j, stride, out_h, out_w)]
            out += np.einsum("oc,bchw->bohw", weight[:, :, i, j], window)
    return out


def conv2d_forward(a, spec: ConvSpec, weight, bias=None) -> np.ndarray:
    _check_conv_args(a, spec, weight)
    _check_bias(spec, bias)
    out_h, out_w = spec.output_size(a.shape[2], a.shape[3])
    out = _correlate(zero_pad(a, spec.padding), weight, spec.stride, out_h, out_w)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_backward(a, spec: ConvSpec, weight, grad_out):
    """Gradients of ``conv2d_forward`` w.r.t. input, weight and (if present) bias."""
    _check_conv_args(a, spec, weight)
    out_h, out_w = spec.output_size(a.shape[2], a.shape[3])
    expected = (a.shape[0], spec.out_channels, out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"conv grad_out shape {grad_out.shape} != {expected}")
    padded = zero_pad(a, spec.padding)
    grad_padded = np.zeros(padded.shape, dtype=np.result_type(padded, grad_out))
    grad_weight = np.zeros(weight.shape, dtype=np.result_type(weight, grad_out))
    for i in range(spec.kernel):
        for j in range(spec.kernel):
            taps = _tap_slices(i, j, spec.stride, out_h, out_w)
            grad_weight[:, :, i, j] = np.einsum("bohw,bchw->oc", grad_out, padded[taps])
            grad_padded[taps] += np.einsum("oc,bohw->bchw", weight[:, :, i, j], grad_out)
    p = spec.padding
    grad_input = grad_padded[:, :, p:p + a.shape[2], p:p + a.shape[3]]
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return grad_input, grad_weight, grad_bias


def polyphase_split(a: np.ndarray, m: int) -> list[np.ndarray]:
    """Split (B, C, H, W) into m*m interleaved sub-grids, phase (r, s) at index r*m + s."""
    require_rank(a, 4, "polyphase input")
    if m < 1:
        raise DecompositionError(f"polyphase stride must be >= 1, got {m}")
    if a.shape[2] % m or a.shape[3] % m:
        raise DecompositionError(
            f"spatial size {a.shape[2]}x{a.shape[3]} is not divisible by stride {m}")
    return [np.ascontiguousarray(a[:, :, r::m, s::m]) for r in range(m) for s in range(m)]


def polyphase_merge(parts: list[np.ndarray], m: int) -> np.ndarray:
    """Inverse of ``polyphase_split``."""
    if len(parts) != m * m:
        raise DecompositionError(f"expected {m * m} phases, got {len(parts)}")
    batch, channels, height, width = parts[0].shape
    merged = np.empty((batch, channels, height * m, width * m), dtype=parts[0].dtype)
    for index, part in enumerate(parts):
        if part.shape != parts[0].shape:
            raise DecompositionError("polyphase parts must share one shape")
        r, s = divmod(index, m)
        merged[:, :, r::m, s::m] = part
    return merged


def polyphase_split_kernel(weight: np.ndarray, m: int) -> list[np.ndarray]:
    """Sub-kernels holding the taps congruent to (r, s) modulo m."""
    require_rank(weight, 4, "conv weight")
    return [weight[:, :, r::m, s::m] for r in range(m) for s in range(m)]


def polyphase_conv2d(a, spec: ConvSpec, weight, bias=None) -> np.ndarray:
    """Stride-m convolution as the sum of m*m stride-1 convolutions on the padded phases."""
    _check_conv_args(a, spec, weight)
    _check_bias(spec, bias)
    out_h, out_w = spec.output_size(a.shape[2], a.shape[3])
    phases = polyphase_split(zero_pad(a, spec.padding), spec.stride)
    kernels = polyphase_split_kernel(weight, spec.stride)
    out = np.zeros((a.shape[0], spec.out_channels, out_h, out_w),
                   dtype=np.result_type(a, weight))
    for phase, kernel in zip(phases, kernels):
        if kernel.size == 0:
            continue
        if (phase.shape[2] - kernel.shape[2] + 1 < out_h
                or phase.shape[3] - kernel.shape[3] + 1 < out_w):
            raise DecompositionError(
                f"phase {phase.shape[2:]} too small for sub-kernel {kernel.shape[2:]}")
        out += _correlate(phase, kernel, 1, out_h, out_w)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def tap_coverage(size: int, kernel: int, stride: int, padding: int) -> np.ndarray:
    """For every kernel tap, how many output positions read a real (unpadded) input pixel."""
    out_size = (size + 2 * padding - kernel) // stride + 1
    rows = stride * np.arange(out_size)[None, :] + np.arange(kernel)[:, None] - padding
    return ((rows >= 0) & (rows < size)).sum(axis=1)


def conv_mean_from_phase_means(phase_means, spec: ConvSpec, weight, height: int, width: int,
                               bias=None) -> np.ndarray:
    """Post-convolution channel mean of an input that is constant on each polyphase part.

    Each tap (i, j) reads the phase ((i - p) mod m, (j - p) mod m) at a fraction
    of the output positions given by ``tap_coverage``. In exact-recovery mode
    every fraction is H*W / (H'*W') and this is the closed form
    (H*W / (H'*W')) * sum_c (sum_ij W[o, c, i, j]) * mean_c.
    """
    m = spec.stride
    if len(phase_means) != m * m:
        raise ShapeError(f"expected {m * m} phase means, got {len(phase_means)}")
    out_h, out_w = spec.output_size(height, width)
    cover = np.outer(tap_coverage(height, spec.kernel, m, spec.padding) / out_h,
                     tap_coverage(width, spec.kernel, m, spec.padding) / out_w)
    taps = (np.arange(spec.kernel) - spec.padding) % m
    phase_index = taps[:, None] * m + taps[None, :]
    tap_means = np.stack(phase_means)[phase_index]
    mean = np.einsum("ocij,ij,ijc->o", weight, cover, tap_means).astype(weight.dtype, copy=False)
    if bias is not None:
        mean = mean + bias
    return mean
