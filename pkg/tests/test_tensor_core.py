"""Convolution, pooling and polyphase kernels against loop oracles."""
import numpy as np
import pytest

from errors import DecompositionError, ShapeError, StrideError
from tensor_core import (
    ConvSpec,
    avg_pool,
    avg_pool_dp,
    conv2d_backward,
    conv2d_forward,
    conv_mean_from_phase_means,
    polyphase_conv2d,
    polyphase_merge,
    polyphase_split,
    tap_coverage,
)

SQUARE = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])


def loop_conv(a, spec, weight, bias=None):
    """Direct six-loop cross-correlation."""
    p, s, k = spec.padding, spec.stride, spec.kernel
    padded = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))
    out_h, out_w = spec.output_size(a.shape[2], a.shape[3])
    out = np.zeros((a.shape[0], spec.out_channels, out_h, out_w))
    for b in range(a.shape[0]):
        for o in range(spec.out_channels):
            for y in range(out_h):
                for x in range(out_w):
                    total = 0.0
                    for c in range(spec.in_channels):
                        for i in range(k):
                            for j in range(k):
                                total += weight[o, c, i, j] * padded[b, c, y * s + i, x * s + j]
                    out[b, o, y, x] = total + (bias[o] if bias is not None else 0.0)
    return out


def test_avg_pool_of_square():
    assert avg_pool(SQUARE).tolist() == [2.5]


def test_avg_pool_of_constant():
    assert np.array_equal(avg_pool(np.full((2, 3, 4, 4), 1.5)), [1.5, 1.5, 1.5])


def test_avg_pool_matches_loop(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    expected = [sum(a[b, c, h, w] for b in range(2) for h in range(4) for w in range(4)) / 32
                for c in range(3)]
    assert np.allclose(avg_pool(a), expected, atol=1e-14)


def test_avg_pool_dp_broadcasts():
    assert np.array_equal(avg_pool_dp(SQUARE), np.full((1, 1, 2, 2), 2.5))


def test_avg_pool_rejects_rank_three():
    with pytest.raises(ShapeError):
        avg_pool(np.zeros((1, 2, 2)))


def test_one_by_one_kernel_scales_pixels():
    spec = ConvSpec(1, 1, 1)
    out = conv2d_forward(SQUARE, spec, np.full((1, 1, 1, 1), 2.0))
    assert out.tolist() == [[[[2.0, 4.0], [6.0, 8.0]]]]


def test_zero_weight_gives_bias_only():
    spec = ConvSpec(2, 1, 2, padding=1, has_bias=True)
    out = conv2d_forward(SQUARE, spec, np.zeros(spec.weight_shape), np.array([0.5, -1.0]))
    assert np.array_equal(out[0, 0], np.full((3, 3), 0.5))
    assert np.array_equal(out[0, 1], np.full((3, 3), -1.0))


@pytest.mark.parametrize("kernel,stride,padding", [(3, 1, 0), (3, 1, 2), (2, 2, 0), (3, 2, 1)])
def test_conv_matches_loop_oracle(rng, kernel, stride, padding):
    spec = ConvSpec(2, 3, kernel, stride, padding, has_bias=True)
    size = 2 * stride + kernel - 2 * padding + stride
    a = rng.standard_normal((2, 3, size, size))
    weight = rng.standard_normal(spec.weight_shape)
    bias = rng.standard_normal(2)
    assert np.allclose(conv2d_forward(a, spec, weight, bias), loop_conv(a, spec, weight, bias),
                       atol=1e-12)


def test_non_integral_output_is_a_stride_error():
    with pytest.raises(StrideError):
        ConvSpec(1, 1, 2, stride=2).output_size(5, 5)


def test_kernel_larger_than_input_is_a_shape_error():
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, 5).output_size(3, 3)


def test_wrong_channel_count_is_rejected():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 2, 4, 4)), ConvSpec(1, 3, 1), np.zeros((1, 3, 1, 1)))


def test_backward_of_zero_grad_is_zero(rng):
    spec = ConvSpec(2, 2, 3, padding=1, has_bias=True)
    a = rng.standard_normal((1, 2, 4, 4))
    grad_input, grad_weight, grad_bias = conv2d_backward(
        a, spec, rng.standard_normal(spec.weight_shape), np.zeros((1, 2, 4, 4)))
    assert not grad_input.any() and not grad_weight.any() and not grad_bias.any()


def test_backward_input_grad_is_adjoint_of_forward(rng):
    spec = ConvSpec(3, 2, 3, stride=2, padding=1)
    a = rng.standard_normal((2, 2, 5, 5))
    weight = rng.standard_normal(spec.weight_shape)
    grad_out = rng.standard_normal(conv2d_forward(a, spec, weight).shape)
    grad_input, grad_weight, _ = conv2d_backward(a, spec, weight, grad_out)
    # <conv(a), g> is linear in a and in the weight
    assert np.isclose(np.sum(conv2d_forward(a, spec, weight) * grad_out),
                      np.sum(grad_input * a))
    assert np.isclose(np.sum(conv2d_forward(a, spec, weight) * grad_out),
                      np.sum(grad_weight * weight))


class TestPolyphase:
    def test_stride_one_split_is_identity(self, rng):
        a = rng.standard_normal((1, 2, 3, 3))
        parts = polyphase_split(a, 1)
        assert len(parts) == 1 and np.array_equal(parts[0], a)

    def test_merge_inverts_split(self, rng):
        a = rng.standard_normal((2, 2, 6, 6))
        assert np.array_equal(polyphase_merge(polyphase_split(a, 3), 3), a)

    def test_phase_order_is_row_major(self):
        a = np.arange(16.0).reshape(1, 1, 4, 4)
        parts = polyphase_split(a, 2)
        assert parts[1][0, 0].tolist() == [[1.0, 3.0], [9.0, 11.0]]

    def test_indivisible_size_is_rejected(self):
        with pytest.raises(DecompositionError):
            polyphase_split(np.zeros((1, 1, 5, 4)), 2)

    @pytest.mark.parametrize("m,kernel,size", [(2, 2, 6), (2, 4, 8), (3, 3, 9)])
    def test_strided_conv_equals_phase_sum(self, rng, m, kernel, size):
        spec = ConvSpec(2, 3, kernel, stride=m)
        a = rng.standard_normal((2, 3, size, size))
        weight = rng.standard_normal(spec.weight_shape)
        assert np.allclose(polyphase_conv2d(a, spec, weight), conv2d_forward(a, spec, weight),
                           rtol=1e-12, atol=1e-12)


class TestMeanFromPhaseMeans:
    def test_tap_coverage_in_exact_mode_is_full(self):
        assert tap_coverage(4, 3, 1, 2).tolist() == [4, 4, 4]

    def test_tap_coverage_without_padding(self):
        assert tap_coverage(4, 3, 1, 0).tolist() == [2, 2, 2]
        assert tap_coverage(4, 3, 1, 1).tolist() == [3, 4, 3]

    def test_worked_example_twenty_ninths(self):
        spec = ConvSpec(1, 1, 2, padding=1)
        weight = np.full(spec.weight_shape, 0.5)
        mean = conv_mean_from_phase_means([avg_pool(SQUARE)], spec, weight, 2, 2)
        assert np.isclose(mean[0], 20.0 / 9.0, atol=1e-15)
        assert np.isclose(avg_pool(conv2d_forward(SQUARE, spec, weight))[0], 20.0 / 9.0)

    @pytest.mark.parametrize("kernel,stride,padding,size", [
        (3, 1, 2, 5), (3, 1, 1, 5), (2, 2, 0, 6), (4, 2, 0, 6), (3, 3, 0, 6), (4, 2, 1, 4),
    ])
    def test_matches_convolution_of_phase_constant_input(self, rng, kernel, stride, padding,
                                                         size):
        spec = ConvSpec(3, 2, kernel, stride, padding, has_bias=True)
        means = [rng.standard_normal(2) for _ in range(stride * stride)]
        phases = [np.broadcast_to(mean[None, :, None, None], (1, 2, size // stride,
                                                              size // stride))
                  for mean in means]
        constant = polyphase_merge(phases, stride)
        weight = rng.standard_normal(spec.weight_shape)
        bias = rng.standard_normal(3)
        expected = avg_pool(conv2d_forward(constant, spec, weight, bias))
        assert np.allclose(conv_mean_from_phase_means(means, spec, weight, size, size, bias),
                           expected, atol=1e-12)

    def test_exact_mode_reduces_to_scaled_kernel_sum(self, rng):
        spec = ConvSpec(4, 3, 3, padding=2)
        a = rng.standard_normal((3, 3, 5, 6))
        weight = rng.standard_normal(spec.weight_shape)
        scale = 5 * 6 / (7 * 8)
        expected = scale * weight.sum(axis=(2, 3)) @ avg_pool(a)
        assert np.allclose(avg_pool(conv2d_forward(a, spec, weight)), expected, atol=1e-12)
