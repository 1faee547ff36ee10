"""Randomized property suite behind ``cli verify``.

Each check draws its cases from its own child of the suite seed and returns a
``CheckResult``; a check fails when any case exceeds its tolerance.
Informational checks (the same-padding recovery error) are reported but never
fail the suite.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np

from layers import (
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    ReLU,
    XconvBatchNorm,
    XconvRecord,
    softmax_cross_entropy,
    xconv_recover_mean,
    xconv_update_pre_means,
)
from metrics import AccuracyMatrix, acc, fgt
from tensor_core import ConvSpec, avg_pool, avg_pool_dp, conv2d_forward, polyphase_conv2d

logger = logging.getLogger(__name__)

INVARIANCE_TOL = 1e-9
RECOVERY_TOL = 1e-9
POLYPHASE_TOL = 1e-12
DRIFT_TOL = 1e-8
DRIFT_RATIO = 10.0
GRADIENT_TOL = 1e-6
METRIC_TOL = 1e-12
FD_STEP = 1e-5
FD_COORDS = 12


@dataclass
class CheckResult:
    name: str
    cases: int
    failures: int
    max_error: float
    tolerance: float
    informational: bool = False
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.informational or self.failures == 0

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def _result(name, errors, tolerance, detail="", failed=None):
    failures = sum(error >= tolerance for error in errors) if failed is None else failed
    return CheckResult(name, len(errors), int(failures), float(max(errors, default=0.0)),
                       tolerance, detail=detail)


# -- mean invariance and recovery -------------------------------------------------

def exact_mode_mean(spec: ConvSpec, weight, input_mean, height, width):
    """(H*W / (H'*W')) * sum over taps of W, applied to the input channel means."""
    out_h, out_w = spec.output_size(height, width)
    scale = height * width / (out_h * out_w)
    return scale * np.einsum("ocij,c->o", weight, input_mean)


def _worked_case():
    """2x2 input [[1, 2], [3, 4]], a 2x2 kernel of 0.5 and padding 1: mean 20/9."""
    spec = ConvSpec(1, 1, 2, padding=1)
    return spec, np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), np.full(spec.weight_shape, 0.5)


def _full_padding_case(rng):
    kernel = int(rng.choice([1, 2, 3, 5]))
    spec = ConvSpec(int(rng.choice([1, 2, 4])), int(rng.choice([1, 2, 4])), kernel,
                    padding=kernel - 1)
    height, width = (int(size) for size in rng.integers(1, 7, size=2))
    a = rng.standard_normal((int(rng.integers(1, 4)), spec.in_channels, height, width))
    return spec, a, rng.standard_normal(spec.weight_shape)


def check_mean_invariance(rng, cases) -> CheckResult:
    """Post-conv mean equals the scaled kernel sum times the pre-conv mean.

    Stride 1 with full padding (K-1), where the identity is exact.
    """
    spec, a, weight = _worked_case()
    errors = [abs(avg_pool(conv2d_forward(a, spec, weight))[0] - 20.0 / 9.0)]
    for _ in range(cases - 1):
        spec, a, weight = _full_padding_case(rng)
        height, width = a.shape[2:]
        direct = avg_pool(conv2d_forward(a, spec, weight))
        errors.append(float(np.max(np.abs(
            direct - exact_mode_mean(spec, weight, avg_pool(a), height, width)))))
    return _result("mean_invariance", errors, INVARIANCE_TOL)


def check_mean_invariance_literal(rng, cases) -> CheckResult:
    """Convolving the input or its broadcast mean gives the same post-conv mean.

    Compares ``avg_pool(conv(a))`` with ``avg_pool(conv(avg_pool_dp(a)))``
    directly, with no closed form in between.
    """
    spec, a, weight = _worked_case()
    constant = avg_pool(conv2d_forward(avg_pool_dp(a), spec, weight))
    errors = [abs(constant[0] - 20.0 / 9.0)]
    for _ in range(cases - 1):
        spec, a, weight = _full_padding_case(rng)
        direct = avg_pool(conv2d_forward(a, spec, weight))
        constant = avg_pool(conv2d_forward(avg_pool_dp(a), spec, weight))
        errors.append(float(np.max(np.abs(direct - constant))))
    return _result("mean_invariance_literal", errors, INVARIANCE_TOL)


def _divisible_spec(rng):
    """A random conv spec and an input size that splits into stride phases."""
    while True:
        stride = int(rng.choice([1, 2, 3]))
        kernel = int(rng.integers(1, 5))
        padding = int(rng.integers(0, kernel))
        size = stride * int(rng.integers(2, 5))
        if size + 2 * padding >= kernel and (size + 2 * padding - kernel) % stride == 0:
            channels = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            return ConvSpec(channels[1], channels[0], kernel, stride, padding), size


def exact_recovery_case(rng):
    """Stride 1 with full padding: the layers Xconv BN recovers exactly."""
    kernel = int(rng.integers(1, 5))
    spec = ConvSpec(int(rng.integers(1, 5)), int(rng.integers(1, 5)), kernel,
                    padding=kernel - 1)
    return spec, int(rng.integers(1, 7))


def _recovery_gap(rng, spec, size) -> float:
    record = XconvRecord.fresh(spec.in_channels, spec.out_channels, spec.stride ** 2,
                               input_spatial=(size, size))
    record.pre_means = [rng.standard_normal(spec.in_channels) for _ in record.pre_means]
    weight = rng.standard_normal(spec.weight_shape)
    closed = xconv_recover_mean(record, spec, weight, method="closed_form").copy()
    literal = xconv_recover_mean(record, spec, weight, method="broadcast")
    return float(np.max(np.abs(closed - literal)))


def check_recovery_agreement(rng, cases) -> CheckResult:
    """Closed-form and literal-broadcast recovery agree on exact-recovery layers."""
    errors = [_recovery_gap(rng, *exact_recovery_case(rng)) for _ in range(cases)]
    return _result("recovery_agreement", errors, RECOVERY_TOL,
                   detail=f"{cases} stride-1 full-padding cases")


def check_recovery_agreement_strided(rng, cases) -> CheckResult:
    """The same agreement on strided layers whose input splits into stride phases."""
    errors = [_recovery_gap(rng, *_divisible_spec(rng)) for _ in range(cases)]
    return _result("recovery_agreement_strided", errors, RECOVERY_TOL,
                   detail=f"{cases} phase-divisible cases")


def check_polyphase(rng, cases) -> CheckResult:
    """Stride-m conv equals its phase sum; stored phase means equal per-phase pooling."""
    errors, mismatched = [], 0
    for _ in range(cases):
        m = int(rng.choice([2, 3]))
        kernel = m * int(rng.integers(1, 3))
        size = kernel + m * int(rng.integers(0, 3))
        spec = ConvSpec(int(rng.integers(1, 4)), int(rng.integers(1, 4)), kernel, stride=m)
        a = rng.standard_normal((2, spec.in_channels, size, size))
        weight = rng.standard_normal(spec.weight_shape)
        direct = conv2d_forward(a, spec, weight)
        phased = polyphase_conv2d(a, spec, weight)
        errors.append(float(np.max(np.abs(direct - phased)) / max(np.max(np.abs(direct)), 1e-300)))

        record = XconvRecord.fresh(spec.in_channels, spec.out_channels, m * m)
        xconv_update_pre_means(a, record, m, momentum=1.0)
        for index, mean in enumerate(record.pre_means):
            r, s = divmod(index, m)
            if not np.array_equal(mean, avg_pool(np.ascontiguousarray(a[:, :, r::m, s::m]))):
                mismatched += 1
    failed = sum(error >= POLYPHASE_TOL for error in errors) + mismatched
    return _result("polyphase", errors, POLYPHASE_TOL,
                   detail=f"{mismatched} phase-mean mismatches", failed=failed)


def check_recovery_under_drift(rng, seeds, steps=400, sigma=0.5) -> CheckResult:
    """After the weights move, the recovered mean tracks the truth and classic BN's does not.

    A one-conv net sees the same full batch ``steps`` times so both running
    means converge, then its weights get Gaussian noise of std ``sigma``.
    """
    errors, ratios = [], []
    for _ in range(seeds):
        spec = ConvSpec(3, 2, 3, padding=2)
        conv = Conv2d.initialized("conv", spec, rng)
        xconv = XconvBatchNorm("xconv", conv)
        classic = BatchNorm2d("bn", spec.out_channels, task_specific=False)
        x = rng.standard_normal((8, 2, 6, 6)) + rng.uniform(0.5, 1.5, size=(1, 2, 1, 1))
        for _ in range(steps):
            out = conv.forward(x, train=True)
            xconv.forward(out, train=True)
            classic.forward(out, train=True)
        conv.assign("weight", conv.weight + sigma * rng.standard_normal(spec.weight_shape))
        xconv.recover()
        truth = avg_pool(conv2d_forward(x, spec, conv.weight))
        recovered = float(np.linalg.norm(xconv.stored_mean(0) - truth))
        stale = float(np.linalg.norm(classic.stored_mean(0) - truth))
        errors.append(recovered)
        ratios.append(stale >= DRIFT_RATIO * recovered)
    failed = sum(error >= DRIFT_TOL for error in errors) + ratios.count(False)
    return _result("recovery_under_drift", errors, DRIFT_TOL,
                   detail=(f"classic BN error below {DRIFT_RATIO:g}x"
                           f" on {ratios.count(False)} seeds"),
                   failed=failed)


def check_same_padding(rng, cases) -> CheckResult:
    """Relative error of the exact-mode formula when padding is K // 2 instead of K - 1."""
    errors = []
    for _ in range(cases):
        spec = ConvSpec(4, 3, 3, padding=1)
        x = rng.standard_normal((4, 3, 8, 8)) + 1.0
        weight = rng.standard_normal(spec.weight_shape)
        truth = avg_pool(conv2d_forward(x, spec, weight))
        estimate = exact_mode_mean(spec, weight, avg_pool(x), 8, 8)
        errors.append(float(np.linalg.norm(estimate - truth) / np.linalg.norm(truth)))
    result = CheckResult("same_padding_error", len(errors), 0, float(max(errors, default=0.0)),
                         float("inf"), informational=True,
                         detail=f"mean relative error {np.mean(errors):.3e}")
    return result


# -- gradients --------------------------------------------------------------------

def _relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-6)
    return float(np.linalg.norm(analytic - numeric) / scale)


def spot_check(loss, array, analytic, rng, coords=FD_COORDS, step=FD_STEP) -> float:
    """Central differences of ``loss()`` on a random subset of ``array``'s entries.

    ``array`` is perturbed in place and restored.
    """
    picks = rng.choice(array.size, size=min(coords, array.size), replace=False)
    numeric, exact = [], []
    for flat in picks:
        index = np.unravel_index(flat, array.shape)
        saved = array[index]
        array[index] = saved + step
        plus = loss()
        array[index] = saved - step
        minus = loss()
        array[index] = saved
        numeric.append((plus - minus) / (2.0 * step))
        exact.append(analytic[index])
    return _relative_error(np.array(exact), np.array(numeric))


def _away_from_zero(rng, shape, gap=0.01):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * gap


def _conv_case(rng):
    kernel = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, kernel))
    size = (int(rng.integers(3, 5)) - 1) * stride + kernel - 2 * padding
    spec = ConvSpec(int(rng.integers(1, 4)), int(rng.integers(1, 4)), kernel, stride, padding,
                    has_bias=bool(rng.integers(0, 2)))
    return spec, size


def gradient_conv(rng) -> float:
    spec, size = _conv_case(rng)
    conv = Conv2d.initialized("conv", spec, rng)
    if conv.bias is not None:
        conv.bias[...] = rng.standard_normal(spec.out_channels)
    x = rng.standard_normal((2, spec.in_channels, size, size))
    probe = rng.standard_normal(conv.forward(x, train=False).shape)
    conv.forward(x, train=True)
    grad_input = conv.backward(probe)

    def loss():
        return float(np.sum(conv.forward(x, train=False) * probe))

    errors = [spot_check(loss, x, grad_input, rng)]
    errors += [spot_check(loss, conv.parameters()[name], grad, rng)
               for name, grad in conv.gradients().items()]
    return max(errors)


def gradient_bn(rng) -> float:
    channels = int(rng.integers(1, 4))
    norm = BatchNorm2d("bn", channels, task_specific=False)
    record = norm.record()
    record.gamma[...] = rng.uniform(0.5, 1.5, channels)
    record.beta[...] = rng.standard_normal(channels)
    x = rng.standard_normal((3, channels, 3, 3)) * 2.0 + 1.0
    probe = rng.standard_normal(x.shape)
    norm.forward(x, train=True)
    grad_input = norm.backward(probe)

    def loss():
        return float(np.sum(norm.forward(x, train=True) * probe))

    grads = norm.gradients()
    return max(spot_check(loss, x, grad_input, rng),
               spot_check(loss, record.gamma, grads["gamma"], rng),
               spot_check(loss, record.beta, grads["beta"], rng))


def gradient_xconv(rng) -> float:
    """Conv followed by its Xconv BN, checked end to end."""
    if rng.integers(0, 2):
        kernel = int(rng.integers(1, 4))
        spec, size = ConvSpec(2, 2, kernel, padding=int(rng.integers(0, kernel))), 4
    else:
        spec, size = ConvSpec(2, 2, 2, stride=2), 2 * int(rng.integers(2, 4))
    conv = Conv2d.initialized("conv", spec, rng)
    norm = XconvBatchNorm("xconv", conv)
    record = norm.record()
    record.gamma[...] = rng.uniform(0.5, 1.5, spec.out_channels)
    x = rng.standard_normal((3, spec.in_channels, size, size))

    def forward():
        return norm.forward(conv.forward(x, train=True), train=True)

    probe = rng.standard_normal(forward().shape)
    forward()
    grad_input = conv.backward(norm.backward(probe))
    grad_weight = conv.gradients()["weight"]
    grad_gamma = norm.gradients()["gamma"]

    def loss():
        return float(np.sum(forward() * probe))

    return max(spot_check(loss, x, grad_input, rng),
               spot_check(loss, conv.weight, grad_weight, rng),
               spot_check(loss, record.gamma, grad_gamma, rng))


def gradient_relu(rng) -> float:
    relu = ReLU("relu")
    x = _away_from_zero(rng, (3, 2, 3, 3))
    probe = rng.standard_normal(x.shape)
    relu.forward(x, train=True)
    grad_input = relu.backward(probe)
    return spot_check(lambda: float(np.sum(relu.forward(x, train=False) * probe)), x,
                      grad_input, rng)


def gradient_linear(rng) -> float:
    head = Linear.initialized("head", int(rng.integers(2, 8)), int(rng.integers(2, 5)),
                              "uniform", rng)
    head.bias[...] = rng.standard_normal(head.bias.shape)
    x = rng.standard_normal((4, head.weight.shape[1]))
    probe = rng.standard_normal((4, head.weight.shape[0]))
    head.forward(x, train=True)
    grad_input = head.backward(probe)

    def loss():
        return float(np.sum(head.forward(x, train=False) * probe))

    grads = head.gradients()
    return max(spot_check(loss, x, grad_input, rng),
               spot_check(loss, head.weight, grads["weight"], rng),
               spot_check(loss, head.bias, grads["bias"], rng))


def gradient_softmax_ce(rng) -> float:
    classes = int(rng.integers(2, 6))
    logits = rng.standard_normal((5, classes)) * 2.0
    labels = rng.integers(0, classes, size=5)
    _, grad = softmax_cross_entropy(logits, labels)
    return spot_check(lambda: softmax_cross_entropy(logits, labels)[0], logits, grad, rng)


def gradient_flatten(rng) -> float:
    flatten = Flatten("flatten")
    x = rng.standard_normal((2, 3, 2, 2))
    probe = rng.standard_normal((2, 12))
    flatten.forward(x, train=True)
    grad_input = flatten.backward(probe)
    return spot_check(lambda: float(np.sum(flatten.forward(x, train=False) * probe)), x,
                      grad_input, rng)


GRADIENT_CHECKS = {
    "conv": gradient_conv,
    "bn": gradient_bn,
    "xconv": gradient_xconv,
    "relu": gradient_relu,
    "linear": gradient_linear,
    "softmax_ce": gradient_softmax_ce,
    "flatten": gradient_flatten,
}


def check_gradients(rng, cases) -> list[CheckResult]:
    return [_result(f"gradient_{name}", [check(rng) for _ in range(cases)], GRADIENT_TOL)
            for name, check in GRADIENT_CHECKS.items()]


# -- metrics ------------------------------------------------------------------------

REFERENCE_ROWS = [(1, 1, 0.9), (1, 2, 0.8), (1, 3, 0.7), (2, 2, 0.9), (2, 3, 0.85),
                  (3, 3, 0.95)]


def brute_force_metrics(values, num_tasks):
    """ACC and FGT by explicit loops over a 1-based {(i, j): accuracy} table."""
    total = 0.0
    for i in range(1, num_tasks + 1):
        total += values[(i, num_tasks)]
    forgetting = 0.0
    for i in range(1, num_tasks):
        largest = 0.0
        for j in range(i, num_tasks + 1):
            largest = max(largest, values[(i, j)] - values[(i, num_tasks)])
        forgetting += largest
    return total / num_tasks, (forgetting / (num_tasks - 1) if num_tasks > 1 else 0.0)


def check_metrics(rng, cases) -> CheckResult:
    reference = AccuracyMatrix.from_rows(3, REFERENCE_ROWS)
    errors = [abs(acc(reference) - 2.5 / 3.0), abs(fgt(reference) - 0.125)]
    for _ in range(cases):
        num_tasks = int(rng.integers(2, 7))
        values = {(i, j): float(rng.uniform())
                  for j in range(1, num_tasks + 1) for i in range(1, j + 1)}
        matrix = AccuracyMatrix.from_rows(num_tasks, [(i, j, v) for (i, j), v in values.items()])
        expected_acc, expected_fgt = brute_force_metrics(values, num_tasks)
        errors.append(max(abs(acc(matrix) - expected_acc), abs(fgt(matrix) - expected_fgt)))
    return _result("metrics_oracle", errors, METRIC_TOL)


# -- suite --------------------------------------------------------------------------

def run_suite(cases=200, seed=0) -> list[CheckResult]:
    """Run every check; ``cases`` sizes the invariance check and the others scale from it."""
    rngs = [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(9)]
    share = max(cases // 4, 1)
    results = [
        check_mean_invariance(rngs[0], max(cases, 2)),
        check_recovery_agreement(rngs[1], max(cases // 2, 1)),
        check_polyphase(rngs[2], share),
        check_recovery_under_drift(rngs[3], share),
        *check_gradients(rngs[4], share),
        check_metrics(rngs[5], max(cases // 2, 1)),
        check_same_padding(rngs[6], share),
        check_mean_invariance_literal(rngs[7], max(cases, 2)),
        check_recovery_agreement_strided(rngs[8], share),
    ]
    for result in results:
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, "%s: %d cases, %d failures, max error %.3e", result.name,
                   result.cases, result.failures, result.max_error)
    return results


def suite_report(results, cases, seed) -> dict:
    failures = [result.name for result in results if not result.passed]
    return {
        "cases": cases,
        "seed": seed,
        "checks": [result.to_dict() for result in results],
        "failed_checks": failures,
        "passed": not failures,
    }
