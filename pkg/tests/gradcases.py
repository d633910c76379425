"""Finite-difference cases covering every primitive in the catalog.

Each case builds, from a seeded generator, a starting point and a scalar
function of one tensor; the other operands are frozen random constants and
the output is contracted against a fixed random projection.
"""

import numpy as np

from maskx import autograd as ag


def _project(out: ag.Tensor, rng: np.random.Generator) -> ag.Tensor:
    weights = ag.constant(rng.standard_normal(out.shape))
    return ag.sum_all(ag.mul(out, weights))


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.copysign(margin, x), x)


def case_add(rng):
    other = ag.constant(rng.standard_normal((3, 4)))
    return rng.standard_normal((3, 4)), lambda x: _project(ag.add(x, other), np.random.default_rng(1))


def case_mul(rng):
    other = ag.constant(rng.standard_normal((3, 4)))
    return rng.standard_normal((3, 4)), lambda x: _project(ag.mul(x, other), np.random.default_rng(1))


def case_matmul_left(rng):
    b = ag.constant(rng.standard_normal((2, 4, 3)))
    return rng.standard_normal((5, 4)), lambda x: _project(ag.matmul(x, b), np.random.default_rng(1))


def case_matmul_right(rng):
    a = ag.constant(rng.standard_normal((2, 5, 4)))
    return rng.standard_normal((4, 3)), lambda x: _project(ag.matmul(a, x), np.random.default_rng(1))


def case_matmul_batched(rng):
    b = ag.constant(rng.standard_normal((2, 4, 3)))
    return rng.standard_normal((2, 3, 4)), lambda x: _project(ag.matmul(x, b), np.random.default_rng(1))


def case_conv2d_input(rng):
    w = ag.constant(rng.standard_normal((4, 2, 3, 3)))
    b = ag.constant(rng.standard_normal(4))
    return rng.standard_normal((2, 2, 6, 6)), lambda x: _project(ag.conv2d(x, w, b, stride=2, pad=1), np.random.default_rng(1))


def case_conv2d_weight(rng):
    x = ag.constant(rng.standard_normal((2, 2, 5, 5)))
    b = ag.constant(rng.standard_normal(3))
    return rng.standard_normal((3, 2, 3, 3)), lambda w: _project(ag.conv2d(x, w, b, stride=1, pad=1), np.random.default_rng(1))


def case_conv2d_bias(rng):
    x = ag.constant(rng.standard_normal((2, 2, 5, 5)))
    w = ag.constant(rng.standard_normal((3, 2, 3, 3)))
    return rng.standard_normal(3), lambda b: _project(ag.conv2d(x, w, b, stride=2, pad=0), np.random.default_rng(1))


def case_relu(rng):
    return _away_from_zero(rng, (4, 5)), lambda x: _project(ag.relu(x), np.random.default_rng(1))


def case_leaky_relu(rng):
    return _away_from_zero(rng, (4, 5)), lambda x: _project(ag.leaky_relu(x, 0.01), np.random.default_rng(1))


def case_sigmoid(rng):
    return 3 * rng.standard_normal((4, 5)), lambda x: _project(ag.sigmoid(x), np.random.default_rng(1))


def case_concat(rng):
    other = ag.constant(rng.standard_normal((3, 2)))
    return rng.standard_normal((3, 4)), lambda x: _project(ag.concat([other, x, other], axis=1), np.random.default_rng(1))


def case_tile(rng):
    return rng.standard_normal((2, 1, 5)), lambda x: _project(ag.tile(x, axis=1, count=4), np.random.default_rng(1))


def case_bilinear_crop(rng):
    boxes = [(0.3, 0.7, 4.6, 5.1), (1.2, 0.0, 6.0, 3.3), (-0.5, 2.0, 3.0, 7.5)]
    index = [0, 1, 1]
    return rng.standard_normal((2, 3, 6, 6)), lambda x: _project(ag.bilinear_crop(x, boxes, index, 4), np.random.default_rng(1))


def case_flatten(rng):
    return rng.standard_normal((2, 3, 4)), lambda x: _project(ag.flatten(x), np.random.default_rng(1))


def case_reshape(rng):
    return rng.standard_normal((2, 6)), lambda x: _project(ag.reshape(x, (3, 4)), np.random.default_rng(1))


def case_cast(rng):
    return rng.standard_normal((3, 4)), lambda x: _project(ag.cast(x, np.float64), np.random.default_rng(1))


def case_transpose(rng):
    return rng.standard_normal((2, 3, 4)), lambda x: _project(ag.transpose(x, (2, 0, 1)), np.random.default_rng(1))


def case_slice(rng):
    return rng.standard_normal((5, 4)), lambda x: _project(ag.slice_axis(x, 0, 1, 4), np.random.default_rng(1))


def case_linear_input(rng):
    w = ag.constant(rng.standard_normal((3, 4)))
    b = ag.constant(rng.standard_normal(3))
    return rng.standard_normal((5, 4)), lambda x: _project(ag.linear(x, w, b), np.random.default_rng(1))


def case_linear_weight(rng):
    x = ag.constant(rng.standard_normal((5, 4)))
    b = ag.constant(rng.standard_normal(3))
    return rng.standard_normal((3, 4)), lambda w: _project(ag.linear(x, w, b), np.random.default_rng(1))


def case_linear_bias(rng):
    x = ag.constant(rng.standard_normal((5, 4)))
    w = ag.constant(rng.standard_normal((3, 4)))
    return rng.standard_normal(3), lambda b: _project(ag.linear(x, w, b), np.random.default_rng(1))


def case_sum(rng):
    return rng.standard_normal((3, 3)), lambda x: ag.mul(ag.sum_all(x), ag.sum_all(x))


def case_bce_with_logits(rng):
    target = rng.uniform(size=(3, 4, 5))
    weight = (rng.uniform(size=(3, 4, 5)) < 0.5).astype(float)
    weight[0, 0, 0] = 1
    return 2 * rng.standard_normal((3, 4, 5)), lambda x: ag.compute_loss("bce_with_logits", x, target, weight)


def case_softmax_ce(rng):
    labels = rng.integers(0, 5, size=6)
    return 2 * rng.standard_normal((6, 5)), lambda x: ag.compute_loss("softmax_ce", x, labels)


def case_smooth_l1(rng):
    target = rng.standard_normal((4, 6))
    weight = (rng.uniform(size=(4, 6)) < 0.7).astype(float)
    weight[0, 0] = 1
    point = target + _away_from_zero(rng, (4, 6), margin=0.05)
    point = np.where(np.abs(np.abs(point - target) - 1.0) < 0.05, point + 0.1, point)
    return point, lambda x: ag.compute_loss("smooth_l1", x, target, weight)


CASES = {name[len("case_"):]: fn for name, fn in globals().items() if name.startswith("case_")}

# every registered primitive kind must be exercised by some case; stop_gradient
# is excluded because its analytic gradient is zero by construction and is
# checked for exactness instead
KIND_OF_CASE = {
    "add": "add", "mul": "mul", "matmul_left": "matmul", "matmul_right": "matmul", "matmul_batched": "matmul",
    "conv2d_input": "conv2d", "conv2d_weight": "conv2d", "conv2d_bias": "conv2d", "relu": "relu",
    "leaky_relu": "leaky_relu", "sigmoid": "sigmoid", "concat": "concat", "tile": "tile",
    "bilinear_crop": "bilinear_crop", "flatten": "flatten", "reshape": "reshape", "transpose": "transpose", "cast": "cast",
    "slice": "slice", "linear_input": "linear", "linear_weight": "linear", "linear_bias": "linear",
    "sum": "sum", "bce_with_logits": "bce_with_logits",
    "softmax_ce": "softmax_ce", "smooth_l1": "smooth_l1",
}


def max_error(name: str, points: int = 20, seed: int = 0) -> float:
    worst = 0.0
    for k in range(points):
        point, fn = CASES[name](np.random.default_rng([seed, k]))
        worst = max(worst, ag.finite_diff_check(fn, point))
    return worst
