"""Kernel semantics of the reference interpreter."""

import numpy as np
import pytest

from graphlift import (GraphModel, Node, NumericError, ShapeError,
                       TensorValue, ValueSpec)
from graphlift.executor import execute, run_kernel


def kernel(op, arrays, attrs=None, n_outputs=1):
    out = run_kernel(op, list(arrays), attrs, n_outputs)
    return out[0] if n_outputs == 1 else out


RNG = np.random.default_rng(5)


def test_matmul_gemm_against_numpy():
    a = RNG.normal(size=(2, 3))
    w = RNG.normal(size=(3, 4))
    assert np.allclose(kernel("MatMul", [a, w]), a @ w)
    c = RNG.normal(size=(4,))
    got = kernel("Gemm", [a, w.T.copy(), c],
                 {"alpha": 0.5, "beta": 2.0, "transB": 1})
    assert np.allclose(got, 0.5 * (a @ w) + 2.0 * c)


def test_conv_matches_direct_loop():
    x = RNG.normal(size=(2, 3, 6, 6))
    w = RNG.normal(size=(4, 3, 3, 3))
    b = RNG.normal(size=(4,))
    attrs = {"kernel_shape": [3, 3], "strides": [2, 2], "pads": [1, 1, 1, 1]}
    got = kernel("Conv", [x, w, b], attrs)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 4, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = padded[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            want[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    assert np.allclose(got, want)


def test_pool_kernels():
    x = RNG.normal(size=(1, 2, 4, 4))
    got = kernel("MaxPool", [x], {"kernel_shape": [2, 2], "strides": [2, 2],
                                  "pads": [0, 0, 0, 0]})
    want = x.reshape(1, 2, 2, 2, 2, 2).max(axis=(3, 5))
    assert np.allclose(got, want)
    got = kernel("AveragePool", [x], {"kernel_shape": [2, 2],
                                      "strides": [2, 2],
                                      "pads": [0, 0, 0, 0]})
    want = x.reshape(1, 2, 2, 2, 2, 2).mean(axis=(3, 5))
    assert np.allclose(got, want)
    assert np.allclose(kernel("GlobalMaxPool", [x]),
                       x.max(axis=(2, 3), keepdims=True))
    assert np.allclose(kernel("GlobalAveragePool", [x]),
                       x.mean(axis=(2, 3), keepdims=True))


def test_average_pool_ignores_padding_in_divisor():
    x = np.ones((1, 1, 2, 2))
    got = kernel("AveragePool", [x], {"kernel_shape": [2, 2],
                                      "strides": [2, 2],
                                      "pads": [1, 1, 1, 1],
                                      "count_include_pad": 0})
    # every window holds exactly one real pixel
    assert np.allclose(got, np.ones((1, 1, 2, 2)))


def test_activation_kernels():
    x = RNG.normal(size=(3, 4))
    assert np.allclose(kernel("Relu", [x]), np.maximum(x, 0))
    assert np.allclose(kernel("Sigmoid", [x]), 1 / (1 + np.exp(-x)))
    assert np.allclose(kernel("Tanh", [x]), np.tanh(x))
    assert np.allclose(kernel("Exp", [x]), np.exp(x))
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    assert np.allclose(kernel("Softmax", [x], {"axis": -1}),
                       e / e.sum(axis=-1, keepdims=True))


def test_batchnorm_kernel():
    x = RNG.normal(size=(2, 3, 2, 2))
    scale, shift = RNG.normal(size=(3,)), RNG.normal(size=(3,))
    mean, var = RNG.normal(size=(3,)), RNG.uniform(0.5, 2.0, size=(3,))
    got = kernel("BatchNormalization", [x, scale, shift, mean, var],
                 {"epsilon": 1e-5})
    r = lambda v: v.reshape(1, 3, 1, 1)
    want = r(scale) * (x - r(mean)) / np.sqrt(r(var) + 1e-5) + r(shift)
    assert np.allclose(got, want)


def test_movement_and_selection_kernels():
    x = RNG.normal(size=(2, 6))
    assert np.allclose(kernel("Reshape", [x], {"shape": [3, 4]}),
                       x.reshape(3, 4))
    assert np.allclose(kernel("Reshape", [x], {"shape": [-1, 4]}),
                       x.reshape(3, 4))
    assert np.allclose(kernel("Flatten", [x.reshape(2, 3, 2)], {"axis": 1}),
                       x.reshape(2, 6))
    assert np.allclose(kernel("Transpose", [x], {"perm": [1, 0]}), x.T)
    assert np.allclose(kernel("Tile", [x], {"repeats": [2, 1]}),
                       np.tile(x, (2, 1)))
    lo, hi = kernel("Split", [x], {"axis": 1, "split": [2, 4]}, n_outputs=2)
    assert np.allclose(lo, x[:, :2]) and np.allclose(hi, x[:, 2:])
    assert np.allclose(kernel("Concat", [x, x], {"axis": 0}),
                       np.concatenate([x, x]))
    y = RNG.normal(size=(2, 6))
    mask = kernel("Greater", [x, y])
    assert mask.dtype == bool and np.array_equal(mask, x > y)
    assert np.allclose(kernel("Where", [mask, x, y]), np.where(x > y, x, y))


def test_reduce_and_constant_kernels():
    x = RNG.normal(size=(2, 3, 4))
    assert np.allclose(kernel("ReduceSum", [x], {"axes": [1], "keepdims": 1}),
                       x.sum(axis=1, keepdims=True))
    assert np.allclose(kernel("ReduceMean", [x], {"axes": [2], "keepdims": 0}),
                       x.mean(axis=2))
    c = kernel("Constant", [], {"dtype": "float64", "shape": [2, 2],
                                "value": [1.0, 2.0, 3.0, 4.0]})
    assert c.dtype == np.float64
    assert np.array_equal(c, [[1.0, 2.0], [3.0, 4.0]])


def small_model():
    w = TensorValue(RNG.normal(size=(3, 2)).astype(np.float32))
    return GraphModel("m", [ValueSpec("x", "float32", (-1, 3))],
                      [ValueSpec("y", "float32", (-1, 2))], {"w": w},
                      [Node("MatMul", "mm", ["x", "w"], ["h"]),
                       Node("Relu", "act", ["h"], ["y"])])


def test_execute_returns_declared_outputs_only():
    model = small_model()
    x = RNG.normal(size=(4, 3)).astype(np.float32)
    outs, values = execute(model, {"x": x})
    assert set(outs) == {"y"} and values is None
    outs, values = execute(model, {"x": x}, capture=True)
    assert {"x", "w", "h", "y"} <= set(values)


def test_execute_rejects_missing_and_misshaped_feeds():
    model = small_model()
    with pytest.raises(ShapeError):
        execute(model, {})
    with pytest.raises(ShapeError):
        execute(model, {"x": np.zeros((2, 5), dtype=np.float32)})


def test_numeric_check_flags_non_finite():
    model = GraphModel("d", [ValueSpec("x", "float64", (-1, 2))],
                       [ValueSpec("y", "float64", (-1, 2))],
                       {"z": TensorValue(np.zeros((1, 2)))},
                       [Node("Div", "dv", ["x", "z"], ["y"])])
    with np.errstate(divide="ignore"), pytest.raises(NumericError):
        execute(model, {"x": np.ones((1, 2))}, check_numerics=True)
