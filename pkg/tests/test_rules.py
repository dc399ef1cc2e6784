"""Per-operator multiplier semantics, checked through compiled artifacts."""

import numpy as np
import pytest

import graphlift as gl
from graphlift import (GraphModel, Node, ShapeError, TensorValue,
                       UnsupportedOp, ValueSpec, validate_model)
from graphlift.executor import execute

F64 = "float64"


def build(name, input_shape, nodes, initializers, head, head_shape):
    model = GraphModel(name, [ValueSpec("x", F64, input_shape)],
                       [ValueSpec(head, F64, head_shape)],
                       initializers, nodes)
    validate_model(model)
    return model


def graph_multipliers(model, x, refs, output_index=0):
    art = gl.compile_explainer(model, refs, output_index=output_index,
                               expose_multipliers=True)
    outs, _ = execute(art.model,
                      {art.metadata["input_name"]: np.asarray(x, np.float64)})
    return outs[art.metadata["multipliers_output"]]


def selector(rows, col):
    sel = np.zeros((rows, 1))
    sel[col, 0] = 1.0
    return TensorValue(sel, F64)


def test_sigmoid_fallback_is_quarter_at_zero_delta():
    model = build("sig", (-1, 1), [Node("Sigmoid", "s", ["x"], ["y"])],
                  {}, "y", (-1, 1))
    m = graph_multipliers(model, [[0.0]], np.zeros((1, 1)))
    assert m[0, 0] == 0.25


def test_sigmoid_secant_vs_fallback_eps_boundary():
    model = build("sig", (-1, 1), [Node("Sigmoid", "s", ["x"], ["y"])],
                  {}, "y", (-1, 1))

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    # just above the threshold the secant ratio is used
    wide = 2e-6
    m = graph_multipliers(model, [[wide]], np.zeros((1, 1)))
    assert m[0, 0] == (sig(wide) - sig(0.0)) / wide
    # just below it the exact derivative takes over
    narrow = 5e-7
    m = graph_multipliers(model, [[narrow]], np.zeros((1, 1)))
    y = sig(narrow)
    assert m[0, 0] == y * (1.0 - y)


def test_relu_secant_and_dead_zero():
    model = build("relu", (-1, 2), [Node("Relu", "r", ["x"], ["y"])],
                  {}, "y", (-1, 2))
    m = graph_multipliers(model, [[1.0, 0.0]], np.array([[-1.0, 0.0]]),
                          output_index=0)
    # secant over the kink: (1-0)/(1-(-1)) = 0.5
    assert m[0, 0] == 0.5
    m = graph_multipliers(model, [[1.0, 0.0]], np.array([[-1.0, 0.0]]),
                          output_index=1)
    # zero delta at an inactive unit falls back to the one-sided slope 0
    assert m[0, 1] == 0.0


def test_maxpool_hand_example_routes_to_first_max():
    nodes = [Node("GlobalMaxPool", "p", ["x"], ["pool"]),
             Node("Reshape", "r", ["pool"], ["y"], {"shape": [-1, 1]})]
    model = build("mx", (-1, 1, 1, 2), nodes, {}, "y", (-1, 1))
    x = np.array([[[[3.0, 1.0]]]])
    refs = np.array([[[[0.0, 2.0]]]])
    m = graph_multipliers(model, x, refs)
    assert np.allclose(m.ravel(), [1.0 / 3.0, 0.0], atol=1e-15)


def test_maxpool_tie_parity_with_oracle():
    nodes = [Node("MaxPool", "p", ["x"], ["pool"],
                  {"kernel_shape": [2, 2], "strides": [2, 2],
                   "pads": [0, 0, 0, 0]}),
             Node("Reshape", "r", ["pool"], ["y"], {"shape": [-1, 4]})]
    model = build("tie", (-1, 1, 4, 4), nodes, {}, "y", (-1, 4))
    # exact ties inside every window force the first-of-max choice
    x = np.array([[[[2.0, 2.0, 1.0, 2.0],
                    [2.0, 2.0, 2.0, 2.0],
                    [0.0, 1.0, 3.0, 3.0],
                    [1.0, 0.0, 3.0, 3.0]]]])
    refs = np.tile(x, (3, 1, 1, 1)) * np.array([0.0, 0.5, -1.0]).reshape(3, 1, 1, 1)
    for k in range(4):
        got = graph_multipliers(model, x, refs, output_index=k)
        _, want = gl.deeplift_oracle(model, x, refs, output_index=k,
                                     return_multipliers=True)
        assert np.allclose(got, want, atol=1e-15), k


def test_maxpool_zero_delta_coordinates_get_zero():
    nodes = [Node("GlobalMaxPool", "p", ["x"], ["pool"]),
             Node("Reshape", "r", ["pool"], ["y"], {"shape": [-1, 1]})]
    model = build("mz", (-1, 1, 1, 2), nodes, {}, "y", (-1, 1))
    x = np.array([[[[3.0, 1.0]]]])
    refs = np.array([[[[3.0, 1.0]]]])  # x == r everywhere
    m = graph_multipliers(model, x, refs)
    assert np.all(m == 0.0)


def test_mul_symmetric_split_hand_example():
    nodes = [Node("MatMul", "a", ["x", "sa"], ["va"]),
             Node("MatMul", "b", ["x", "sb"], ["vb"]),
             Node("Mul", "m", ["va", "vb"], ["y"])]
    inits = {"sa": selector(2, 0), "sb": selector(2, 1)}
    model = build("mul", (-1, 2), nodes, inits, "y", (-1, 1))
    art = gl.compile_explainer(model, np.array([[1.0, 0.0]]))
    res = gl.explain(art, [[3.0, 2.0]])
    assert np.allclose(res.phi.array.ravel(), [2.0, 4.0], atol=1e-15)
    assert res.phi.array.sum() == 6.0  # equals the output delta exactly
    assert res.residual == 0.0


def test_mul_duplicate_operand_is_exact_square_rule():
    # f(x) = x*x: merged slot gradients give phi = x^2 - r^2 exactly
    nodes = [Node("Mul", "sq", ["x", "x"], ["y"])]
    model = build("square", (-1, 1), nodes, {}, "y", (-1, 1))
    x, r = 1.7, 0.4
    art = gl.compile_explainer(model, np.array([[r]]))
    res = gl.explain(art, [[x]])
    assert res.phi.array[0, 0] == x * x - r * r


def test_avgpool_padded_divisors_match_oracle():
    nodes = [Node("AveragePool", "p", ["x"], ["pool"],
                  {"kernel_shape": [3, 3], "strides": [2, 2],
                   "pads": [1, 1, 1, 1], "count_include_pad": 0}),
             Node("Flatten", "f", ["pool"], ["flat"], {"axis": 1}),
             Node("MatMul", "h", ["flat", "w"], ["y"])]
    rng = np.random.default_rng(3)
    inits = {"w": TensorValue(rng.normal(size=(18, 2)), F64)}
    model = build("avg", (-1, 2, 5, 5), nodes, inits, "y", (-1, 2))
    x = rng.normal(size=(1, 2, 5, 5))
    refs = rng.normal(size=(4, 2, 5, 5))
    got = graph_multipliers(model, x, refs, output_index=1)
    _, want = gl.deeplift_oracle(model, x, refs, output_index=1,
                                 return_multipliers=True)
    assert np.allclose(got, want, atol=1e-15)


def test_softmax_multipliers_recover_exact_jacobian_at_equal_refs():
    nodes = [Node("Softmax", "s", ["x"], ["y"], {"axis": -1})]
    model = build("soft", (-1, 3), nodes, {}, "y", (-1, 3))
    x = np.array([[0.3, -0.2, 0.9]])
    got = graph_multipliers(model, x, x.copy(), output_index=1)
    y = np.exp(x) / np.exp(x).sum()
    want = y[0, 1] * (np.eye(3)[1] - y[0])  # softmax jacobian row
    assert np.allclose(got.ravel(), want, atol=1e-15)


def test_batchnorm_factor_bakes_to_exact_one():
    net = gl.micro_net("batchnorm")
    art = gl.compile_explainer(net.model, net.references)
    baked = [v.array for k, v in art.model.initializers.items()
             if "bnback" in k]
    assert baked and all(np.all(arr == 1.0) for arr in baked)


def test_concat_routes_segments_back_to_branches():
    net = gl.micro_net("concat")
    got = graph_multipliers(net.model, net.sample, net.references,
                            output_index=1)
    _, want = gl.deeplift_oracle(net.model, net.sample, net.references,
                                 output_index=1, return_multipliers=True)
    assert np.allclose(got, want, atol=1e-15)


def reject(name, input_shape, nodes, inits, head, head_shape,
           refs=None, errors=UnsupportedOp):
    model = build(name, input_shape, nodes, inits, head, head_shape)
    if refs is None:
        refs = np.zeros((2,) + tuple(input_shape[1:]))
    with pytest.raises(errors):
        gl.compile_explainer(model, np.asarray(refs, np.float64))


def test_division_by_differentiable_value_rejected():
    reject("div", (-1, 2),
           [Node("Div", "d", ["x", "x"], ["y"])], {}, "y", (-1, 2),
           refs=np.ones((2, 2)))


def test_gemm_transposed_data_rejected():
    # transposing the batch axis can never be compiled; depending on the
    # surrounding shapes either the rule or the shape checker refuses first
    w = TensorValue(np.zeros((2, 2)), F64)
    reject("ta", (-1, 2),
           [Node("Gemm", "g", ["x", "w"], ["y"], {"transA": 1})],
           {"w": w}, "y", (-1, 2), errors=(UnsupportedOp, ShapeError))


def test_matmul_differentiable_weight_rejected():
    nodes = [Node("Transpose", "t", ["x"], ["xt"], {"perm": [1, 0]}),
             Node("MatMul", "m", ["x", "xt"], ["y"])]
    reject("xx", (1, 2), nodes, {}, "y", (1, 1), refs=np.ones((1, 2)))


def test_softmax_on_non_last_axis_rejected():
    reject("ax", (-1, 2),
           [Node("Softmax", "s", ["x"], ["y"], {"axis": 0})],
           {}, "y", (-1, 2))


def test_reduction_over_batch_axis_rejected():
    reject("red", (-1, 2),
           [Node("ReduceSum", "r", ["x"], ["s"], {"axes": [0], "keepdims": 1}),
            Node("Add", "a", ["x", "s"], ["y"])],
           {}, "y", (-1, 2))


def test_concat_on_batch_axis_rejected():
    reject("cat", (-1, 2),
           [Node("Concat", "c", ["x", "x"], ["wide"], {"axis": 0}),
            Node("ReduceSum", "r", ["wide"], ["y"], {"axes": [1], "keepdims": 1})],
           {}, "y", (-1, 1))


def test_tile_on_differentiable_path_rejected():
    w = TensorValue(np.zeros((1, 4)), F64)
    reject("tile", (-1, 2),
           [Node("Tile", "t", ["x"], ["wide"], {"repeats": [1, 2]}),
            Node("Add", "a", ["wide", "w"], ["y"])],
           {"w": w}, "y", (-1, 4))


def test_split_on_differentiable_path_rejected():
    reject("split", (-1, 4),
           [Node("Split", "s", ["x"], ["lo", "hi"], {"axis": 1, "split": [2, 2]}),
            Node("Add", "a", ["lo", "hi"], ["y"])],
           {}, "y", (-1, 2))
