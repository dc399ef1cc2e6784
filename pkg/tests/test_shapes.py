"""Static shape inference across the operator table."""

import numpy as np
import pytest

from graphlift import GraphModel, Node, ShapeError, TensorValue, ValueSpec
from graphlift.shapes import broadcast_shapes, infer_graph_shapes, infer_node_shapes


def infer(op, in_shapes, attrs=None, n_outputs=1):
    node = Node(op, "probe", [f"i{k}" for k in range(len(in_shapes))],
                [f"o{k}" for k in range(n_outputs)], attrs or {})
    return infer_node_shapes(node, list(in_shapes))


def test_broadcast_basics():
    assert broadcast_shapes((2, 1, 3), (4, 3)) == (2, 4, 3)
    assert broadcast_shapes((-1, 3), (1, 3)) == (-1, 3)
    with pytest.raises(ShapeError):
        broadcast_shapes((2, 3), (4, 3))


def test_matmul_and_gemm():
    assert infer("MatMul", [(-1, 3), (3, 5)]) == [(-1, 5)]
    assert infer("Gemm", [(2, 3), (5, 3), (5,)], {"transB": 1}) == [(2, 5)]
    with pytest.raises(ShapeError):
        infer("MatMul", [(2, 3), (4, 5)])


def test_conv_stride_and_padding():
    out = infer("Conv", [(1, 3, 16, 16), (4, 3, 3, 3)],
                {"kernel_shape": [3, 3], "strides": [2, 2],
                 "pads": [1, 1, 1, 1]})
    assert out == [(1, 4, 8, 8)]
    with pytest.raises(ShapeError):
        infer("Conv", [(1, 2, 8, 8), (4, 3, 3, 3)], {"kernel_shape": [3, 3]})


def test_pooling_windows():
    attrs = {"kernel_shape": [2, 2], "strides": [2, 2], "pads": [0, 0, 0, 0]}
    assert infer("MaxPool", [(1, 4, 8, 8)], attrs) == [(1, 4, 4, 4)]
    assert infer("AveragePool", [(1, 4, 9, 9)], attrs) == [(1, 4, 4, 4)]
    assert infer("GlobalMaxPool", [(2, 4, 8, 8)]) == [(2, 4, 1, 1)]
    assert infer("GlobalAveragePool", [(2, 4, 8, 8)]) == [(2, 4, 1, 1)]
    with pytest.raises(ShapeError):
        infer("MaxPool", [(1, 4, 2, 2)], {"kernel_shape": [5, 5]})


def test_flatten_keeps_free_batch():
    assert infer("Flatten", [(-1, 3, 4, 4)], {"axis": 1}) == [(-1, 48)]
    assert infer("Flatten", [(2, 3, 4, 4)], {"axis": 2}) == [(6, 16)]


def test_reshape_concrete_and_symbolic():
    assert infer("Reshape", [(2, 6)], {"shape": [3, 4]}) == [(3, 4)]
    assert infer("Reshape", [(2, 6)], {"shape": [-1, 4]}) == [(3, 4)]
    assert infer("Reshape", [(-1, 2, 3)], {"shape": [-1, 6]}) == [(-1, 6)]
    with pytest.raises(ShapeError):
        infer("Reshape", [(2, 6)], {"shape": [5, 2]})
    with pytest.raises(ShapeError):
        infer("Reshape", [(-1, 6)], {"shape": [3, 2]})


def test_transpose_and_concat():
    assert infer("Transpose", [(1, 2, 3, 4)],
                 {"perm": [0, 1, 3, 2]}) == [(1, 2, 4, 3)]
    assert infer("Concat", [(1, 2, 4), (1, 3, 4)], {"axis": 1}) == [(1, 5, 4)]
    with pytest.raises(ShapeError):
        infer("Concat", [(1, 2, 4), (1, 3, 5)], {"axis": 1})


def test_split_tile_and_reduce():
    assert infer("Split", [(10, 4)], {"axis": 0, "split": [5, 5]},
                 n_outputs=2) == [(5, 4), (5, 4)]
    assert infer("Tile", [(1, 4)], {"repeats": [5, 1]}) == [(5, 4)]
    assert infer("ReduceSum", [(2, 3, 4)],
                 {"axes": [1], "keepdims": 1}) == [(2, 1, 4)]
    assert infer("ReduceMean", [(2, 3, 4)],
                 {"axes": [1, 2], "keepdims": 0}) == [(2,)]


def test_elementwise_and_selection():
    assert infer("Add", [(2, 1, 4), (2, 3, 1)]) == [(2, 3, 4)]
    assert infer("Greater", [(2, 3), (2, 3)]) == [(2, 3)]
    assert infer("Where", [(2, 3), (2, 3), (1, 3)]) == [(2, 3)]
    assert infer("Constant", [], {"dtype": "float32", "shape": [1, 4],
                                  "value": [0.0] * 4}) == [(1, 4)]


def test_graph_inference_with_override():
    w = TensorValue(np.zeros((3, 2), dtype=np.float32))
    model = GraphModel("t", [ValueSpec("x", "float32", (-1, 3))],
                       [ValueSpec("y", "float32", (-1, 2))],
                       {"w": w}, [Node("MatMul", "mm", ["x", "w"], ["y"])])
    free = infer_graph_shapes(model)
    assert free["y"] == (-1, 2)
    pinned = infer_graph_shapes(model, {"x": (7, 3)})
    assert pinned["y"] == (7, 2)
