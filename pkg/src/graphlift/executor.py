"""Reference interpreter for the supported operator set.

Every kernel is a pure function of numpy arrays, so repeated execution of the
same model on the same feed is bit-deterministic.  Semantics follow the ONNX
operator definitions for the supported configurations: multidirectional
broadcasting on binary ops, NCHW layout for convolutions and pools, and
average pooling that excludes padding from the divisor.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, UnsupportedOp, ValidationError
from .ir import DTYPES, GraphModel, Node, TensorValue, topological_order

__all__ = ["execute", "eval_node", "run_kernel"]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pair_attrs(attrs, n_spatial):
    kernel = list(attrs["kernel_shape"])
    strides = list(attrs.get("strides", [1] * n_spatial))
    pads = list(attrs.get("pads", [0] * 2 * n_spatial))
    dilations = list(attrs.get("dilations", [1] * n_spatial))
    return kernel, strides, pads, dilations


def _window_views(x, kernel, strides, dilations):
    """(B, C, Ho, Wo, kh, kw) strided view over an already padded NCHW array."""
    b, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = strides
    dh, dw = dilations
    ho = (h - (kh - 1) * dh - 1) // sh + 1
    wo = (w - (kw - 1) * dw - 1) // sw + 1
    sb, sc, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, ho, wo, kh, kw),
        strides=(sb, sc, s2 * sh, s3 * sw, s2 * dh, s3 * dw),
        writeable=False)
    return view


def _conv(x, w, bias, attrs):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("Conv expects 4-D NCHW input and OIHW weights")
    if attrs.get("group", 1) != 1:
        raise UnsupportedOp("Conv with group != 1 is not supported")
    kernel, strides, pads, dilations = _pair_attrs(attrs, 2)
    if tuple(kernel) != w.shape[2:]:
        raise ShapeError(f"kernel_shape {kernel} does not match weights {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"Conv channel mismatch: {x.shape} vs {w.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    view = _window_views(xp, kernel, strides, dilations)
    # contract over (C_in, kh, kw) for every output position and filter
    out = np.einsum("bchwij,ocij->bohw", view, w, optimize=True)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def _max_pool(x, attrs):
    kernel, strides, pads, dilations = _pair_attrs(attrs, 2)
    fill = np.finfo(x.dtype).min
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])),
                constant_values=fill)
    view = _window_views(xp, kernel, strides, dilations)
    return np.ascontiguousarray(view.max(axis=(4, 5)))


def _avg_pool(x, attrs):
    if attrs.get("count_include_pad", 0) != 0:
        raise UnsupportedOp("AveragePool supports count_include_pad=0 only")
    kernel, strides, pads, dilations = _pair_attrs(attrs, 2)
    if dilations != [1, 1]:
        raise UnsupportedOp("AveragePool with dilations is not supported")
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])))
    ones = np.pad(np.ones(x.shape[2:], dtype=x.dtype),
                  ((pads[0], pads[2]), (pads[1], pads[3])))
    total = _window_views(xp, kernel, strides, dilations).sum(axis=(4, 5))
    count = _window_views(ones[None, None], kernel, strides, dilations).sum(axis=(4, 5))
    return np.ascontiguousarray(total / count)


def _reduce(x, attrs, fn):
    axes = attrs.get("axes")
    axes = tuple(range(x.ndim)) if axes is None else tuple(a % x.ndim for a in axes)
    keep = bool(attrs.get("keepdims", 1))
    return fn(x, axis=axes, keepdims=keep)


def _softmax(x, attrs):
    axis = attrs.get("axis", -1)
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _gemm(inputs, attrs):
    a, b = inputs[0], inputs[1]
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("Gemm operands must be 2-D")
    if attrs.get("transA", 0):
        a = a.T
    if attrs.get("transB", 0):
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Gemm inner dimensions differ: {a.shape} vs {b.shape}")
    out = attrs.get("alpha", 1.0) * (a @ b)
    if len(inputs) == 3:
        out = out + attrs.get("beta", 1.0) * inputs[2]
    return out


def _batch_norm(inputs, attrs):
    x, scale, bias, mean, var = inputs
    eps = attrs.get("epsilon", 1e-5)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    k = scale.reshape(shape) / np.sqrt(var.reshape(shape) + eps)
    return x * k + (bias.reshape(shape) - mean.reshape(shape) * k)


def _split(x, node):
    axis = node.attributes.get("axis", 0) % x.ndim
    parts = node.attributes.get("split")
    n_out = len(node.outputs)
    if parts is None:
        if x.shape[axis] % n_out:
            raise ShapeError(
                f"Split extent {x.shape[axis]} not divisible into {n_out} parts")
        parts = [x.shape[axis] // n_out] * n_out
    if sum(parts) != x.shape[axis]:
        raise ShapeError(f"Split sizes {parts} do not cover extent {x.shape[axis]}")
    offsets = np.cumsum([0] + list(parts))
    slicer = [slice(None)] * x.ndim
    out = []
    for start, size in zip(offsets, parts):
        slicer[axis] = slice(int(start), int(start + size))
        out.append(np.ascontiguousarray(x[tuple(slicer)]))
    return out


def _constant(node, dtype):
    attrs = node.attributes
    want = attrs["dtype"]
    if want not in DTYPES:
        raise ValidationError(f"Constant node {node.name!r}: bad dtype {want!r}")
    arr = np.asarray(attrs["value"], dtype=DTYPES[want]).reshape(attrs["shape"])
    return arr


def eval_node(node: Node, inputs: list[np.ndarray], dtype: str = "float64") -> list[np.ndarray]:
    """Apply one operator to concrete arrays; returns one array per output."""
    op = node.op_type
    attrs = node.attributes
    try:
        if op == "MatMul":
            a, b = inputs
            if a.ndim < 2 or b.ndim < 2:
                raise ShapeError("MatMul operands must be at least 2-D")
            if a.shape[-1] != b.shape[-2]:
                raise ShapeError(f"MatMul inner dimensions differ: {a.shape} vs {b.shape}")
            return [np.matmul(a, b)]
        if op == "Gemm":
            return [_gemm(inputs, attrs)]
        if op == "Conv":
            bias = inputs[2] if len(inputs) == 3 else None
            return [_conv(inputs[0], inputs[1], bias, attrs)]
        if op == "Add":
            return [inputs[0] + inputs[1]]
        if op == "Sub":
            return [inputs[0] - inputs[1]]
        if op == "Mul":
            return [inputs[0] * inputs[1]]
        if op == "Div":
            return [inputs[0] / inputs[1]]
        if op == "Concat":
            return [np.concatenate(inputs, axis=attrs["axis"])]
        if op == "Relu":
            return [np.maximum(inputs[0], 0)]
        if op == "Sigmoid":
            return [_sigmoid(inputs[0])]
        if op == "Tanh":
            return [np.tanh(inputs[0])]
        if op == "Exp":
            return [np.exp(inputs[0])]
        if op == "Softmax":
            return [_softmax(inputs[0], attrs)]
        if op == "MaxPool":
            return [_max_pool(inputs[0], attrs)]
        if op == "AveragePool":
            return [_avg_pool(inputs[0], attrs)]
        if op == "GlobalAveragePool":
            return [inputs[0].mean(axis=(2, 3), keepdims=True)]
        if op == "GlobalMaxPool":
            return [inputs[0].max(axis=(2, 3), keepdims=True)]
        if op == "BatchNormalization":
            return [_batch_norm(inputs, attrs)]
        if op == "Transpose":
            return [np.ascontiguousarray(inputs[0].transpose(attrs["perm"]))]
        if op == "Reshape":
            return [inputs[0].reshape(attrs["shape"])]
        if op == "Flatten":
            axis = attrs.get("axis", 1)
            head = int(np.prod(inputs[0].shape[:axis], dtype=np.int64)) if axis else 1
            return [inputs[0].reshape(head, -1)]
        if op == "ReduceSum":
            return [_reduce(inputs[0], attrs, np.sum)]
        if op == "ReduceMean":
            return [_reduce(inputs[0], attrs, np.mean)]
        if op == "Greater":
            return [inputs[0] > inputs[1]]
        if op == "Where":
            cond = inputs[0]
            if cond.dtype != np.bool_:
                cond = cond != 0
            return [np.where(cond, inputs[1], inputs[2])]
        if op == "Tile":
            return [np.tile(inputs[0], attrs["repeats"])]
        if op == "Split":
            return _split(inputs[0], node)
        if op == "Constant":
            return [_constant(node, dtype)]
    except (ShapeError, UnsupportedOp, ValidationError):
        raise
    except ValueError as exc:
        raise ShapeError(f"{op}: {exc}") from exc
    raise UnsupportedOp(f"no kernel for op {op!r}")


def run_kernel(op_type: str, inputs: list[np.ndarray], attrs: dict | None = None,
               n_outputs: int = 1, dtype: str = "float64") -> list[np.ndarray]:
    """Kernel dispatch without a pre-built Node, for folding and tests."""
    node = Node(op_type, "anon", [f"i{k}" for k in range(len(inputs))],
                [f"o{k}" for k in range(n_outputs)], dict(attrs or {}))
    return eval_node(node, inputs, dtype)


def _coerce_feed(model: GraphModel, feed: dict) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    declared = {spec.name: spec for spec in model.inputs}
    for name, spec in declared.items():
        if name not in feed:
            raise ShapeError(f"feed is missing graph input {name!r}")
        value = feed[name]
        arr = value.array if isinstance(value, TensorValue) else np.asarray(value)
        want = DTYPES[spec.dtype]
        if arr.dtype != want:
            raise ShapeError(
                f"input {name!r} has dtype {arr.dtype}, model wants {spec.dtype}")
        if len(arr.shape) != len(spec.shape):
            raise ShapeError(
                f"input {name!r} has rank {arr.ndim}, spec is {spec.shape}")
        for i, (got, want_d) in enumerate(zip(arr.shape, spec.shape)):
            if want_d != -1 and got != want_d:
                raise ShapeError(
                    f"input {name!r} extent {got} at axis {i} does not match "
                    f"spec {spec.shape}")
        arrays[name] = arr
    return arrays


def execute(model: GraphModel, feed: dict, capture: bool = False,
            check_numerics: bool = True):
    """Run a model on a feed.

    Returns ``(outputs, trace)`` where outputs maps each declared graph output
    to its array and trace maps every computed value name to its array when
    ``capture`` is set (None otherwise).
    """
    values = _coerce_feed(model, feed)
    for name, tensor in model.initializers.items():
        values[name] = tensor.array
    dtype = model.inputs[0].dtype if model.inputs else "float64"
    for node in topological_order(model):
        try:
            ins = [values[n] for n in node.inputs]
        except KeyError as exc:
            raise ShapeError(f"node {node.name!r} consumes unknown value {exc}") from exc
        try:
            outs = eval_node(node, ins, dtype)
        except (ShapeError, UnsupportedOp) as exc:
            raise type(exc)(f"node {node.name!r}: {exc}") from exc
        for out_name, arr in zip(node.outputs, outs):
            if check_numerics and arr.dtype != np.bool_ and not np.all(np.isfinite(arr)):
                raise NumericError(
                    f"node {node.name!r} produced non-finite values in {out_name!r}")
            values[out_name] = arr
    outputs = {}
    for spec in model.outputs:
        if spec.name not in values:
            raise ShapeError(f"graph output {spec.name!r} was never computed")
        outputs[spec.name] = values[spec.name]
    return outputs, (values if capture else None)
