"""Static shape propagation for the supported operator set.

Shapes are tuples of ints; a -1 marks the free batch dimension of a graph
input and is carried through untouched where that is well defined.  Ops that
cannot tolerate a symbolic extent raise ShapeError when they meet one.
"""

from __future__ import annotations

from .errors import ShapeError, UnsupportedOp
from .ir import GraphModel, Node

__all__ = ["broadcast_shapes", "infer_node_shapes", "infer_graph_shapes"]


def broadcast_shapes(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Multidirectional broadcast of two shapes; -1 matches anything but 1."""
    out = []
    for da, db in zip(_pad(a, b), _pad(b, a)):
        if da == db:
            out.append(da)
        elif da == 1:
            out.append(db)
        elif db == 1:
            out.append(da)
        elif -1 in (da, db):
            out.append(-1 if da == -1 and db == -1 else max(da, db))
        else:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def _pad(a, b):
    return (1,) * (len(b) - len(a)) + tuple(a) if len(a) < len(b) else tuple(a)


def _numel(shape):
    n = 1
    for d in shape:
        if d == -1:
            raise ShapeError(f"shape {shape} is not fully concrete")
        n *= d
    return n


def _pool_axis(size, kernel, stride, pad_begin, pad_end, dilation=1):
    if size == -1:
        raise ShapeError("pooling over a symbolic dimension")
    eff = (kernel - 1) * dilation + 1
    span = size + pad_begin + pad_end - eff
    if span < 0:
        raise ShapeError(
            f"window {kernel} (dilation {dilation}) exceeds padded extent "
            f"{size + pad_begin + pad_end}")
    return span // stride + 1


def _conv_like(shape, attrs, n_spatial):
    kernel = list(attrs["kernel_shape"])
    strides = list(attrs.get("strides", [1] * n_spatial))
    pads = list(attrs.get("pads", [0] * (2 * n_spatial)))
    dilations = list(attrs.get("dilations", [1] * n_spatial))
    if len(kernel) != n_spatial or len(strides) != n_spatial \
            or len(pads) != 2 * n_spatial or len(dilations) != n_spatial:
        raise ShapeError(f"window attributes do not match {n_spatial} spatial axes")
    out = []
    for i in range(n_spatial):
        out.append(_pool_axis(shape[2 + i], kernel[i], strides[i],
                              pads[i], pads[n_spatial + i], dilations[i]))
    return tuple(out)


def infer_node_shapes(node: Node, in_shapes: list[tuple[int, ...]]) -> list[tuple[int, ...]]:
    op = node.op_type
    attrs = node.attributes

    if op in ("Add", "Sub", "Mul", "Div", "Greater"):
        return [broadcast_shapes(in_shapes[0], in_shapes[1])]
    if op == "Where":
        return [broadcast_shapes(broadcast_shapes(in_shapes[0], in_shapes[1]),
                                 in_shapes[2])]
    if op in ("Relu", "Sigmoid", "Tanh", "Exp", "Softmax"):
        return [in_shapes[0]]

    if op == "MatMul":
        a, b = in_shapes
        if len(a) < 2 or len(b) < 2:
            raise ShapeError(f"MatMul operands must be at least 2-D, got {a} and {b}")
        if a[-1] != b[-2] and -1 not in (a[-1], b[-2]):
            raise ShapeError(f"MatMul inner dimensions differ: {a} vs {b}")
        batch = broadcast_shapes(a[:-2], b[:-2]) if (a[:-2] or b[:-2]) else ()
        return [batch + (a[-2], b[-1])]

    if op == "Gemm":
        a, b = in_shapes[0], in_shapes[1]
        if len(a) != 2 or len(b) != 2:
            raise ShapeError("Gemm operands must be 2-D")
        if attrs.get("transA", 0):
            a = (a[1], a[0])
        if attrs.get("transB", 0):
            b = (b[1], b[0])
        if a[1] != b[0] and -1 not in (a[1], b[0]):
            raise ShapeError(f"Gemm inner dimensions differ: {a} vs {b}")
        return [(a[0], b[1])]

    if op == "Conv":
        x, w = in_shapes[0], in_shapes[1]
        if len(x) != 4 or len(w) != 4:
            raise ShapeError("Conv supports 4-D NCHW tensors only")
        group = attrs.get("group", 1)
        if group != 1:
            raise UnsupportedOp("Conv with group != 1 is not supported")
        if x[1] != w[1] and x[1] != -1:
            raise ShapeError(f"Conv channel mismatch: input {x}, weight {w}")
        spatial = _conv_like(x, attrs, 2)
        return [(x[0], w[0]) + spatial]

    if op in ("MaxPool", "AveragePool"):
        x = in_shapes[0]
        if len(x) != 4:
            raise ShapeError(f"{op} supports 4-D NCHW tensors only")
        spatial = _conv_like(x, attrs, 2)
        return [(x[0], x[1]) + spatial]

    if op in ("GlobalAveragePool", "GlobalMaxPool"):
        x = in_shapes[0]
        if len(x) != 4:
            raise ShapeError(f"{op} supports 4-D NCHW tensors only")
        return [(x[0], x[1], 1, 1)]

    if op == "BatchNormalization":
        return [in_shapes[0]]

    if op == "Concat":
        axis = attrs["axis"]
        base = list(in_shapes[0])
        axis = axis if axis >= 0 else axis + len(base)
        if not 0 <= axis < len(base):
            raise ShapeError(f"Concat axis {attrs['axis']} out of range for {base}")
        total = 0
        for s in in_shapes:
            if len(s) != len(base):
                raise ShapeError(f"Concat rank mismatch: {in_shapes}")
            for i, (d0, d) in enumerate(zip(base, s)):
                if i != axis and d0 != d and -1 not in (d0, d):
                    raise ShapeError(f"Concat non-axis extent mismatch: {in_shapes}")
            if s[axis] == -1:
                raise ShapeError("Concat along a symbolic axis")
            total += s[axis]
        base[axis] = total
        return [tuple(base)]

    if op == "Transpose":
        perm = attrs["perm"]
        x = in_shapes[0]
        if sorted(perm) != list(range(len(x))):
            raise ShapeError(f"Transpose perm {perm} is not a permutation of rank {len(x)}")
        return [tuple(x[p] for p in perm)]

    if op == "Reshape":
        target = list(attrs["shape"])
        x = in_shapes[0]
        if target.count(-1) > 1:
            raise ShapeError("Reshape allows at most one inferred extent")
        if -1 in x:
            # a free batch extent survives only as the leading -1 of both sides
            if x[0] != -1 or -1 in x[1:] or not target or target[0] != -1:
                raise ShapeError(f"cannot reshape symbolic {x} to {target}")
            if _numel(x[1:]) != _numel(target[1:]):
                raise ShapeError(
                    f"cannot reshape {x} to {target}: row sizes differ")
            return [tuple(target)]
        if -1 in target:
            known = _numel([d for d in target if d != -1])
            total = _numel(x)
            if known == 0 or total % known:
                raise ShapeError(f"cannot reshape {x} to {target}")
            target[target.index(-1)] = total // known
        elif _numel(x) != _numel(target):
            raise ShapeError(f"cannot reshape {x} ({_numel(x)} elements) to {target}")
        return [tuple(target)]

    if op == "Flatten":
        x = in_shapes[0]
        axis = attrs.get("axis", 1)
        head = -1 if -1 in x[:axis] else (_numel(x[:axis]) if axis > 0 else 1)
        tail = -1 if -1 in x[axis:] else (_numel(x[axis:]) if axis < len(x) else 1)
        return [(head, tail)]

    if op in ("ReduceSum", "ReduceMean"):
        x = in_shapes[0]
        axes = attrs.get("axes")
        axes = list(range(len(x))) if axes is None else [a % len(x) for a in axes]
        keep = attrs.get("keepdims", 1)
        out = []
        for i, d in enumerate(x):
            if i in axes:
                if keep:
                    out.append(1)
            else:
                out.append(d)
        return [tuple(out)]

    if op == "Tile":
        reps = attrs["repeats"]
        x = in_shapes[0]
        if len(reps) != len(x):
            raise ShapeError(f"Tile repeats {reps} must match rank of {x}")
        return [tuple(d * r if d != -1 else -1 for d, r in zip(x, reps))]

    if op == "Split":
        x = in_shapes[0]
        axis = attrs.get("axis", 0) % len(x)
        if x[axis] == -1:
            raise ShapeError("Split along a symbolic axis")
        parts = attrs.get("split")
        n_out = len(node.outputs)
        if parts is None:
            if x[axis] % n_out:
                raise ShapeError(
                    f"Split axis extent {x[axis]} not divisible into {n_out} parts")
            parts = [x[axis] // n_out] * n_out
        if len(parts) != n_out or sum(parts) != x[axis]:
            raise ShapeError(f"Split sizes {parts} do not cover extent {x[axis]}")
        return [x[:axis] + (p,) + x[axis + 1:] for p in parts]

    if op == "Constant":
        return [tuple(attrs["shape"])]

    raise UnsupportedOp(f"no shape law for op {op!r}")


def infer_graph_shapes(model: GraphModel,
                       overrides: dict[str, tuple[int, ...]] | None = None,
                       ) -> dict[str, tuple[int, ...]]:
    """Shape of every named value, honoring per-input shape overrides."""
    from .ir import topological_order

    shapes: dict[str, tuple[int, ...]] = {}
    for spec in model.inputs:
        shapes[spec.name] = tuple(spec.shape)
    if overrides:
        for name, shape in overrides.items():
            shapes[name] = tuple(shape)
    for name, tensor in model.initializers.items():
        shapes[name] = tensor.shape
    for node in topological_order(model):
        try:
            outs = infer_node_shapes(node, [shapes[i] for i in node.inputs])
        except (ShapeError, UnsupportedOp) as exc:
            raise type(exc)(f"node {node.name!r}: {exc}") from exc
        for out_name, shape in zip(node.outputs, outs):
            shapes[out_name] = shape
    return shapes
