"""Independent numeric cross-checks for compiled explainers.

deeplift_oracle re-derives attributions directly from captured forward
traces: it walks the node list in reverse topological order once per
reference row, applying each operator's multiplier arithmetic in numpy, and
never touches the rule emitters or the graph builder.  finite_diff supplies
central-difference gradients for the linear paths, and compare_attributions
implements the elementwise closeness metric used to score scheme pairs.

This module deliberately duplicates the multiplier formulas.  Keep it free
of imports from the emission side so a defect there cannot leak in here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UnsupportedOp, ValidationError
from .executor import execute
from .explainer import Attribution
from .ir import DTYPES, GraphModel, Node, TensorValue, topological_order

__all__ = [
    "ClosenessReport",
    "deeplift_oracle",
    "finite_diff",
    "compare_attributions",
]

# thresholds restated locally: the oracle must not lean on the rule emitters
_EPS_ACT = 1e-6
_EPS_POOL = 1e-7


def _as_batch(value, dtype: str) -> np.ndarray:
    if isinstance(value, TensorValue):
        value = value.array
    return np.asarray(value, dtype=DTYPES[dtype])


def _reachable_from_input(model: GraphModel) -> set[str]:
    seen = {spec.name for spec in model.inputs}
    changed = True
    while changed:
        changed = False
        for node in model.nodes:
            if any(i in seen for i in node.inputs):
                for out in node.outputs:
                    if out not in seen:
                        seen.add(out)
                        changed = True
    return seen


def _upstream_nodes(model: GraphModel, explained: str, diff: set[str]) -> set[str]:
    producer = {o: n for n in model.nodes for o in n.outputs}
    wanted: set[str] = set()
    frontier = [producer[explained]]
    while frontier:
        node = frontier.pop()
        if node.name in wanted:
            continue
        wanted.add(node.name)
        for name in node.inputs:
            if name in diff and name in producer:
                frontier.append(producer[name])
    return wanted


def deeplift_oracle(model: GraphModel, sample, references,
                    output_index: int = 0, *, eps_act: float = _EPS_ACT,
                    eps_pool: float = _EPS_POOL,
                    return_multipliers: bool = False):
    """Reference implementation of the multiplier backward pass.

    Returns an Attribution, or (Attribution, multipliers[B x input]) when
    return_multipliers is set.
    """
    if len(model.inputs) != 1:
        raise UnsupportedOp("attribution requires exactly one graph input")
    spec = model.inputs[0]
    x = _as_batch(sample, spec.dtype)
    refs = _as_batch(references, spec.dtype)
    if x.shape[0] != 1:
        raise ValidationError("the oracle explains exactly one sample row")
    explained = model.outputs[0].name
    x_out, x_trace = execute(model, {spec.name: x}, capture=True)
    r_out, r_trace = execute(model, {spec.name: refs}, capture=True)
    head = x_out[explained]
    if head.ndim != 2:
        raise UnsupportedOp("the explained output must be rank-2 (batch, classes)")
    classes = head.shape[1]
    if not 0 <= output_index < classes:
        raise ValidationError(
            f"output index {output_index} outside the {classes}-class head")

    diff = _reachable_from_input(model)
    wanted = _upstream_nodes(model, explained, diff)
    order = [n for n in topological_order(model) if n.name in wanted]
    batch = refs.shape[0]
    per_ref = []
    for row in range(batch):

        def r_val(name: str) -> np.ndarray:
            arr = r_trace[name]
            return arr[row:row + 1] if name in diff else arr

        grads: dict[str, np.ndarray] = {}

        def push(name: str, grad: np.ndarray) -> None:
            grads[name] = grads[name] + grad if name in grads else grad

        seed = np.zeros((1, classes), dtype=head.dtype)
        seed[0, output_index] = 1.0
        push(explained, seed)
        for node in reversed(order):
            flowed = _node_backward(node, grads[node.outputs[0]],
                                    x_trace.__getitem__, r_val, diff,
                                    eps_act, eps_pool)
            for name, grad in flowed.items():
                push(name, grad)
        per_ref.append(grads[spec.name])
    multipliers = np.concatenate(per_ref, axis=0)
    phi = (multipliers * (x - refs)).mean(axis=0, keepdims=True)

    predicted = float(head[0, output_index])
    ref_mean = float(r_out[explained][:, output_index].mean())
    residual = abs(float(phi.sum()) - (predicted - ref_mean))
    attribution = Attribution(phi=TensorValue(phi, spec.dtype),
                              residual=residual,
                              prediction=TensorValue(head, spec.dtype))
    if return_multipliers:
        return attribution, multipliers
    return attribution


def _fit(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.ndim != len(shape):
        raise UnsupportedOp(
            f"differentiable operands must carry the full result rank "
            f"({grad.shape} vs {shape})")
    axes = tuple(i for i in range(1, grad.ndim)
                 if shape[i] == 1 and grad.shape[i] != 1)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


def _secant(dy, dx, local, eps):
    near = np.abs(dx) < eps
    return np.where(near, local, dy / np.where(near, 1.0, dx))


def _node_backward(node: Node, g: np.ndarray, xv, rv, diff: set[str],
                   eps_act: float, eps_pool: float) -> dict[str, np.ndarray]:
    op = node.op_type
    attrs = node.attributes
    ins = node.inputs

    if op in ("MatMul", "Gemm"):
        w = xv(ins[1])
        if op == "Gemm":
            if int(attrs.get("transA", 0)):
                raise UnsupportedOp("transA is not supported")
            if not int(attrs.get("transB", 0)):
                w = w.T
            w = float(attrs.get("alpha", 1.0)) * w
            return {ins[0]: g @ w}
        return {ins[0]: g @ w.T}

    if op == "Conv":
        w = xv(ins[1])
        strides = [int(v) for v in attrs.get("strides", [1, 1])]
        pads = [int(v) for v in attrs.get("pads", [0, 0, 0, 0])]
        x = xv(ins[0])
        height, width = x.shape[2], x.shape[3]
        kh, kw = w.shape[2], w.shape[3]
        canvas = np.zeros((g.shape[0], w.shape[1], height + pads[0] + pads[2],
                           width + pads[1] + pads[3]), dtype=g.dtype)
        for i in range(g.shape[2]):
            for j in range(g.shape[3]):
                patch = np.einsum("bo,ockl->bckl", g[:, :, i, j], w)
                canvas[:, :, i * strides[0]:i * strides[0] + kh,
                       j * strides[1]:j * strides[1] + kw] += patch
        return {ins[0]: canvas[:, :, pads[0]:pads[0] + height,
                               pads[1]:pads[1] + width]}

    if op in ("Add", "Sub"):
        out: dict[str, np.ndarray] = {}
        for slot, name in enumerate(ins):
            if name not in diff:
                continue
            gi = -g if (op == "Sub" and slot == 1) else g
            gi = _fit(gi, xv(name).shape)
            out[name] = out[name] + gi if name in out else gi
        return out

    if op == "Mul":
        out = {}
        for name, other in ((ins[0], ins[1]), (ins[1], ins[0])):
            if name not in diff:
                continue
            factor = (xv(other) + rv(other)) * 0.5 if other in diff else xv(other)
            gi = _fit(g * factor, xv(name).shape)
            out[name] = out[name] + gi if name in out else gi
        return out

    if op == "Div":
        if ins[1] in diff:
            raise UnsupportedOp("division by a differentiable value")
        return {ins[0]: _fit(g / xv(ins[1]), xv(ins[0]).shape)}

    if op == "BatchNormalization":
        scale, var = xv(ins[1]), xv(ins[4])
        eps = float(attrs.get("epsilon", 1e-5))
        k = (scale / np.sqrt(var + eps)).reshape(
            (1, -1) + (1,) * (xv(ins[0]).ndim - 2))
        return {ins[0]: g * k}

    if op == "Transpose":
        perm = [int(v) for v in attrs["perm"]]
        return {ins[0]: np.transpose(g, np.argsort(perm))}

    if op in ("Reshape", "Flatten"):
        return {ins[0]: g.reshape(xv(ins[0]).shape)}

    if op in ("ReduceSum", "ReduceMean"):
        x = xv(ins[0])
        axes = sorted(int(a) % x.ndim for a in attrs["axes"])
        if 0 in axes:
            raise UnsupportedOp("reduction over the batch axis")
        if not int(attrs.get("keepdims", 1)):
            g = np.expand_dims(g, tuple(axes))
        spread = np.ones(x.shape, dtype=g.dtype)
        if op == "ReduceMean":
            spread /= float(np.prod([x.shape[a] for a in axes]))
        return {ins[0]: g * spread}

    if op == "Concat":
        axis = int(attrs["axis"]) % g.ndim
        if axis == 0:
            raise UnsupportedOp("concat along the batch axis")
        out = {}
        offset = 0
        for name in ins:
            size = xv(name).shape[axis]
            piece = np.take(g, range(offset, offset + size), axis=axis)
            offset += size
            if name not in diff:
                continue
            out[name] = out[name] + piece if name in out else piece
        return out

    if op in ("Sigmoid", "Tanh", "Relu"):
        x, r = xv(ins[0]), rv(ins[0])
        y, yr = xv(node.outputs[0]), rv(node.outputs[0])
        if op == "Sigmoid":
            local = y * (1.0 - y)
        elif op == "Tanh":
            local = 1.0 - y * y
        else:
            local = (x > 0).astype(g.dtype)
        return {ins[0]: g * _secant(y - yr, x - r, local, eps_act)}

    if op == "Softmax":
        x, r = xv(ins[0]), rv(ins[0])
        y, yr = xv(node.outputs[0]), rv(node.outputs[0])
        axis = int(attrs.get("axis", -1)) % x.ndim
        if axis != x.ndim - 1:
            raise UnsupportedOp("softmax gradients support the last axis only")
        ux, ur = np.exp(x), np.exp(r)
        sx = ux.sum(axis=-1, keepdims=True)
        sr = ur.sum(axis=-1, keepdims=True)
        sbar = (sx + sr) * 0.5
        ybar = (y + yr) * 0.5
        gu = g / sbar + (g * ((ybar * -1.0) / sbar)).sum(axis=-1, keepdims=True)
        return {ins[0]: gu * _secant(ux - ur, x - r, ux, eps_act)}

    if op in ("MaxPool", "GlobalMaxPool"):
        return {ins[0]: _maxpool_backward(node, g, xv, rv, eps_pool)}

    if op in ("AveragePool", "GlobalAveragePool"):
        return {ins[0]: _avgpool_backward(node, g, xv)}

    raise UnsupportedOp(f"oracle has no rule for op {op!r} (node {node.name!r})")


def _pool_args(attrs):
    kernel = [int(v) for v in attrs["kernel_shape"]]
    strides = [int(v) for v in attrs.get("strides", [1, 1])]
    pads = [int(v) for v in attrs.get("pads", [0, 0, 0, 0])]
    return kernel, strides, pads


def _maxpool_backward(node: Node, g, xv, rv, eps_pool: float) -> np.ndarray:
    x, r = xv(node.inputs[0]), rv(node.inputs[0])
    yx, yr = xv(node.outputs[0]), rv(node.outputs[0])
    upper = np.maximum(yx, yr)
    shares = ((x, yx, (upper - yr) * g), (r, yr, (yx - upper) * g))
    _, channels, height, width = x.shape
    if node.op_type == "GlobalMaxPool":
        kernel, strides, pads = [height, width], [1, 1], [0, 0, 0, 0]
    else:
        kernel, strides, pads = _pool_args(node.attributes)
    pad_h = height + pads[0] + pads[2]
    pad_w = width + pads[1] + pads[3]
    routed = np.zeros((1, channels, pad_h, pad_w), dtype=g.dtype)
    for act, pooled, share in shares:
        padded = np.full((1, channels, pad_h, pad_w), -np.inf, dtype=act.dtype)
        padded[:, :, pads[0]:pads[0] + height, pads[1]:pads[1] + width] = act
        out_h, out_w = pooled.shape[2], pooled.shape[3]
        for i in range(out_h):
            for j in range(out_w):
                window = padded[0, :, i * strides[0]:i * strides[0] + kernel[0],
                                j * strides[1]:j * strides[1] + kernel[1]]
                flat = window.reshape(channels, -1)
                # first maximum in row-major window order
                winners = flat.argmax(axis=1)
                for c in range(channels):
                    di, dj = divmod(int(winners[c]), kernel[1])
                    routed[0, c, i * strides[0] + di, j * strides[1] + dj] += \
                        share[0, c, i, j]
    routed = routed[:, :, pads[0]:pads[0] + height, pads[1]:pads[1] + width]
    dx = x - r
    near = np.abs(dx) < eps_pool
    return np.where(near, 0.0, routed / np.where(near, 1.0, dx))


def _avgpool_backward(node: Node, g, xv) -> np.ndarray:
    x = xv(node.inputs[0])
    _, channels, height, width = x.shape
    if node.op_type == "GlobalAveragePool":
        return np.broadcast_to(g / float(height * width), x.shape).copy()
    kernel, strides, pads = _pool_args(node.attributes)
    pad_h = height + pads[0] + pads[2]
    pad_w = width + pads[1] + pads[3]
    bounds = np.zeros((pad_h, pad_w))
    bounds[pads[0]:pads[0] + height, pads[1]:pads[1] + width] = 1.0
    canvas = np.zeros((1, channels, pad_h, pad_w), dtype=g.dtype)
    for i in range(g.shape[2]):
        for j in range(g.shape[3]):
            window = bounds[i * strides[0]:i * strides[0] + kernel[0],
                            j * strides[1]:j * strides[1] + kernel[1]]
            count = window.sum()
            canvas[:, :, i * strides[0]:i * strides[0] + kernel[0],
                   j * strides[1]:j * strides[1] + kernel[1]] += \
                g[:, :, i:i + 1, j:j + 1] / count
    return canvas[:, :, pads[0]:pads[0] + height, pads[1]:pads[1] + width]


def finite_diff(model: GraphModel, sample, output_index: int = 0,
                h: float = 1e-4) -> np.ndarray:
    """Central differences of the explained coordinate, input-shaped."""
    spec = model.inputs[0]
    x = _as_batch(sample, spec.dtype)
    explained = model.outputs[0].name

    def head(arr: np.ndarray) -> float:
        out, _ = execute(model, {spec.name: arr})
        return float(out[explained][0, output_index])

    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        bump = np.zeros_like(x)
        bump[idx] = h
        grad[idx] = (head(x + bump) - head(x - bump)) / (2.0 * h)
    return grad


@dataclass
class ClosenessReport:
    """Elementwise |a-b| < atol + rtol*|b| scoring."""

    fraction: float
    atol: float
    rtol: float
    total: int
    failed: int
    worst_index: tuple
    value_a: float
    value_b: float

    def passed(self, min_fraction: float = 0.99) -> bool:
        return self.fraction >= min_fraction

    def format(self) -> str:
        return (f"{self.total - self.failed}/{self.total} elements within "
                f"atol={self.atol:g} rtol={self.rtol:g} "
                f"(fraction {self.fraction:.6f}); worst at {self.worst_index}: "
                f"a={self.value_a:.6g} b={self.value_b:.6g}")


def compare_attributions(a, b, atol: float = 1e-8,
                         rtol: float = 1e-5) -> ClosenessReport:
    """Score a against b with the asymmetric elementwise closeness test."""
    arr_a = np.asarray(a.array if isinstance(a, TensorValue) else a,
                       dtype=np.float64)
    arr_b = np.asarray(b.array if isinstance(b, TensorValue) else b,
                       dtype=np.float64)
    if arr_a.shape != arr_b.shape:
        raise ShapeError(f"shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    gap = np.abs(arr_a - arr_b)
    allowance = atol + rtol * np.abs(arr_b)
    ok = gap < allowance
    excess = gap - allowance
    worst = np.unravel_index(int(np.argmax(excess)), arr_a.shape)
    total = arr_a.size
    failed = int(total - ok.sum())
    return ClosenessReport(
        fraction=float(ok.mean()) if total else 1.0,
        atol=atol, rtol=rtol, total=int(total), failed=failed,
        worst_index=tuple(int(i) for i in worst),
        value_a=float(arr_a[worst]), value_b=float(arr_b[worst]))
