"""Reference caching, scheme assembly, and cost accounting.

Two ways to attach an attribution head to a forward graph:

* build_optimized precomputes every reference-side activation once at compile
  time and bakes the values the rules actually consult into the artifact as
  constants.  The runtime graph then runs the target forward pass on a single
  row and broadcasts it against the cached B-row tensors.

* build_naive reproduces the replicate-and-stack layout: the target row is
  tiled B times, concatenated with the reference rows into a 2B-row batch,
  and the whole forward pass runs at that width every call.  It exists as the
  equivalence baseline and for cost comparisons.

count_flops prices either artifact with fixed per-op conventions so the two
schemes can be compared analytically.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import differentiate
from .builder import GraphBuilder, RuleEnv
from .errors import ShapeError, UnsupportedOp, ValidationError
from .executor import eval_node, execute
from .ir import (DTYPES, GraphModel, Node, TensorValue, ValueSpec,
                 model_digest, topological_order, validate_model)
from .parser import build_backward_graph, mark_differentiable
from .rules import EPS_ACT, EPS_POOL
from .shapes import infer_graph_shapes, infer_node_shapes

__all__ = [
    "ReferenceCache",
    "FlopReport",
    "ACTIVATION_FLOP_COST",
    "precompute_reference_cache",
    "build_optimized",
    "build_naive",
    "op_census",
    "count_flops",
]

# fixed per-element price for transcendental activations; the remaining
# conventions live in _node_flops
ACTIVATION_FLOP_COST = 4

_PREDICTION = "prediction"
_ATTRIBUTION = "attribution"
_MULTIPLIERS = "multipliers"


@dataclass
class ReferenceCache:
    """Every forward value over the reference batch, captured once."""

    values: dict[str, np.ndarray]
    batch: int
    digest: str


def _as_array(references, dtype: str) -> np.ndarray:
    if isinstance(references, TensorValue):
        references = references.array
    arr = np.asarray(references, dtype=DTYPES[dtype])
    if arr.ndim < 1 or arr.shape[0] < 1:
        raise ValidationError("the reference set must carry at least one row")
    return arr


def precompute_reference_cache(model: GraphModel, references) -> ReferenceCache:
    """Run the forward graph once over all B references, keeping every value."""
    if len(model.inputs) != 1:
        raise UnsupportedOp("attribution requires exactly one graph input")
    dtype = model.inputs[0].dtype
    refs = _as_array(references, dtype)
    _, trace = execute(model, {model.inputs[0].name: refs}, capture=True)
    digest = hashlib.sha256(
        model_digest(model).encode() + refs.tobytes()).hexdigest()
    return ReferenceCache(values=trace, batch=int(refs.shape[0]), digest=digest)


def _sample_shapes(model: GraphModel) -> dict[str, tuple[int, ...]]:
    spec = model.inputs[0]
    return infer_graph_shapes(model, {spec.name: (1,) + tuple(spec.shape[1:])})


def _const_chain(model: GraphModel) -> dict[str, np.ndarray]:
    """Values computable from initializers alone (no graph-input dependence)."""
    known = {name: tv.array for name, tv in model.initializers.items()}
    dtype = model.inputs[0].dtype if model.inputs else "float64"
    for node in topological_order(model):
        if node.inputs and all(i in known for i in node.inputs):
            outs = eval_node(node, [known[i] for i in node.inputs], dtype)
            known.update(zip(node.outputs, outs))
        elif not node.inputs:  # Constant
            outs = eval_node(node, [], dtype)
            known.update(zip(node.outputs, outs))
    return known


def _grad_prefix(model: GraphModel) -> str:
    taken = {n.name for n in model.nodes}
    taken.update(o for n in model.nodes for o in n.outputs)
    taken.update(model.initializers)
    prefix = "bwd"
    while any(t.startswith(prefix + "/") for t in taken):
        prefix += "x"
    return prefix


def _head_geometry(model: GraphModel, sample, output_index: int):
    explained = model.outputs[0].name
    out_shape = sample[explained]
    if len(out_shape) != 2:
        raise UnsupportedOp(
            f"the explained output must be rank-2 (batch, classes); "
            f"{explained!r} has shape {out_shape}")
    classes = out_shape[1]
    if not 0 <= output_index < classes:
        raise ValidationError(
            f"output index {output_index} outside the {classes}-class head")
    return explained, classes


def _seed_array(batch: int, classes: int, output_index: int, dtype: str,
                seed_scale: float) -> np.ndarray:
    seed = np.zeros((batch, classes), dtype=DTYPES[dtype])
    seed[:, output_index] = seed_scale
    return seed


def _metadata(scheme: str, model: GraphModel, artifact: GraphModel, *,
              output_index: int, batch: int, eps_act: float, eps_pool: float,
              seed_scale: float, input_name: str, explained: str,
              attribution: str, multipliers: str | None, forward_nodes,
              target_rows: int, reference_rows: int, ref_output_mean: float,
              cache_entries, cache_bytes: int, source_digest: str) -> dict:
    meta = {
        "scheme": scheme,
        "output_index": int(output_index),
        "batch": int(batch),
        "eps_act": float(eps_act),
        "eps_pool": float(eps_pool),
        "seed_scale": float(seed_scale),
        "dtype": model.inputs[0].dtype,
        "input_name": input_name,
        "prediction_output": explained,
        "attribution_output": attribution,
        "multipliers_output": multipliers,
        "forward_output": explained,
        "forward_nodes": list(forward_nodes),
        "forward_rows": {"target": int(target_rows),
                         "reference": int(reference_rows)},
        "ref_output_mean": float(ref_output_mean),
        "cache_entries": sorted(cache_entries),
        "cache_bytes": int(cache_bytes),
        "source_digest": source_digest,
    }
    payload = json.dumps(meta, sort_keys=True) + model_digest(artifact)
    meta["build_digest"] = hashlib.sha256(payload.encode()).hexdigest()
    return meta


def build_optimized(model: GraphModel, cache: ReferenceCache,
                    output_index: int = 0, *, eps_act: float = EPS_ACT,
                    eps_pool: float = EPS_POOL, seed_scale: float = 1.0,
                    expose_multipliers: bool = False):
    """Attach the attribution head with all reference activations baked in.

    Returns (artifact, metadata).
    """
    validate_model(model)
    if len(model.inputs) != 1:
        raise UnsupportedOp("attribution requires exactly one graph input")
    input_name = model.inputs[0].name
    dtype = model.inputs[0].dtype
    sample = _sample_shapes(model)
    explained, classes = _head_geometry(model, sample, output_index)
    batch = cache.batch

    builder = GraphBuilder(dtype=dtype, prefix=_grad_prefix(model))
    for name, shape in sample.items():
        builder.register_value(name, shape)
    for name, tv in model.initializers.items():
        builder.register_value(name, tv.shape, tv.array)
    for name, arr in _const_chain(model).items():
        builder.known.setdefault(name, arr)
    builder.mark_produced([o for n in model.nodes for o in n.outputs])

    env = RuleEnv(builder, batch, joint=False, sample_shapes=sample,
                  ref_values=cache.values)
    backward = build_backward_graph(model, explained)
    loss = builder.const(
        _seed_array(batch, classes, output_index, dtype, seed_scale), "seed")
    result = differentiate(model, backward, loss, env, eps_act, eps_pool)

    # phi = mean over references of multiplier * (X - R)
    d_input = env.delta(input_name)
    contrib = builder.emit("Mul", [result.input_grad, d_input], tag="contrib")
    phi = builder.emit("ReduceMean", [contrib], {"axes": [0], "keepdims": 1},
                       tag=_ATTRIBUTION)

    outputs = [ValueSpec(explained, dtype, sample[explained]),
               ValueSpec(phi, dtype, builder.shape(phi))]
    if expose_multipliers:
        outputs.append(ValueSpec(result.input_grad, dtype,
                                 builder.shape(result.input_grad)))
    artifact = GraphModel(
        name=f"{model.name}.explainer",
        inputs=[ValueSpec(input_name, dtype, sample[input_name])],
        outputs=outputs,
        initializers={**model.initializers, **builder.initializers},
        nodes=[*model.nodes, *builder.nodes],
    )
    validate_model(artifact)

    baked = env.baked_refs()
    cache_bytes = sum(builder.initializers[baked[n]].array.nbytes
                      for n in env.consumed_refs)
    meta = _metadata(
        "optimized", model, artifact, output_index=output_index, batch=batch,
        eps_act=eps_act, eps_pool=eps_pool, seed_scale=seed_scale,
        input_name=input_name, explained=explained, attribution=phi,
        multipliers=result.input_grad if expose_multipliers else None,
        forward_nodes=[n.name for n in model.nodes], target_rows=1,
        reference_rows=0,
        ref_output_mean=cache.values[explained][:, output_index].mean(),
        cache_entries=env.consumed_refs, cache_bytes=cache_bytes,
        source_digest=cache.digest)
    return artifact, meta


def build_naive(model: GraphModel, references, output_index: int = 0, *,
                eps_act: float = EPS_ACT, eps_pool: float = EPS_POOL,
                seed_scale: float = 1.0, expose_multipliers: bool = False):
    """Attach the attribution head in the replicate-and-stack layout.

    Returns (artifact, metadata).
    """
    validate_model(model)
    if len(model.inputs) != 1:
        raise UnsupportedOp("attribution requires exactly one graph input")
    input_name = model.inputs[0].name
    dtype = model.inputs[0].dtype
    refs = _as_array(references, dtype)
    batch = int(refs.shape[0])
    sample = _sample_shapes(model)
    explained, classes = _head_geometry(model, sample, output_index)
    in_rank = len(sample[input_name])
    diffable = mark_differentiable(model)

    builder = GraphBuilder(dtype=dtype, prefix=_grad_prefix(model))
    builder.register_value(input_name, sample[input_name])
    for name, tv in model.initializers.items():
        builder.register_value(name, tv.shape, tv.array)
    for name, arr in _const_chain(model).items():
        builder.known.setdefault(name, arr)

    tiled = builder.emit("Tile", [input_name],
                         {"repeats": [batch] + [1] * (in_rank - 1)}, tag="stackx")
    ref_const = builder.const(refs, "refrows")
    stacked = builder.emit("Concat", [tiled, ref_const], {"axis": 0}, tag="stack")

    # clone the forward graph at 2B rows under its original value names
    rename = {input_name: stacked}
    forward_names = []
    for node in model.nodes:
        attrs = dict(node.attributes)
        if node.op_type == "Reshape" and any(i in diffable for i in node.inputs):
            shape_attr = list(attrs.get("shape", []))
            if shape_attr and shape_attr[0] == 1:
                shape_attr[0] = -1  # free the batch extent for the 2B stream
                attrs["shape"] = shape_attr
        clone = Node(node.op_type, node.name,
                     [rename.get(i, i) for i in node.inputs],
                     list(node.outputs), attrs)
        out_shapes = infer_node_shapes(
            clone, [builder.shape(i) for i in clone.inputs])
        builder.append_raw(clone, out_shapes)
        forward_names.append(clone.name)

    env = RuleEnv(builder, batch, joint=True, sample_shapes=sample)
    env.alias[input_name] = stacked
    backward = build_backward_graph(model, explained)
    loss = builder.const(
        _seed_array(2 * batch, classes, output_index, dtype, seed_scale), "seed")
    result = differentiate(model, backward, loss, env, eps_act, eps_pool)

    # phi: mask out the reference-half rows, sum the stream, divide by B
    d_input = builder.emit("Sub", [input_name, ref_const], tag="inputdelta")
    dead = builder.const(np.zeros((batch,) + tuple(sample[input_name][1:])),
                         "deadrows")
    masked = builder.emit("Concat", [d_input, dead], {"axis": 0}, tag="maskeddelta")
    contrib = builder.emit("Mul", [result.input_grad, masked], tag="contrib")
    summed = builder.emit("ReduceSum", [contrib], {"axes": [0], "keepdims": 1},
                          tag="contribsum")
    phi = builder.emit("Mul", [summed, builder.scalar(1.0 / batch, "invb")],
                       tag=_ATTRIBUTION)
    # the target half carries B identical rows; their mean is the prediction
    pred = builder.emit("ReduceMean", [env.x_of(explained)],
                        {"axes": [0], "keepdims": 1}, tag=_PREDICTION)

    outputs = [ValueSpec(pred, dtype, builder.shape(pred)),
               ValueSpec(phi, dtype, builder.shape(phi))]
    if expose_multipliers:
        outputs.append(ValueSpec(result.input_grad, dtype,
                                 builder.shape(result.input_grad)))
    artifact = GraphModel(
        name=f"{model.name}.explainer",
        inputs=[ValueSpec(input_name, dtype, sample[input_name])],
        outputs=outputs,
        initializers={**model.initializers, **builder.initializers},
        nodes=list(builder.nodes),
    )
    validate_model(artifact)

    ref_out, _ = execute(model, {input_name: refs})
    source_digest = hashlib.sha256(
        model_digest(model).encode() + refs.tobytes()).hexdigest()
    meta = _metadata(
        "naive", model, artifact, output_index=output_index, batch=batch,
        eps_act=eps_act, eps_pool=eps_pool, seed_scale=seed_scale,
        input_name=input_name, explained=explained, attribution=phi,
        multipliers=result.input_grad if expose_multipliers else None,
        forward_nodes=[builder.nodes[0].name, builder.nodes[1].name,
                       *forward_names],
        target_rows=batch, reference_rows=batch,
        ref_output_mean=ref_out[explained][:, output_index].mean(),
        cache_entries=[], cache_bytes=0, source_digest=source_digest)
    meta["prediction_output"] = pred
    return artifact, meta


def op_census(model: GraphModel) -> Counter:
    """Node count per op type."""
    return Counter(node.op_type for node in model.nodes)


@dataclass
class FlopReport:
    """Analytic cost of one explained image for a compiled graph."""

    total: int
    by_node: list[tuple[str, str, int]]
    by_op: dict[str, int] = field(default_factory=dict)
    forward_flops: int = 0
    backward_flops: int = 0
    forward_peak_bytes: int = 0
    cache_bytes: int = 0
    batch: int | None = None

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "forward_flops": self.forward_flops,
            "backward_flops": self.backward_flops,
            "forward_peak_bytes": self.forward_peak_bytes,
            "cache_bytes": self.cache_bytes,
            "batch": self.batch,
            "by_op": dict(sorted(self.by_op.items())),
            "by_node": [list(row) for row in self.by_node],
        }

    def format_table(self, limit: int = 0) -> str:
        rows = self.by_node if not limit else self.by_node[:limit]
        width = max([len(name) for name, _, _ in rows] + [4])
        lines = [f"{'node':<{width}}  {'op':<20}  flops"]
        for name, op, flops in rows:
            lines.append(f"{name:<{width}}  {op:<20}  {flops}")
        lines.append(f"{'total':<{width}}  {'':<20}  {self.total}")
        lines.append(f"forward {self.forward_flops} / backward "
                     f"{self.backward_flops}; forward peak bytes "
                     f"{self.forward_peak_bytes}; cache bytes {self.cache_bytes}")
        return "\n".join(lines)


def _node_flops(node: Node, shapes: dict[str, tuple[int, ...]]) -> int:
    op = node.op_type
    out = shapes[node.outputs[0]]
    out_elems = int(np.prod(out)) if out else 1
    if op in ("MatMul", "Gemm"):
        inner = shapes[node.inputs[0]][-1]
        flops = 2 * out_elems * int(inner)
        if op == "Gemm" and len(node.inputs) == 3:
            flops += out_elems
        return flops
    if op == "Conv":
        w = shapes[node.inputs[1]]
        flops = 2 * out_elems * int(w[1] * w[2] * w[3])
        if len(node.inputs) == 3:
            flops += out_elems
        return flops
    if op in ("Add", "Sub", "Mul", "Div", "Greater", "Where"):
        return out_elems
    if op in ("Sigmoid", "Tanh", "Exp", "Softmax", "Relu"):
        return ACTIVATION_FLOP_COST * out_elems
    if op in ("MaxPool", "AveragePool"):
        kernel = node.attributes["kernel_shape"]
        return out_elems * int(kernel[0] * kernel[1])
    if op in ("GlobalMaxPool", "GlobalAveragePool", "ReduceSum", "ReduceMean"):
        return int(np.prod(shapes[node.inputs[0]]))
    if op == "BatchNormalization":
        return 2 * out_elems
    # movement only: Transpose, Reshape, Flatten, Tile, Concat, Split, Constant
    return 0


def count_flops(model: GraphModel, batch: int | None = None,
                forward_nodes=None, cache_bytes: int = 0) -> FlopReport:
    """Price every node with fixed conventions; split forward/backward.

    ``forward_nodes`` names the forward subset (defaults to all nodes); the
    peak-bytes estimate covers only that subset and excludes constants.
    """
    overrides = {}
    if batch is not None and model.inputs:
        spec = model.inputs[0]
        overrides[spec.name] = (batch,) + tuple(spec.shape[1:])
    shapes = infer_graph_shapes(model, overrides)
    itemsize = np.dtype(DTYPES[model.inputs[0].dtype]).itemsize if model.inputs else 8
    forward = set(forward_nodes) if forward_nodes is not None \
        else {n.name for n in model.nodes}
    by_node = []
    by_op: dict[str, int] = {}
    fwd = bwd = 0
    peak = 0
    for node in model.nodes:
        flops = _node_flops(node, shapes)
        by_node.append((node.name, node.op_type, flops))
        by_op[node.op_type] = by_op.get(node.op_type, 0) + flops
        if node.name in forward:
            fwd += flops
            live = [i for i in node.inputs if i not in model.initializers]
            touched = sum(int(np.prod(shapes[v])) for v in live) \
                + sum(int(np.prod(shapes[o])) for o in node.outputs)
            peak = max(peak, touched * itemsize)
        else:
            bwd += flops
    total = fwd + bwd
    if total != sum(f for _, _, f in by_node):
        raise ShapeError("FLOP breakdown does not sum to the total")
    return FlopReport(total=total, by_node=by_node, by_op=by_op,
                      forward_flops=fwd, backward_flops=bwd,
                      forward_peak_bytes=peak, cache_bytes=cache_bytes,
                      batch=batch)
