"""Compile a forward graph into a self-contained explainer and run it.

The artifact is one graph with a single runtime input (the sample to explain)
and two outputs: the model's prediction row and an input-shaped attribution.
Everything else — reference rows or their cached activations, gradient seeds,
backward wiring — lives inside as constants, so a saved artifact can be
shipped and executed anywhere the executor runs, with no other state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ShapeError, ValidationError
from .executor import execute
from .ir import (DTYPES, GraphModel, TensorValue, load_document,
                 model_from_document, save_model)
from .refopt import build_naive, build_optimized, precompute_reference_cache
from .rules import EPS_ACT, EPS_POOL

__all__ = [
    "ExplainerArtifact",
    "Attribution",
    "compile_explainer",
    "explain",
    "completeness_check",
    "save_artifact",
    "load_artifact",
    "write_pgm",
]

_SCHEMES = {"opt": "optimized", "optimized": "optimized", "naive": "naive"}


@dataclass
class ExplainerArtifact:
    """A deployable graph plus the metadata describing how it was built."""

    model: GraphModel
    metadata: dict

    @property
    def scheme(self) -> str:
        return self.metadata["scheme"]


@dataclass
class Attribution:
    """Input-shaped feature scores for one prediction."""

    phi: TensorValue
    residual: float
    prediction: TensorValue


def compile_explainer(model: GraphModel, references, output_index: int = 0,
                      scheme: str = "optimized", *, eps_act: float = EPS_ACT,
                      eps_pool: float = EPS_POOL, seed_scale: float = 1.0,
                      expose_multipliers: bool = False) -> ExplainerArtifact:
    """Build the explainer for one output coordinate under one scheme."""
    try:
        canonical = _SCHEMES[scheme]
    except KeyError:
        raise ValidationError(f"unknown scheme {scheme!r}; use opt or naive") \
            from None
    knobs = dict(eps_act=eps_act, eps_pool=eps_pool, seed_scale=seed_scale,
                 expose_multipliers=expose_multipliers)
    if canonical == "optimized":
        cache = precompute_reference_cache(model, references)
        graph, meta = build_optimized(model, cache, output_index, **knobs)
    else:
        graph, meta = build_naive(model, references, output_index, **knobs)
    return ExplainerArtifact(model=graph, metadata=meta)


def _as_input(artifact: ExplainerArtifact, sample) -> np.ndarray:
    spec = artifact.model.inputs[0]
    if isinstance(sample, TensorValue):
        sample = sample.array
    return np.asarray(sample, dtype=DTYPES[spec.dtype])


def explain(artifact: ExplainerArtifact, sample) -> Attribution:
    """Run the artifact on one sample row."""
    meta = artifact.metadata
    arr = _as_input(artifact, sample)
    outputs, _ = execute(artifact.model, {meta["input_name"]: arr})
    prediction = outputs[meta["prediction_output"]]
    phi = outputs[meta["attribution_output"]]
    dtype = artifact.model.inputs[0].dtype
    predicted = float(prediction.reshape(-1, prediction.shape[-1])
                      [0, meta["output_index"]])
    target = meta["seed_scale"] * (predicted - meta["ref_output_mean"])
    residual = abs(float(phi.sum()) - target)
    return Attribution(phi=TensorValue(phi, dtype), residual=residual,
                       prediction=TensorValue(prediction, dtype))


def completeness_check(attribution: Attribution, y_x, y_refs,
                       output_index: int = 0, seed_scale: float = 1.0) -> float:
    """|sum(phi) - seed_scale * (y_x[k] - mean_b y_refs[b, k])|."""
    phi = attribution.phi.array if isinstance(attribution.phi, TensorValue) \
        else np.asarray(attribution.phi)
    yx = np.asarray(y_x.array if isinstance(y_x, TensorValue) else y_x,
                    dtype=np.float64)
    yr = np.asarray(y_refs.array if isinstance(y_refs, TensorValue) else y_refs,
                    dtype=np.float64)
    yx_k = float(yx.reshape(-1, yx.shape[-1])[0, output_index]) \
        if yx.ndim >= 2 else float(yx)
    yr_k = float(yr.reshape(-1, yr.shape[-1])[:, output_index].mean()) \
        if yr.ndim >= 2 else float(yr)
    return abs(float(phi.sum()) - seed_scale * (yx_k - yr_k))


def save_artifact(artifact: ExplainerArtifact, path: str) -> None:
    save_model(artifact.model, path, extra={"metadata": artifact.metadata})


def load_artifact(path: str) -> ExplainerArtifact:
    document = load_document(path)
    if "metadata" not in document:
        raise ParseError(f"{path!r} holds a plain model, not an explainer")
    return ExplainerArtifact(model=model_from_document(document),
                             metadata=document["metadata"])


def write_pgm(phi, path: str) -> None:
    """Dump an attribution as a plain-text grayscale image.

    Channel axes are collapsed by summation; the value range is min-max
    scaled to 0..255.
    """
    arr = np.asarray(phi.array if isinstance(phi, TensorValue) else phi,
                     dtype=np.float64)
    arr = np.squeeze(arr, axis=0) if arr.ndim and arr.shape[0] == 1 else arr
    while arr.ndim > 2:
        arr = arr.sum(axis=0)
    if arr.ndim != 2:
        raise ShapeError(
            f"attribution with per-sample rank {arr.ndim} has no 2-D layout")
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.full(arr.shape, 128, dtype=np.int64) if hi == lo else \
        np.rint((arr - lo) / (hi - lo) * 255).astype(np.int64)
    height, width = scaled.shape
    lines = [f"P2\n{width} {height}\n255"]
    for row in scaled:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
