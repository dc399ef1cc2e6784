"""Reference baking, both compile schemes, and the analytic cost model."""

import numpy as np
import pytest

import graphlift as gl
from graphlift.corpus import demo_model, random_references
from graphlift.executor import execute
from graphlift.refopt import (build_naive, build_optimized, count_flops,
                              op_census, precompute_reference_cache)

B = 5


@pytest.fixture(scope="module")
def demo():
    model = demo_model()
    refs = random_references(model, B, seed=3)
    return model, refs


def test_cache_holds_every_forward_value(demo):
    model, refs = demo
    cache = precompute_reference_cache(model, refs)
    _, trace = execute(model, {model.inputs[0].name: refs}, capture=True)
    for name, arr in trace.items():
        assert name in cache.values
        assert np.array_equal(cache.values[name], arr)
    assert cache.batch == B


def test_cache_digest_tracks_reference_content(demo):
    model, refs = demo
    a = precompute_reference_cache(model, refs)
    b = precompute_reference_cache(model, refs.copy())
    c = precompute_reference_cache(model, refs + 1e-9)
    assert a.digest == b.digest
    assert a.digest != c.digest


def test_optimized_bakes_references_as_initializers(demo):
    model, refs = demo
    cache = precompute_reference_cache(model, refs)
    art, meta = build_optimized(model, cache)
    entries = meta["cache_entries"]
    assert entries, "at least the input reference must be consumed"
    declared = 0
    for name in entries:
        captured = cache.values[name]
        baked = [tv for iname, tv in art.initializers.items()
                 if "ref_" in iname and tv.array.shape == captured.shape
                 and np.array_equal(tv.array, captured)]
        assert baked, f"no initializer carries the cached activations of {name}"
        declared += baked[0].array.nbytes
    assert meta["cache_bytes"] == declared


def test_metadata_contract(demo):
    model, refs = demo
    cache = precompute_reference_cache(model, refs)
    art, meta = build_optimized(model, cache)
    for key in ("scheme", "output_index", "batch", "eps_act", "eps_pool",
                "seed_scale", "dtype", "input_name", "prediction_output",
                "attribution_output", "forward_output", "forward_nodes",
                "forward_rows", "ref_output_mean", "cache_entries",
                "cache_bytes", "source_digest", "build_digest"):
        assert key in meta
    assert meta["scheme"] == "optimized"
    assert meta["batch"] == B
    assert meta["source_digest"] == cache.digest
    node_names = {n.name for n in art.nodes}
    assert set(meta["forward_nodes"]) <= node_names
    # single target row, references folded away at compile time
    assert meta["forward_rows"] == {"target": 1, "reference": 0}


def test_naive_metadata_runs_both_streams(demo):
    model, refs = demo
    _, meta = build_naive(model, refs)
    assert meta["scheme"] == "naive"
    assert meta["forward_rows"] == {"target": B, "reference": B}
    assert meta["cache_entries"] == []
    assert meta["cache_bytes"] == 0


def test_census_demo_shape(demo):
    model, refs = demo
    cache = precompute_reference_cache(model, refs)
    opt_model, _ = build_optimized(model, cache)
    naive_model, _ = build_naive(model, refs)
    opt, naive = op_census(opt_model), op_census(naive_model)
    assert opt["Tile"] == 0
    assert naive["Tile"] >= 1
    assert naive["Split"] - opt["Split"] >= 2
    assert naive["Concat"] > opt["Concat"]
    # census counts every node exactly once
    assert sum(opt.values()) == len(opt_model.nodes)


def test_flop_breakdown_sums(demo):
    model, refs = demo
    cache = precompute_reference_cache(model, refs)
    art, meta = build_optimized(model, cache)
    report = count_flops(art, batch=1, forward_nodes=meta["forward_nodes"],
                         cache_bytes=meta["cache_bytes"])
    assert report.total == sum(f for _, _, f in report.by_node)
    assert report.total == sum(report.by_op.values())
    assert report.total == report.forward_flops + report.backward_flops
    assert report.forward_flops > 0 and report.backward_flops > 0
    table = report.format_table()
    assert "forward" in table and str(report.total) in table


def test_flop_gap_grows_with_reference_batch(demo):
    model, _ = demo
    gaps = []
    for b in (1, 2, 5, 16):
        refs = random_references(model, b, seed=3)
        cache = precompute_reference_cache(model, refs)
        opt, om = build_optimized(model, cache)
        nai, nm = build_naive(model, refs)
        fo = count_flops(opt, batch=1, forward_nodes=om["forward_nodes"]).total
        fn = count_flops(nai, batch=1, forward_nodes=nm["forward_nodes"]).total
        assert fo < fn
        gaps.append(fn - fo)
    assert gaps == sorted(gaps)


def test_demo_peak_memory_inequality(demo):
    """Optimized forward working set stays under naive/(2B) plus the cache."""
    model, refs = demo
    cache = precompute_reference_cache(model, refs)
    opt, om = build_optimized(model, cache)
    nai, nm = build_naive(model, refs)
    ro = count_flops(opt, batch=1, forward_nodes=om["forward_nodes"],
                     cache_bytes=om["cache_bytes"])
    rn = count_flops(nai, batch=1, forward_nodes=nm["forward_nodes"])
    assert ro.forward_peak_bytes <= rn.forward_peak_bytes / (2 * B) \
        + ro.cache_bytes
    # frozen demo figures guard against silent cost-model drift
    assert ro.forward_peak_bytes == 264
    assert rn.forward_peak_bytes == 3840
    assert ro.cache_bytes == 1360


def test_count_flops_scales_with_batch(demo):
    model, _ = demo
    small = count_flops(model, batch=1).total
    big = count_flops(model, batch=8).total
    assert big == 8 * small


def test_cache_bytes_passthrough(demo):
    model, _ = demo
    report = count_flops(model, batch=1, cache_bytes=999)
    assert report.cache_bytes == 999
    assert report.as_dict()["cache_bytes"] == 999


def test_build_digest_is_reproducible(demo):
    model, refs = demo
    cache = precompute_reference_cache(model, refs)
    art_a, meta_a = build_optimized(model, cache)
    art_b, meta_b = build_optimized(model, cache)
    assert meta_a["build_digest"] == meta_b["build_digest"]
    assert gl.model_digest(art_a) == gl.model_digest(art_b)
