"""Command line surface, exercised in process through main(argv)."""

import json

import numpy as np
import pytest

import graphlift as gl
from graphlift.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture()
def demo_files(tmp_path, capsys):
    code, _, err = run(capsys, "corpus", "--name", "demo",
                       "--out-dir", str(tmp_path))
    assert code == 0, err
    return {
        "model": str(tmp_path / "demo.sgm"),
        "sample": str(tmp_path / "demo_sample.stn"),
        "refs": str(tmp_path / "demo_refs.stn"),
        "dir": tmp_path,
    }


def test_corpus_list(capsys):
    code, out, _ = run(capsys, "corpus", "--list")
    assert code == 0
    for name in ("plain_deep", "residual_add", "dense_concat",
                 "scaled_add_mul"):
        assert name in out


def test_corpus_writes_loadable_files(demo_files):
    model = gl.load_model(demo_files["model"])
    assert model.name == "demo"
    sample = gl.load_tensor(demo_files["sample"])
    refs = gl.load_tensor(demo_files["refs"])
    assert sample.array.shape == (1, 32)
    assert refs.array.shape == (5, 32)


def test_compile_run_verify_pipeline(demo_files, capsys):
    art_path = str(demo_files["dir"] / "demo_explainer.sgm")
    code, out, _ = run(capsys, "compile", "--model", demo_files["model"],
                       "--refs", demo_files["refs"], "--out", art_path)
    assert code == 0
    assert "optimized" in out and "cache:" in out

    phi_path = str(demo_files["dir"] / "phi.stn")
    code, out, _ = run(capsys, "run", "--explainer", art_path,
                       "--input", demo_files["sample"], "--out", phi_path)
    assert code == 0
    assert "prediction" in out and "residual" in out
    phi = gl.load_tensor(phi_path)
    assert phi.array.shape == (1, 32)

    code, out, _ = run(capsys, "verify", "--explainer", art_path,
                       "--refs", demo_files["refs"], "--model",
                       demo_files["model"], "--against", "oracle",
                       "--input", demo_files["sample"])
    assert code == 0
    assert "pass" in out.lower()


def test_verify_against_naive_random_inputs(demo_files, capsys):
    art_path = str(demo_files["dir"] / "opt.sgm")
    assert run(capsys, "compile", "--model", demo_files["model"],
               "--refs", demo_files["refs"], "--out", art_path)[0] == 0
    code, out, _ = run(capsys, "verify", "--explainer", art_path,
                       "--refs", demo_files["refs"], "--model",
                       demo_files["model"], "--against", "naive",
                       "--inputs", "3")
    assert code == 0
    assert out.count("pass") >= 3


def test_verify_exit_code_on_mismatch(demo_files, capsys, tmp_path):
    """An explainer compiled from different references must fail oracle checks."""
    other_refs = str(tmp_path / "other_refs.stn")
    refs = gl.load_tensor(demo_files["refs"])
    gl.save_tensor(gl.TensorValue(refs.array + 0.8, refs.dtype), other_refs,
                   name="features")
    art_path = str(demo_files["dir"] / "skewed.sgm")
    assert run(capsys, "compile", "--model", demo_files["model"],
               "--refs", other_refs, "--out", art_path)[0] == 0
    code, out, _ = run(capsys, "verify", "--explainer", art_path,
                       "--refs", demo_files["refs"], "--model",
                       demo_files["model"], "--against", "oracle",
                       "--input", demo_files["sample"], "--atol", "1e-12",
                       "--rtol", "1e-12")
    assert code == 3
    assert "fail" in out.lower()


def test_run_writes_pgm_for_image_models(tmp_path, capsys):
    assert run(capsys, "corpus", "--name", "plain_deep", "--out-dir",
               str(tmp_path))[0] == 0
    art = str(tmp_path / "pd.sgm")
    assert run(capsys, "compile", "--model", str(tmp_path / "plain_deep.sgm"),
               "--refs", str(tmp_path / "plain_deep_refs.stn"),
               "--out", art)[0] == 0
    pgm = str(tmp_path / "heat.pgm")
    code, _, _ = run(capsys, "run", "--explainer", art,
                     "--input", str(tmp_path / "plain_deep_sample.stn"),
                     "--pgm", pgm)
    assert code == 0
    header = open(pgm).read().splitlines()[:2]
    assert header[0] == "P2"
    assert header[1] == "16 16"


def test_flops_table_and_json(demo_files, capsys, tmp_path):
    report = str(tmp_path / "flops.json")
    code, out, _ = run(capsys, "flops", "--model", demo_files["model"],
                       "--refs", demo_files["refs"],
                       "--b-range", "1,2,5", "--json", report)
    assert code == 0
    assert "naive flops" in out and "opt flops" in out and "gap" in out
    payload = json.loads(open(report).read())
    assert payload["model"] == "demo"
    rows = payload["batches"]
    assert [row["batch"] for row in rows] == [1, 2, 5]
    for row in rows:
        assert row["naive"]["total"] > row["optimized"]["total"]
        assert row["gap"] == row["naive"]["total"] - row["optimized"]["total"]
    gaps = [row["gap"] for row in rows]
    assert gaps == sorted(gaps)


def test_bench_reports_both_schemes(demo_files, capsys):
    code, out, _ = run(capsys, "bench", "--model", demo_files["model"],
                       "--refs", demo_files["refs"], "--images", "5")
    assert code == 0
    assert "naive" in out and "optimized" in out and "ratio" in out


def test_dtype_flag_recasts(demo_files, capsys):
    art = str(demo_files["dir"] / "f32.sgm")
    code, _, _ = run(capsys, "compile", "--model", demo_files["model"],
                     "--refs", demo_files["refs"], "--dtype", "f32",
                     "--out", art)
    assert code == 0
    loaded = gl.load_artifact(art)
    assert loaded.model.inputs[0].dtype == "float32"
    assert loaded.metadata["dtype"] == "float32"


def test_missing_file_is_a_clean_error(capsys, tmp_path):
    code, _, err = run(capsys, "run", "--explainer",
                       str(tmp_path / "nope.sgm"),
                       "--input", str(tmp_path / "nope.stn"))
    assert code == 2
    assert err.strip()


def test_unknown_motif_is_a_clean_error(capsys, tmp_path):
    code, _, err = run(capsys, "corpus", "--name", "bogus",
                       "--out-dir", str(tmp_path))
    assert code == 2
    assert "bogus" in err


def test_bad_flag_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["compile", "--nonsense"])
    assert exc.value.code == 2
