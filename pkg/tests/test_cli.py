import json
import subprocess
import sys

import pytest

from radioloc.cli import main, parse
from radioloc.evaluation import rows_from_csv
from radioloc.pipeline import read_manifest, strip_timing


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipe(tmp_path_factory):
    """gen -> simulate (both) -> datasets -> train -> evaluate on 3 desk maps."""
    r = tmp_path_factory.mktemp("pipe")
    d = {k: r / k for k in ("scenes", "sim0", "sim1", "nom", "rob", "model", "eval", "cmp", "toa")}
    assert run("gen-scenes", "--maps", 3, "--seed", 1, "--out", d["scenes"]) == 0
    assert run("simulate", "--scenes", d["scenes"], "--out", d["sim0"], "--jobs", 2) == 0
    assert run("simulate", "--scenes", d["scenes"], "--cars", "on", "--out", d["sim1"], "--jobs", 1) == 0
    common = ["--scenes", d["scenes"], "--sim", d["sim0"], "--sim-cars", d["sim1"]]
    assert run("make-dataset", *common, "--out", d["nom"]) == 0
    assert run("make-dataset", *common, "--scenario", "Robustness", "--out", d["rob"]) == 0
    assert run("train", "--dataset", d["nom"], "--epochs", 2, "--width-div", 10, "--out", d["model"]) == 0
    assert run("evaluate", "--dataset", d["nom"], "--methods", "knn,adaptive-knn,centroid,locnet",
               "--model", d["model"], "--out", d["eval"]) == 0
    assert run("compare", "--nominal", d["nom"], "--robustness", d["rob"], "--methods", "knn,adaptive-knn,locnet",
               "--model-nominal", d["model"], "--model-robustness", d["model"], "--out", d["cmp"]) == 0
    assert run("toa-bench", "--scenes", d["scenes"], "--sim", d["sim0"], "--sigma", "20", "--anchors", 3,
               "--limit", 15, "--out", d["toa"]) == 0
    return d


def test_usage_errors(monkeypatch, tmp_path):
    monkeypatch.delenv("RADIOLOC_OUT", raising=False)
    assert run("gen-scenes", "--maps", 1) == 2
    assert run("no-such-command") == 2
    assert run("gen-scenes", "--maps", -1, "--out", tmp_path / "x") == 2
    assert run("train", "--out", tmp_path / "t") == 2  # missing --dataset
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert run("gen-scenes", "--config", bad, "--out", tmp_path / "y") == 2


def test_computational_failure_exit_1(tmp_path):
    assert run("simulate", "--scenes", tmp_path / "nothing", "--out", tmp_path / "s") == 1


def test_out_env_fallback(monkeypatch, tmp_path):
    monkeypatch.setenv("RADIOLOC_OUT", str(tmp_path))
    assert parse(["gen-scenes"]).out == str(tmp_path / "gen-scenes")
    assert run("gen-scenes", "--maps", 0) == 0
    man = read_manifest(tmp_path / "gen-scenes", "gen-scenes")
    assert man["maps"] == [] and man["files"] == {}


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"maps": 2, "seed": 9}))
    a = parse(["gen-scenes", "--config", str(cfg), "--out", "o"])
    assert (a.maps, a.seed) == (2, 9)
    assert parse(["gen-scenes", "--config", str(cfg), "--seed", "4", "--out", "o"]).seed == 4


def test_gen_scenes_twice_identical(tmp_path):
    for k in ("a", "b"):
        assert run("gen-scenes", "--seed", 1, "--maps", 2, "--out", tmp_path / k) == 0
    ma, mb = (read_manifest(tmp_path / k) for k in "ab")
    assert ma["files"] == mb["files"] and len(ma["files"]) == 4


def test_simulate_resumes(pipe, capsys):
    assert run("simulate", "--scenes", pipe["scenes"], "--out", pipe["sim0"], "--jobs", 1) == 0
    assert capsys.readouterr().out.count("up to date, skipped") == 3


def test_reports_shape(pipe):
    ev = json.loads((pipe["eval"] / "report.json").read_text())
    assert [r["method"] for r in ev["summary"]][:3] == ["knn(k=16)", "adaptive-knn(alpha=0.05)", "centroid"]
    assert (pipe["eval"] / "conditional.csv").read_text().startswith("method,margin_db,bucket,aed_m,count")
    cmp = rows_from_csv((pipe["cmp"] / "comparison.csv").read_text())
    assert [r["method"] for r in cmp] == ["knn", "adaptive-knn", "locnet"]
    assert set(cmp[0]) == {"method", "Nominal", "Robustness", "published_Nominal", "published_Robustness"}
    assert len(rows_from_csv((pipe["cmp"] / "ood_matrix.csv").read_text())) == 8
    toa = rows_from_csv((pipe["toa"] / "toa_bench.csv").read_text())
    assert [r["method"] for r in toa] == ["pocs", "bisection(b=0)", "bisection(b=0.7)", "bisection(b=20)",
                                          "correntropy"]
    assert all(r["sigma=20"] > 0 for r in toa)


@pytest.mark.parametrize("stage", ["scenes", "sim0", "sim1", "nom", "rob", "model", "eval", "cmp", "toa"])
def test_rerun_from_manifest_bit_identical(pipe, stage, tmp_path):
    man = read_manifest(pipe[stage])
    assert run(man["stage"], "--config", pipe[stage] / "manifest.json", "--out", tmp_path / "re") == 0
    again = read_manifest(tmp_path / "re")
    assert strip_timing(again) == strip_timing(man)
    for rel in man["files"]:
        assert (tmp_path / "re" / rel).read_bytes() == (pipe[stage] / rel).read_bytes()


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "radioloc.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("radioloc ")
