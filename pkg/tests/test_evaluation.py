import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radioloc import autodiff as ad
from radioloc.evaluation import (
    CentroidLocalizer, MethodSpec, OOD_SOURCES, OracleLocalizer, compare_suite, conditional_breakdown,
    diagonal_dominance, error_cdf, evaluate, is_nonincreasing, load_report_json, mean_distance_to_center,
    mean_distance_to_center_exact, rows_from_csv, rows_to_csv, toa_bench, write_reports, cdf_rows,
)
from radioloc.fingerprint import KnnConfig, KnnLocalizer
from radioloc.grid import GridSpec, LinkBudget, Position

G = GridSpec(64, 4.0)


def fake(i, x, y, pl=(-80.0, -90.0, -100.0)):
    return SimpleNamespace(instance_id=i, spec=G, truth=Position(x, y), measured_pl=np.array(pl), bs_ids=(0, 1, 2))


class Fixed:
    name = "fixed"

    def __init__(self, pts):
        self.pts = iter(pts)

    def localize(self, inst):
        p = next(self.pts)
        if p is None:
            raise ValueError("solver gave up")
        return Position(*p)


def test_oracle_is_zero(rss_nominal):
    rep = evaluate(OracleLocalizer(), rss_nominal.split("test"))
    assert rep.aed_m == 0.0 and rep.failures == 0 and rep.ased_m2 == 0.0


def test_failures_excluded_and_counted():
    insts = [fake(0, 1, 1), fake(1, 1, 1), fake(2, 1, 1)]
    rep = evaluate(Fixed([(4, 5), None, (1, 1)]), insts)
    assert rep.failures == 1 and rep.failure_reasons == {"ValueError": 1}
    assert rep.aed_m == pytest.approx(10.0) and rep.ased_m2 == pytest.approx(200.0)
    assert math.isnan(rep.errors_m[1]) and rep.summary()["n"] == 3


def test_centroid_matches_box_mean():
    side = 164.0
    assert mean_distance_to_center(0.0, side) == pytest.approx(mean_distance_to_center_exact(side), rel=2e-3)
    rng = np.random.default_rng(0)
    # truths uniform over the pixel-centre box of a 1 m grid
    g = GridSpec(256, 1.0)
    lo, hi = 46.5, 210.5
    pts = rng.uniform(lo, hi, (20000, 2))
    insts = [SimpleNamespace(instance_id=i, spec=g, truth=Position(*p)) for i, p in enumerate(pts)]
    rep = evaluate(CentroidLocalizer(), insts)
    assert rep.aed_m == pytest.approx(mean_distance_to_center_exact(hi - lo), rel=1e-2)


def test_aed_cross_check_with_autodiff(rss_nominal):
    insts = rss_nominal.split("test")
    rep = evaluate(KnnLocalizer(KnnConfig(k=4)), insts)
    truth = np.array([(i.truth.x, i.truth.y) for i in insts])
    loss = ad.aed_loss(ad.Tensor(rep.estimates * 4.0), truth * 4.0)
    assert abs(float(loss.data) - rep.aed_m) < 1e-9


def test_conditional_shape_and_counts(rss_nominal):
    insts = rss_nominal.split("test")
    rows = []
    for m in (OracleLocalizer(), CentroidLocalizer()):
        rep = evaluate(m, insts)
        rows += [{**r, "method": rep.method} for r in conditional_breakdown(rep, insts, rss_nominal.budget)]
    assert len(rows) == 2 * 2 * (3 + 2)
    for method in ("oracle", "centroid"):
        for margin in (0.0, 10.0):
            sel = [r for r in rows if r["method"] == method and r["margin_db"] == margin]
            assert [r["bucket"] for r in sel] == ["0", "1", "2", "3", "Overall"]
            assert sum(r["count"] for r in sel[:-1]) == sel[-1]["count"] == len(insts)


def test_all_los_single_bucket():
    b = LinkBudget()
    insts = [fake(i, 10, 10, pl=(-60.0, -70.0, -80.0)) for i in range(5)]
    rows = conditional_breakdown(evaluate(OracleLocalizer(), insts), insts, b, margins=(0.0,))
    assert {r["bucket"]: r["count"] for r in rows} == {"0": 0, "1": 0, "2": 0, "3": 5, "Overall": 5}
    assert math.isnan(rows[0]["aed_m"])


def test_nonincreasing():
    assert is_nonincreasing([98.8, 50.0, float("nan"), 19.6])
    assert not is_nonincreasing([10.0, 12.0])


def test_error_cdf():
    e = np.array([0.2, 0.2, 1.0, np.nan, 150.0])
    binned, exact = error_cdf(e)
    assert binned[0] == (0.0, 0.0) and binned[1] == (0.5, 0.5) and binned[2] == (1.0, 0.75)
    assert binned[-1] == (100.0, 0.75) and len(binned) == 201
    assert exact == [(0.2, 0.5), (1.0, 0.75), (150.0, 1.0)]
    assert error_cdf(np.array([np.nan]))[1] == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 300, allow_nan=False), min_size=1, max_size=40))
def test_cdf_monotone(errs):
    binned, exact = error_cdf(np.array(errs))
    f = [x[1] for x in binned] + [x[1] for x in exact]
    assert all(a <= b for a, b in zip(f[:len(binned)], f[1:len(binned)]))
    assert all(a < b for a, b in zip(f[len(binned):], f[len(binned) + 1:]))
    assert exact[-1][1] == 1.0


def test_csv_roundtrip():
    rows = [{"method": "knn(k=4)", "aed_m": 7.25, "n": 3, "in_distribution": True, "published": ""},
            {"method": "x", "aed_m": float("nan"), "n": 0, "in_distribution": False, "published": 8.8}]
    back = rows_from_csv(rows_to_csv(rows))
    assert back[0] == rows[0]
    assert math.isnan(back[1]["aed_m"]) and back[1]["published"] == 8.8 and back[1]["in_distribution"] is False


def test_compare_suite_shape(rss_nominal, rss_robust):
    methods = [
        MethodSpec("knn(k=4)", lambda ds: KnnLocalizer(KnnConfig(k=4))),
        MethodSpec("locnet", lambda ds: OracleLocalizer(), trainable=True),
    ]
    rep = compare_suite({"Nominal": rss_nominal, "Robustness": rss_robust}, methods)
    assert [(r["method"], r["scenario"]) for r in rep.rows] == [
        ("knn(k=4)", "Nominal"), ("knn(k=4)", "Robustness"), ("locnet", "Nominal"), ("locnet", "Robustness")]
    assert len(rep.ood) == 2 * len(OOD_SOURCES) == 8
    computed = [r for r in rep.ood if math.isfinite(r["aed_m"])]
    assert {r["source"] for r in computed} == {"DPM", "DPM w/ cars"}
    assert all(r["aed_m"] == 0.0 for r in computed)
    assert sum(r["in_distribution"] for r in rep.ood) == 2
    assert all(r["published"] != "" for r in rep.ood)
    # published values are per method family and BS count
    assert rep.rows[0]["published"] == 17.27 and rep.rows[3]["published"] == 19.28


def test_diagonal_dominance():
    ood = [
        {"method": "m", "train_scenario": "Nominal", "source": "DPM", "aed_m": 5.0, "in_distribution": True},
        {"method": "m", "train_scenario": "Nominal", "source": "DPM w/ cars", "aed_m": 9.0, "in_distribution": False},
        {"method": "m", "train_scenario": "Robustness", "source": "DPM", "aed_m": 4.0, "in_distribution": False},
        {"method": "m", "train_scenario": "Robustness", "source": "DPM w/ cars", "aed_m": 6.0,
         "in_distribution": True},
        {"method": "m", "train_scenario": "Robustness", "source": "IRT", "aed_m": math.nan, "in_distribution": False},
    ]
    assert diagonal_dominance(ood) == {("m", "Nominal"): True, ("m", "Robustness"): False}


def test_toa_bench_rows(toa_clean):
    class Truth:
        name = "pocs"

        def localize(self, inst):
            return inst.truth

    rows = toa_bench({0.0001: toa_clean, 20.0: toa_clean}, [Truth()])
    assert [r["sigma_m"] for r in rows] == [0.0001, 20.0]
    assert rows[0]["aed_m"] == 0.0 and rows[1]["published"] == 48.82


def test_write_reports(tmp_path, rss_nominal):
    insts = rss_nominal.split("test")
    rep = evaluate(CentroidLocalizer(), insts)
    cond = [{**r, "method": rep.method} for r in conditional_breakdown(rep, insts, rss_nominal.budget)]
    bundle = write_reports(tmp_path, [rep.summary()], cond, cdf_rows(rep), config={"a": 1}, dataset_sha256="x")
    assert load_report_json(tmp_path / "report.json") == bundle
    long = rows_from_csv((tmp_path / "report.csv").read_text())
    assert {r["metric"] for r in long} == {"aed_m", "ased_m2", "runtime_ms_mean", "n", "failures"}
    assert rows_from_csv((tmp_path / "conditional.csv").read_text())[0]["method"] == "centroid"
    assert (tmp_path / "cdf.csv").exists() and not (tmp_path / "ood_matrix.csv").exists()


def test_evaluate_deterministic(rss_nominal):
    insts = rss_nominal.split("test")
    a = evaluate(KnnLocalizer(KnnConfig(k=4)), insts)
    b = evaluate(KnnLocalizer(KnnConfig(k=4)), insts)
    assert np.array_equal(a.errors_m, b.errors_m)
