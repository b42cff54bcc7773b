"""Evaluation harness: AED/ASED, conditional breakdowns, CDFs, runtimes and
comparison reports shaped like the published tables.

Methods are objects with ``name`` and ``localize(instance) -> Position`` in
the instance's own units (pixels for RSS instances, meters for ToA).  An
optional ``localize_batch(instances) -> (positions (N, 2), ok mask)`` is used
when present.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import LinkBudget, Position, count_detectable
from .io_utils import atomic_write_json, atomic_write_text

# Values published for the full-scale benchmark (5 BSs unless noted), shown
# next to computed results and never mixed with them.
PUBLISHED_FINGERPRINT = {
    ("knn", "Nominal"): 7.01,
    ("adaptive-knn", "Nominal"): 7.49,
    ("locnet", "Nominal"): 4.73,
    ("knn", "Robustness"): 27.19,
    ("adaptive-knn", "Robustness"): 29.51,
    ("locnet", "Robustness"): 12.85,
}
PUBLISHED_FINGERPRINT_3BS = {
    ("knn", "Nominal"): 17.27,
    ("adaptive-knn", "Nominal"): 16.18,
    ("locnet", "Nominal"): 10.19,
    ("knn", "Robustness"): 38.54,
    ("adaptive-knn", "Robustness"): 45.31,
    ("locnet", "Robustness"): 19.28,
}
OOD_SOURCES = ("DPM", "DPM w/ cars", "IRT", "IRT w/ cars")
PUBLISHED_OOD = {
    "Nominal": (4.73, 8.80, 20.50, 23.85),
    "Robustness": (13.63, 13.12, 11.84, 12.85),
}
# ToA ranging with 3 anchors: noiseless (sigma 1e-4 m) and noisy
PUBLISHED_TOA = {
    ("pocs", 0.0001): 46.28,
    ("bisection(b=20)", 0.0001): 15.94,
    ("bisection(b=0.7)", 0.0001): 15.01,
    ("correntropy", 0.0001): 18.47,
    ("pocs", 10.0): 47.37,
    ("bisection(b=20)", 10.0): 25.37,
    ("bisection(b=0.7)", 10.0): 27.29,
    ("correntropy", 10.0): 31.25,
    ("pocs", 20.0): 48.82,
    ("bisection(b=20)", 20.0): 38.18,
    ("bisection(b=0.7)", 20.0): 40.92,
    ("correntropy", 20.0): 45.72,
}


def instance_unit_m(inst) -> float:
    """Meters per coordinate unit of an instance (RSS: pixel length; ToA: 1)."""
    spec = getattr(inst, "spec", None)
    return spec.pixel_len_m if spec is not None else 1.0


# --------------------------------------------------------------------------
# methods


class CentroidLocalizer:
    """Always predicts a fixed point; by default the map center."""

    name = "centroid"

    def __init__(self, point: Position | None = None):
        self.point = point

    def localize(self, inst) -> Position:
        if self.point is not None:
            return self.point
        c = inst.spec.center
        return Position(c, c)


class OracleLocalizer:
    name = "oracle"

    def localize(self, inst) -> Position:
        return inst.truth


def mean_distance_to_center(lo: float, hi: float, n: int = 1 << 20, seed: int = 0) -> float:
    """Monte-Carlo mean distance from a uniform point in ``[lo, hi]^2`` to its center."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(lo, hi, (n, 2)) - (lo + hi) / 2.0
    return float(np.hypot(p[:, 0], p[:, 1]).mean())


def mean_distance_to_center_exact(side: float) -> float:
    """Closed form of the same mean for a square of side ``side``:
    ``side * (sqrt(2) + asinh(1)) / 6``."""
    return side * (math.sqrt(2.0) + math.asinh(1.0)) / 6.0


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    method: str
    instance_ids: np.ndarray
    errors_m: np.ndarray  # NaN marks a failure
    estimates: np.ndarray  # (N, 2) in instance units, NaN on failure
    runtime_ms: np.ndarray  # per instance (indicative only)
    failures: int
    failure_reasons: dict = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.errors_m)

    @property
    def aed_m(self) -> float:
        e = self.errors_m[self.ok]
        return float(e.mean()) if len(e) else math.nan

    @property
    def ased_m2(self) -> float:
        e = self.errors_m[self.ok]
        return float((e ** 2).mean()) if len(e) else math.nan

    @property
    def runtime_ms_mean(self) -> float:
        return float(self.runtime_ms.mean()) if len(self.runtime_ms) else math.nan

    def summary(self) -> dict:
        return {
            "method": self.method,
            "aed_m": self.aed_m,
            "ased_m2": self.ased_m2,
            "runtime_ms_mean": self.runtime_ms_mean,
            "n": int(len(self.errors_m)),
            "failures": int(self.failures),
        }


def evaluate(method, instances: Sequence, name: str | None = None) -> EvalReport:
    """Localize every instance; failures (exceptions or invalid outputs) are
    counted and excluded from the AED."""
    insts = list(instances)
    n = len(insts)
    est = np.full((n, 2), np.nan)
    rt = np.zeros(n)
    reasons: dict[str, int] = {}
    if hasattr(method, "localize_batch") and n:
        t0 = time.perf_counter()
        pts, ok = method.localize_batch(insts)
        rt[:] = (time.perf_counter() - t0) * 1e3 / n
        est[ok] = np.asarray(pts, float)[ok]
        if (~ok).any():
            reasons["degenerate"] = int((~ok).sum())
    else:
        for i, inst in enumerate(insts):
            t0 = time.perf_counter()
            try:
                p = method.localize(inst)
                est[i] = (p.x, p.y)
            except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
                key = type(e).__name__
                reasons[key] = reasons.get(key, 0) + 1
            rt[i] = (time.perf_counter() - t0) * 1e3
    truth = np.array([(i.truth.x, i.truth.y) for i in insts], float).reshape(n, 2)
    unit = np.array([instance_unit_m(i) for i in insts], float)
    err = np.hypot(*(est - truth).T) * unit
    bad = ~np.isfinite(err)
    err[bad] = np.nan
    return EvalReport(
        name or getattr(method, "name", type(method).__name__),
        np.array([i.instance_id for i in insts], np.int64),
        err, est, rt, int(bad.sum()), reasons,
    )


# --------------------------------------------------------------------------
# conditional performance


def conditional_breakdown(report: EvalReport, instances: Sequence, budget: LinkBudget,
                          margins: Sequence[float] = (0.0, 10.0)) -> list[dict]:
    """AED per number of BSs detectable above the noise floor (+ margin).

    Rows ``{margin_db, bucket, aed_m, count}`` with buckets ``0..J`` then
    ``"Overall"``; empty buckets have count 0 and NaN AED.  Failures count
    towards bucket sizes but not AEDs.
    """
    insts = list(instances)
    J = max((len(i.bs_ids) for i in insts), default=0)
    rows = []
    for m in margins:
        det = np.array([count_detectable(i.measured_pl, budget, m) for i in insts], int)
        for b in range(J + 1):
            sel = det == b
            e = report.errors_m[sel]
            e = e[np.isfinite(e)]
            rows.append({"margin_db": float(m), "bucket": str(b), "aed_m": float(e.mean()) if len(e) else math.nan,
                         "count": int(sel.sum())})
        rows.append({"margin_db": float(m), "bucket": "Overall", "aed_m": report.aed_m, "count": len(insts)})
    return rows


def is_nonincreasing(values: Sequence[float], tol: float = 0.0) -> bool:
    v = [x for x in values if math.isfinite(x)]
    return all(b <= a + tol for a, b in zip(v, v[1:]))


# --------------------------------------------------------------------------
# CDFs


def error_cdf(errors_m: np.ndarray, width: float = 0.5, upto: float = 100.0):
    """``(binned, exact)``: binned is ``[(edge, fraction <= edge)]`` on a
    ``width`` grid up to ``upto``; exact is ``[(error, fraction)]`` at each
    distinct error.  Fractions are over the successful instances."""
    e = np.sort(np.asarray(errors_m, float)[np.isfinite(errors_m)])
    edges = np.arange(0.0, upto + width / 2, width)
    if len(e) == 0:
        return [(float(x), 0.0) for x in edges], []
    binned = [(float(x), float(np.searchsorted(e, x, side="right") / len(e))) for x in edges]
    vals, counts = np.unique(e, return_counts=True)
    frac = np.cumsum(counts) / len(e)
    return binned, [(float(v), float(f)) for v, f in zip(vals, frac)]


# --------------------------------------------------------------------------
# comparison suite


@dataclass
class MethodSpec:
    """``build(train_dataset)`` returns a localizer; trainable methods are
    built once per training scenario and evaluated on every measurement source."""

    name: str
    build: Callable
    trainable: bool = False


@dataclass
class ComparisonReport:
    rows: list[dict]  # method, scenario, aed_m, ased_m2, runtime_ms_mean, n, failures, published
    ood: list[dict]  # method, train_scenario, source, aed_m, in_distribution, published
    reports: dict = field(default_factory=dict, repr=False)


def _published(name: str, scenario: str, n_bs: int):
    base = name.split("(")[0]
    table = PUBLISHED_FINGERPRINT if n_bs == 5 else PUBLISHED_FINGERPRINT_3BS if n_bs == 3 else {}
    return table.get((base, scenario), "")


def compare_suite(datasets: dict, methods: Sequence[MethodSpec], split: str = "test",
                  external: dict | None = None) -> ComparisonReport:
    """Evaluate methods on the Nominal and Robustness datasets, plus the
    out-of-distribution matrix for trainable methods.

    ``datasets`` maps scenario name ("Nominal", "Robustness") to an
    ``RssDataset``; each OOD source is a dataset with the same instances but
    measurements from another ground truth.  The DPM sources are derived
    here; ``external`` may supply the two IRT sources by name.
    """
    from .dataset import Scenario

    nominal = datasets["Nominal"]
    sources = {
        "DPM": nominal.with_scenario(Scenario.OOD_DPM),
        "DPM w/ cars": nominal.with_scenario(Scenario.OOD_DPM_CARS),
    }
    sources.update(external or {})
    in_dist = {"Nominal": "DPM", "Robustness": "DPM w/ cars"}
    rows, ood, reports = [], [], {}
    for spec in methods:
        for scen in ("Nominal", "Robustness"):
            ds = datasets[scen]
            loc = spec.build(ds)
            rep = evaluate(loc, ds.split(split), name=spec.name)
            reports[(spec.name, scen)] = rep
            rows.append({**rep.summary(), "scenario": scen, "published": _published(spec.name, scen, ds.n_bs)})
            if not spec.trainable:
                continue
            for j, src in enumerate(OOD_SOURCES):
                if src in sources:
                    r = evaluate(loc, sources[src].split(split), name=spec.name)
                    val = r.aed_m
                else:
                    val = math.nan
                ood.append({
                    "method": spec.name, "train_scenario": scen, "source": src, "aed_m": val,
                    "in_distribution": in_dist[scen] == src,
                    "published": PUBLISHED_OOD[scen][j] if spec.name.startswith("locnet") else "",
                })
    return ComparisonReport(rows, ood, reports)


def diagonal_dominance(ood: list[dict]) -> dict[tuple[str, str], bool]:
    """Per (method, train scenario): in-distribution AED <= every other computed source."""
    out = {}
    keys = {(r["method"], r["train_scenario"]) for r in ood}
    for k in sorted(keys):
        cells = [r for r in ood if (r["method"], r["train_scenario"]) == k and math.isfinite(r["aed_m"])]
        diag = [r["aed_m"] for r in cells if r["in_distribution"]]
        others = [r["aed_m"] for r in cells if not r["in_distribution"]]
        out[k] = bool(diag) and all(diag[0] <= o for o in others)
    return out


# --------------------------------------------------------------------------
# ToA bench


def toa_bench(datasets_by_sigma: dict, solvers: Sequence, split: str | None = None) -> list[dict]:
    """Rows ``{method, sigma_m, aed_m, runtime_ms_mean, n, failures, published}``.

    ``datasets_by_sigma`` maps the noise sigma to a ``ToaDataset``;
    ``solvers`` are localizers (their ``name`` keys the published values).
    """
    rows = []
    for sigma in sorted(datasets_by_sigma):
        ds = datasets_by_sigma[sigma]
        insts = ds.split(split) if split else ds.instances
        for s in solvers:
            rep = evaluate(s, insts)
            rows.append({**rep.summary(), "sigma_m": float(sigma),
                         "published": PUBLISHED_TOA.get((rep.method, float(sigma)), "")})
    return rows


# --------------------------------------------------------------------------
# serialization


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    if v in ("true", "false"):
        return v == "true"
    if v == "":
        return ""
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def rows_to_csv(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    cols = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[dict]:
    rd = csv.reader(io.StringIO(text))
    header = next(rd, None)
    if header is None:
        return []
    return [{k: _parse(v) for k, v in zip(header, row)} for row in rd]


def long_report_rows(rows: list[dict]) -> list[dict]:
    """``method,metric,value`` rows from summary rows."""
    out = []
    for r in rows:
        tag = r["method"] + (f"@{r['scenario']}" if "scenario" in r else "") + (
            f"@sigma={r['sigma_m']:g}" if "sigma_m" in r else "")
        for metric in ("aed_m", "ased_m2", "runtime_ms_mean", "n", "failures", "published"):
            if metric in r:
                out.append({"method": tag, "metric": metric, "value": r[metric]})
    return out


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def write_reports(out_dir, rows: list[dict], conditional: list[dict] | None = None,
                  cdf: list[dict] | None = None, ood: list[dict] | None = None,
                  config: dict | None = None, dataset_sha256: str | None = None) -> dict:
    """Write report.csv (method,metric,value), conditional.csv, cdf.csv,
    ood_matrix.csv and report.json bundling them; returns the bundle."""
    from pathlib import Path

    out = Path(out_dir)
    atomic_write_text(out / "report.csv", rows_to_csv(long_report_rows(rows), ["method", "metric", "value"]))
    bundle = {"summary": rows, "config": config or {}, "dataset_sha256": dataset_sha256}
    if conditional is not None:
        atomic_write_text(out / "conditional.csv",
                          rows_to_csv(conditional, ["method", "margin_db", "bucket", "aed_m", "count"]))
        bundle["conditional"] = conditional
    if cdf is not None:
        atomic_write_text(out / "cdf.csv", rows_to_csv(cdf, ["method", "kind", "error_m", "fraction"]))
        bundle["cdf"] = cdf
    if ood is not None:
        atomic_write_text(out / "ood_matrix.csv", rows_to_csv(
            ood, ["method", "train_scenario", "source", "aed_m", "in_distribution", "published"]))
        bundle["ood"] = ood
    bundle = _json_safe(bundle)
    atomic_write_json(out / "report.json", bundle)
    return bundle


def cdf_rows(report: EvalReport, width: float = 0.5, upto: float = 100.0) -> list[dict]:
    binned, exact = error_cdf(report.errors_m, width, upto)
    return ([{"method": report.method, "kind": "binned", "error_m": e, "fraction": f} for e, f in binned]
            + [{"method": report.method, "kind": "exact", "error_m": e, "fraction": f} for e, f in exact])


def load_report_json(path) -> dict:
    with open(path) as f:
        return json.load(f)
