"""Pipeline stages behind the command line.

Every stage writes its files atomically and a ``manifest.json`` last, with
the full config echo, tool version, input manifest checksums, a file table
``{path: {sha256, bytes}}`` and a separate ``timing`` section.  Re-running a
stage from its manifest reproduces every file bit for bit; only ``timing``
differs.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import (
    MapProducts,
    MalformedDatasetError,
    Scenario,
    build_rss_dataset,
    build_toa_dataset,
    load_dataset,
    save_dataset,
    verify_files,
)
from .dpm import DpmConfig, simulate_pair
from .evaluation import (
    PUBLISHED_TOA,
    CentroidLocalizer,
    MethodSpec,
    cdf_rows,
    compare_suite,
    conditional_breakdown,
    evaluate,
    rows_to_csv,
    toa_bench,
    write_reports,
)
from .fingerprint import AdaptiveKnnConfig, AdaptiveKnnLocalizer, KnnConfig, KnnLocalizer
from .grid import CityScene, LinkBudget, Position, to_gray
from .io_utils import atomic_write_bytes, atomic_write_json, atomic_write_text, npz_bytes, png_bytes, quantize_unit, sha256_bytes, sha256_file
from .locnet import EncodedSet, InputEncoding, LocUNet, NetConfig, NetLocalizer, TrainConfig, published_config, train
from .scenes import Deployment, MapScene, SceneGenConfig, generate_map
from .toa import BisectionLocalizer, CorrentropyLocalizer, PocsLocalizer

STAGE_FORMAT = "radioloc-stage"
STAGE_VERSION = 1


class StageError(RuntimeError):
    """A stage input is missing, malformed or from the wrong stage."""


# --------------------------------------------------------------------------
# manifests


class _Out:
    def __init__(self, root):
        self.root = Path(root)
        self.files: dict[str, dict] = {}

    def put(self, rel: str, data: bytes) -> None:
        atomic_write_bytes(self.root / rel, data)
        self.record(rel, data)

    def record(self, rel: str, data: bytes) -> None:
        self.files[rel] = {"sha256": sha256_bytes(data), "bytes": len(data)}


def manifest_digest(man: dict) -> str:
    """SHA-256 of the manifest without its timing section (canonical JSON)."""
    return sha256_bytes(json.dumps(strip_timing(man), sort_keys=True).encode())


def _input_ref(path) -> dict:
    path = Path(path)
    f = path / "manifest.json"
    if not f.is_file():
        raise StageError(f"{path} has no manifest.json")
    return {"path": str(path), "manifest_sha256": manifest_digest(json.loads(f.read_text(encoding="utf-8")))}


def write_manifest(out: _Out, stage: str, config: dict, inputs: dict, timing: dict, extra: dict | None = None,
                   flags: dict | None = None) -> dict:
    man = {
        "format": STAGE_FORMAT,
        "version": STAGE_VERSION,
        "stage": stage,
        "tool_version": __version__,
        "config": config,
        "inputs": inputs,
        "files": dict(sorted(out.files.items())),
        "timing": timing,
    }
    if extra:
        man.update(extra)
    if flags is not None:
        man["flags"] = flags
    atomic_write_json(out.root / "manifest.json", man)
    return man


def read_manifest(path, stage: str | None = None, verify: bool = True) -> dict:
    path = Path(path)
    f = path / "manifest.json"
    try:
        man = json.loads(f.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise StageError(f"no manifest at {f}") from e
    except json.JSONDecodeError as e:
        raise StageError(f"{f} is not valid JSON: {e}") from e
    if man.get("format") != STAGE_FORMAT:
        raise StageError(f"{f} is not a stage manifest")
    if stage is not None and man.get("stage") != stage:
        raise StageError(f"{path} holds stage {man.get('stage')!r}, expected {stage!r}")
    if verify:
        try:
            verify_files(path, man)
        except MalformedDatasetError as e:
            raise StageError(str(e)) from e
    return man


def strip_timing(man: dict) -> dict:
    return {k: v for k, v in man.items() if k != "timing"}


# --------------------------------------------------------------------------
# gen-scenes


def gen_scenes(cfg: SceneGenConfig, out, flags: dict | None = None) -> dict:
    t0 = time.perf_counter()
    o = _Out(out)
    o.root.mkdir(parents=True, exist_ok=True)
    maps = []
    for i in range(cfg.n_maps):
        ms = generate_map(cfg, i)
        sc = ms.scene
        d = f"map_{i:03d}"
        o.put(f"{d}/scene.npz", npz_bytes(
            buildings=sc.buildings, cars=sc.cars,
            bs=np.array(sc.bs, float).reshape(-1, 2), ue=np.array(sc.ue, float).reshape(-1, 2),
            deployments=np.array([dep.bs_ids for dep in ms.deployments], np.int64).reshape(len(ms.deployments), -1),
            attempts=np.array(ms.attempts),
        ))
        o.put(f"{d}/city.png", png_bytes(sc.buildings.astype(np.uint8) * 255))
        maps.append(i)
    return write_manifest(o, "gen-scenes", {"scene_config": cfg.to_dict()}, {},
                          {"seconds": time.perf_counter() - t0}, {"maps": maps}, flags)


def load_scenes(path) -> tuple[SceneGenConfig, list[MapScene]]:
    man = read_manifest(path, "gen-scenes")
    cfg = SceneGenConfig.from_dict(man["config"]["scene_config"])
    out = []
    for i in man["maps"]:
        with np.load(Path(path) / f"map_{i:03d}" / "scene.npz") as z:
            scene = CityScene(cfg.spec, z["buildings"], z["cars"],
                              tuple(Position(*p) for p in z["bs"]), tuple(Position(*p) for p in z["ue"]))
            deps = tuple(Deployment(d, tuple(int(b) for b in row)) for d, row in enumerate(z["deployments"]))
            out.append(MapScene(int(i), scene, deps, int(z["attempts"])))
    return cfg, out


# --------------------------------------------------------------------------
# simulate


def _sim_job(args):
    ms, cars, budget, dpm = args
    t0 = time.perf_counter()
    m0, m1, _, _ = simulate_pair(ms.scene, budget, dpm)
    maps = m1 if cars else m0
    n = ms.scene.spec.size_px
    if maps:
        pl = np.stack([m.pathloss_db for m in maps])
        ln = np.stack([m.path_len_m for m in maps])
        los = np.stack([m.los for m in maps])
    else:
        pl, ln, los = np.zeros((0, n, n)), np.zeros((0, n, n)), np.zeros((0, n, n), bool)
    return ms.map_id, pl, ln, los, time.perf_counter() - t0


def simulate(scenes_dir, cars: bool, out, budget: LinkBudget | None = None, dpm: DpmConfig | None = None,
             jobs: int = 1, log=print, flags: dict | None = None) -> dict:
    """DPM maps of every BS of every map, one sub-directory per map.

    Each map's ``done.json`` is written after its files; maps whose marker
    matches the current inputs are skipped, so an interrupted run resumes.
    """
    t0 = time.perf_counter()
    budget = budget or LinkBudget()
    dpm = dpm or DpmConfig()
    _, scenes = load_scenes(scenes_dir)
    inputs = {"scenes": _input_ref(scenes_dir)}
    o = _Out(out)
    o.root.mkdir(parents=True, exist_ok=True)
    key = sha256_bytes(json.dumps([inputs["scenes"]["manifest_sha256"], cars, budget.to_dict(), dpm.to_dict()]).encode())
    todo, timing = [], {}
    for ms in scenes:
        d = o.root / f"map_{ms.map_id:03d}"
        done = d / "done.json"
        if done.is_file():
            try:
                marker = json.loads(done.read_text())
            except json.JSONDecodeError:
                marker = {}
            if marker.get("key") == key:
                ok = all((o.root / rel).is_file() and sha256_file(o.root / rel) == meta["sha256"]
                         for rel, meta in marker["files"].items())
                if ok:
                    o.files.update(marker["files"])
                    log(f"map {ms.map_id}: up to date, skipped")
                    continue
        todo.append(ms)
    args = [(ms, cars, budget, dpm) for ms in todo]
    results = ProcessPoolExecutor(jobs).map(_sim_job, args) if jobs > 1 and len(args) > 1 else map(_sim_job, args)
    for k, (mid, pl, ln, los, secs) in enumerate(results, 1):
        d = f"map_{mid:03d}"
        before = set(o.files)
        o.put(f"{d}/radio.npz", npz_bytes(pathloss_db=pl, path_len_m=ln, los=los))
        for b in range(len(pl)):
            o.put(f"{d}/bs_{b:03d}.png", png_bytes(quantize_unit(to_gray(pl[b], budget))))
        mine = {r: o.files[r] for r in sorted(set(o.files) - before)}
        atomic_write_json(o.root / d / "done.json", {"key": key, "files": mine})
        timing[d] = secs
        log(f"map {mid}: {len(pl)} BSs in {secs:.2f} s ({k}/{len(todo)})")
    timing["seconds"] = time.perf_counter() - t0
    config = {"cars": bool(cars), "budget": budget.to_dict(), "dpm": dpm.to_dict()}
    return write_manifest(o, "simulate", config, inputs, timing, {"maps": [ms.map_id for ms in scenes]}, flags)


def load_simulation(path) -> tuple[dict, dict[int, tuple]]:
    man = read_manifest(path, "simulate")
    out = {}
    for mid in man["maps"]:
        with np.load(Path(path) / f"map_{mid:03d}" / "radio.npz") as z:
            out[int(mid)] = (z["pathloss_db"], z["path_len_m"], z["los"])
    return man, out


def _products(scenes, sim_free, sim_cars, budget) -> dict[int, MapProducts]:
    prods = {}
    for ms in scenes:
        pf, lf, sf = sim_free[ms.map_id]
        pc, lc, sc = sim_cars[ms.map_id]
        prods[ms.map_id] = MapProducts(ms.map_id, ms.scene, ms.deployments, budget, pf, pc, lf, lc, sf, sc)
    return prods


# --------------------------------------------------------------------------
# make-dataset


def make_dataset(scenes_dir, sim_dir, sim_cars_dir, out, kind: str = "rss", scenario: str = "Nominal",
                 seed: int = 0, noise_db: float = 0.0, noise_sigma_m: float = 0.0, excess_delay: bool = False,
                 jobs: int = 1, flags: dict | None = None) -> dict:
    t0 = time.perf_counter()
    scfg, scenes = load_scenes(scenes_dir)
    m_free, free = load_simulation(sim_dir)
    m_cars, cars = load_simulation(sim_cars_dir)
    if m_free["config"]["cars"] or not m_cars["config"]["cars"]:
        raise StageError("--sim must be a cars=off simulation and --sim-cars a cars=on one")
    budget = LinkBudget.from_dict(m_free["config"]["budget"])
    dpm = DpmConfig.from_dict(m_free["config"]["dpm"])
    prods = _products(scenes, free, cars, budget)
    if kind == "rss":
        ds = build_rss_dataset(scenes, Scenario(scenario), budget, dpm, seed, prods, noise_db, scfg.to_dict())
    elif kind == "toa":
        ds = build_toa_dataset(scenes, budget, dpm, noise_sigma_m, excess_delay, seed, products=prods)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    out = Path(out)
    save_dataset(ds, out)
    o = _Out(out)
    o.record("dataset.json", (out / "dataset.json").read_bytes())
    config = {"kind": kind, "scenario": scenario, "seed": seed, "noise_db": noise_db,
              "noise_sigma_m": noise_sigma_m, "excess_delay": excess_delay}
    inputs = {"scenes": _input_ref(scenes_dir), "sim": _input_ref(sim_dir), "sim_cars": _input_ref(sim_cars_dir)}
    return write_manifest(o, "make-dataset", config, inputs, {"seconds": time.perf_counter() - t0}, None, flags)


def open_dataset(path):
    read_manifest(path, "make-dataset", verify=False)
    return load_dataset(path)


# --------------------------------------------------------------------------
# train


def train_model(dataset_dir, out, tc: TrainConfig, enc: InputEncoding = InputEncoding(),
                final_activation: str = "leaky-relu", width_div: int = 5, min_res_px: int = 2,
                head_bias: float = 0.0, log=print, flags: dict | None = None) -> dict:
    t0 = time.perf_counter()
    ds = open_dataset(dataset_dir)
    tr = EncodedSet(ds.split("train"), enc, ds.budget)
    va = EncodedSet(ds.split("val"), enc, ds.budget)
    cfg = published_config(enc.n_channels(tr.J), tr.grid, width_div, min_res_px, final_activation, head_bias)
    net = LocUNet(cfg, seed=tc.seed)
    res = train(net, tr, va, tc, log_fn=lambda r: log(
        f"epoch {r['epoch']}: train_loss {r['train_loss']:.4f} val_aed {r['val_aed']:.3f} m"))
    o = _Out(out)
    from .autodiff import checkpoint

    o.put("model.ckpt", checkpoint.dumps(net.state_dict()))
    o.put("train_log.csv", res.log_csv().encode())
    config = {"net": cfg.to_dict(), "train": tc.to_dict(),
              "encoding": {"use_city": enc.use_city, "use_tx_onehot": enc.use_tx_onehot}, "init": res.init}
    summary = {"best_epoch": res.best_epoch, "best_val_aed_m": res.best_val_aed_m,
               "centroid_aed_m": res.centroid_aed_m, "converged": res.converged, "diverged": res.diverged,
               "degenerate_batches": res.degenerate_batches, "batches": res.batches}
    return write_manifest(o, "train", config, {"dataset": _input_ref(dataset_dir)},
                          {"seconds": time.perf_counter() - t0}, {"result": summary}, flags)


def load_model(path) -> tuple[LocUNet, InputEncoding]:
    man = read_manifest(path, "train")
    cfg = NetConfig.from_dict(man["config"]["net"])
    enc = InputEncoding(**man["config"]["encoding"])
    net = LocUNet(cfg, dtype=np.dtype(man["config"]["train"]["dtype"]).type)
    net.load(Path(path) / "model.ckpt")
    return net, enc


# --------------------------------------------------------------------------
# evaluate / compare


METHODS = ("knn", "adaptive-knn", "locnet", "centroid")
# best fixed k at desk scale (64 px at 4 m, 3 BSs); the full-scale operating points do not transfer
DESK_KNN_K = 16


def build_method(name: str, ds, model_dir=None, k: int | None = None):
    if name == "knn":
        return KnnLocalizer(KnnConfig(k=k or DESK_KNN_K))
    if name == "adaptive-knn":
        return AdaptiveKnnLocalizer(AdaptiveKnnConfig())
    if name == "centroid":
        return CentroidLocalizer()
    if name == "locnet":
        if model_dir is None:
            raise StageError("method locnet needs a trained model (--model)")
        net, enc = load_model(model_dir)
        return NetLocalizer(net, enc, ds.budget)
    raise StageError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


def _strip_runtime(rows: list[dict]) -> tuple[list[dict], dict]:
    """Move runtimes out of report rows into the timing section."""
    timing = {}
    clean = []
    for r in rows:
        r = dict(r)
        rt = r.pop("runtime_ms_mean", None)
        timing[f"{r['method']}@{r.get('scenario', r.get('sigma_m', ''))}"] = rt
        clean.append(r)
    return clean, timing


def evaluate_stage(dataset_dir, methods: Sequence[str], out, split: str = "test", model_dir=None,
                   k: int | None = None, flags: dict | None = None) -> dict:
    t0 = time.perf_counter()
    ds = open_dataset(dataset_dir)
    insts = ds.split(split)
    rows, cond, cdf = [], [], []
    for name in methods:
        rep = evaluate(build_method(name, ds, model_dir, k), insts)
        rows.append({**rep.summary(), "scenario": ds.scenario.value})
        cond += [{"method": rep.method, **r} for r in conditional_breakdown(rep, insts, ds.budget)]
        cdf += cdf_rows(rep)
    rows, rt = _strip_runtime(rows)
    config = {"methods": list(methods), "split": split, "k": k}
    inputs = {"dataset": _input_ref(dataset_dir)}
    if model_dir is not None:
        inputs["model"] = _input_ref(model_dir)
    write_reports(out, rows, cond, cdf, None, config, inputs["dataset"]["manifest_sha256"])
    o = _Out(out)
    for f in ("report.csv", "conditional.csv", "cdf.csv", "report.json"):
        o.record(f, (Path(out) / f).read_bytes())
    return write_manifest(o, "evaluate", config, inputs, {"seconds": time.perf_counter() - t0, "runtime_ms_mean": rt},
                          None, flags)


def compare_stage(nominal_dir, robustness_dir, methods: Sequence[str], out, split: str = "test",
                  model_nominal=None, model_robustness=None, k: int | None = None, flags: dict | None = None) -> dict:
    t0 = time.perf_counter()
    nom, rob = open_dataset(nominal_dir), open_dataset(robustness_dir)
    models = {"Nominal": model_nominal, "Robustness": model_robustness}
    specs = []
    for name in methods:
        if name == "locnet":
            specs.append(MethodSpec(name, lambda ds: build_method("locnet", ds, models[ds.scenario.value]), True))
        else:
            specs.append(MethodSpec(name, lambda ds, n=name: build_method(n, ds, None, k)))
    rep = compare_suite({"Nominal": nom, "Robustness": rob}, specs, split)
    rows, rt = _strip_runtime(rep.rows)
    table = []
    for name in methods:
        r = {x["scenario"]: x for x in rows if x["method"] == name}
        table.append({"method": name, "Nominal": r["Nominal"]["aed_m"], "Robustness": r["Robustness"]["aed_m"],
                      "published_Nominal": r["Nominal"]["published"],
                      "published_Robustness": r["Robustness"]["published"]})
    o = _Out(out)
    o.put("comparison.csv", rows_to_csv(table).encode())
    config = {"methods": list(methods), "split": split, "k": k}
    inputs = {"nominal": _input_ref(nominal_dir), "robustness": _input_ref(robustness_dir)}
    for key, m in (("model_nominal", model_nominal), ("model_robustness", model_robustness)):
        if m is not None:
            inputs[key] = _input_ref(m)
    write_reports(out, rows, None, None, rep.ood, config, inputs["nominal"]["manifest_sha256"])
    for f in ("report.csv", "ood_matrix.csv", "report.json"):
        o.record(f, (Path(out) / f).read_bytes())
    return write_manifest(o, "compare", config, inputs, {"seconds": time.perf_counter() - t0, "runtime_ms_mean": rt},
                          None, flags)


# --------------------------------------------------------------------------
# toa-bench


def subset_anchors(ds, n: int, seed: int):
    """Keep a seeded random ``n``-subset of each instance's anchors (BS order kept)."""
    from .dataset import ToaDataset, ToaInstance

    if n < 1:
        raise ValueError("anchors must be >= 1")
    insts = []
    for i in ds.instances:
        J = len(i.bs_ids)
        if n >= J:
            insts.append(i)
            continue
        sel = np.sort(np.random.default_rng([seed, i.map_id, i.deployment_id]).choice(J, n, replace=False))
        insts.append(ToaInstance(
            i.instance_id, i.map_id, i.deployment_id, i.ue_id, tuple(i.bs_ids[s] for s in sel),
            tuple(i.anchors[s] for s in sel), i.ranges_m[sel], i.clean_ranges_m[sel], i.straight_m[sel],
            i.los[sel], i.truth,
        ))
    return ToaDataset(ds.spec, ds.seed, ds.noise_sigma_m, ds.excess_delay, ds.splits, insts, ds.skipped)


def toa_solvers(sigma: float, biases: Sequence[float]):
    return [PocsLocalizer(), BisectionLocalizer(0.0)] + [BisectionLocalizer(b) for b in biases] + [
        CorrentropyLocalizer(sigma)]


def toa_bench_stage(scenes_dir, sim_dir, out, sigmas: Sequence[float] = (0.0001, 10.0, 20.0),
                    biases: Sequence[float] = (0.7, 20.0), anchors: int = 3, seed: int = 0,
                    split: str | None = "test", limit: int | None = None, flags: dict | None = None) -> dict:
    t0 = time.perf_counter()
    _, scenes = load_scenes(scenes_dir)
    m_free, free = load_simulation(sim_dir)
    budget = LinkBudget.from_dict(m_free["config"]["budget"])
    dpm = DpmConfig.from_dict(m_free["config"]["dpm"])
    prods = _products(scenes, free, free, budget)
    rows = []
    for s in sigmas:
        ds = subset_anchors(build_toa_dataset(scenes, budget, dpm, float(s), seed=seed, products=prods), anchors, seed)
        if limit is not None:
            insts = (ds.split(split) if split else ds.instances)[:limit]
            ds = replace(ds, instances=insts, splits={"all": sorted({i.map_id for i in insts})})
            sp = "all"
        else:
            sp = split
        rows += toa_bench({float(s): ds}, toa_solvers(float(s), biases), sp)
    rows, rt = _strip_runtime(rows)
    table = []
    for name in dict.fromkeys(r["method"] for r in rows):
        row = {"method": name}
        for s in sigmas:
            hit = [r for r in rows if r["method"] == name and r["sigma_m"] == float(s)]
            row[f"sigma={float(s):g}"] = hit[0]["aed_m"] if hit else math.nan
            row[f"published sigma={float(s):g}"] = PUBLISHED_TOA.get((name, float(s)), "")
        table.append(row)
    o = _Out(out)
    o.put("toa_bench.csv", rows_to_csv(table).encode())
    config = {"sigmas": [float(s) for s in sigmas], "biases": [float(b) for b in biases], "anchors": anchors,
              "seed": seed, "split": split, "limit": limit}
    write_reports(out, rows, config=config)
    for f in ("report.csv", "report.json"):
        o.record(f, (Path(out) / f).read_bytes())
    inputs = {"scenes": _input_ref(scenes_dir), "sim": _input_ref(sim_dir)}
    return write_manifest(o, "toa-bench", config, inputs, {"seconds": time.perf_counter() - t0, "runtime_ms_mean": rt},
                          None, flags)
