"""Localization datasets: RSS fingerprint instances and ToA ranging instances.

Each city map is simulated twice (without and with cars).  Those two
products feed every scenario: the estimated radio maps are always the
car-free ones, while the measurements are read from whichever ground truth
the scenario names.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .dpm import DpmConfig, simulate_pair, straight_len_m
from .grid import CityScene, GridSpec, LinkBudget, Position, RadioMap, pixel_index, to_gray
from .io_utils import (
    atomic_write_bytes,
    atomic_write_json,
    npz_bytes,
    png_bytes,
    quantize_unit,
    read_png_gray,
    sha256_bytes,
    sha256_file,
)
from .scenes import Deployment, MapScene, split_maps

FORMAT_NAME = "radioloc-dataset"
FORMAT_VERSION = 1


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MalformedDatasetError(DatasetError):
    """Missing, truncated or unparsable dataset file."""


class DatasetVersionError(DatasetError):
    """Dataset written by an incompatible format version."""


class ChecksumMismatchError(DatasetError):
    """File content differs from the checksum recorded in the manifest."""


class MissingProductsError(ValueError):
    """Simulation products required by the builder are absent."""


class Scenario(enum.Enum):
    NOMINAL = "Nominal"
    ROBUSTNESS = "Robustness"
    OOD_DPM = "OOD-DPM"
    OOD_DPM_CARS = "OOD-DPM-cars"

    @property
    def estimated_from(self) -> str:
        return "DPM-no-cars"

    @property
    def ground_truth_from(self) -> str:
        if self in (Scenario.ROBUSTNESS, Scenario.OOD_DPM_CARS):
            return "DPM-with-cars"
        return "DPM-no-cars"

    @property
    def measures_cars(self) -> bool:
        return self.ground_truth_from == "DPM-with-cars"


# --------------------------------------------------------------------------
# simulation products


@dataclass(eq=False)
class MapProducts:
    """Both DPM passes over one map, stacked per BS of the pool."""

    map_id: int
    scene: CityScene
    deployments: tuple[Deployment, ...]
    budget: LinkBudget
    pl_free: np.ndarray  # (B, n, n) car-free pathloss, dB
    pl_cars: np.ndarray  # (B, n, n) with cars
    len_free: np.ndarray  # (B, n, n) dominant-path length, m (inf when unreachable)
    len_cars: np.ndarray
    los_free: np.ndarray  # (B, n, n) bool
    los_cars: np.ndarray
    _maps: dict = field(default_factory=dict, repr=False)

    @property
    def n_bs(self) -> int:
        return self.pl_free.shape[0]

    def radio_map(self, bs_id: int, with_cars: bool = False) -> RadioMap:
        key = (int(bs_id), bool(with_cars))
        if key not in self._maps:
            pl = self.pl_cars if with_cars else self.pl_free
            ln = self.len_cars if with_cars else self.len_free
            los = self.los_cars if with_cars else self.los_free
            self._maps[key] = RadioMap(
                spec=self.scene.spec,
                bs=self.scene.bs[bs_id],
                pathloss_db=pl[bs_id],
                path_len_m=ln[bs_id],
                los=los[bs_id],
                truncated=pl[bs_id] <= self.budget.noise_floor_db,
            )
        return self._maps[key]

    def stack(self, with_cars: bool) -> np.ndarray:
        return self.pl_cars if with_cars else self.pl_free


def simulate_products(ms: MapScene, budget: LinkBudget | None = None, cfg: DpmConfig | None = None) -> MapProducts:
    budget = budget or LinkBudget()
    cfg = cfg or DpmConfig()
    m0, m1, _, _ = simulate_pair(ms.scene, budget, cfg)

    def stk(maps, attr):
        n = ms.scene.spec.size_px
        if not maps:
            return np.zeros((0, n, n), bool if attr == "los" else float)
        return np.stack([getattr(m, attr) for m in maps])

    return MapProducts(
        map_id=ms.map_id,
        scene=ms.scene,
        deployments=ms.deployments,
        budget=budget,
        pl_free=stk(m0, "pathloss_db"),
        pl_cars=stk(m1, "pathloss_db"),
        len_free=stk(m0, "path_len_m"),
        len_cars=stk(m1, "path_len_m"),
        los_free=stk(m0, "los"),
        los_cars=stk(m1, "los"),
    )


def _simulate_job(args):
    return simulate_products(*args)


def simulate_all(scenes: Sequence[MapScene], budget=None, cfg=None, jobs: int = 1) -> dict[int, MapProducts]:
    """Products for every map, keyed by map id; ``jobs > 1`` runs maps in worker processes."""
    budget = budget or LinkBudget()
    cfg = cfg or DpmConfig()
    args = [(ms, budget, cfg) for ms in scenes]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_simulate_job, args))
    else:
        out = [_simulate_job(a) for a in args]
    return {p.map_id: p for p in out}


# --------------------------------------------------------------------------
# RSS instances


@dataclass(frozen=True, eq=False)
class LocalizationInstance:
    instance_id: int
    map_id: int
    deployment_id: int
    ue_id: int
    bs_ids: tuple[int, ...]
    measured_pl: np.ndarray
    truth: Position
    products: MapProducts = field(repr=False)

    @property
    def est_maps(self) -> tuple[RadioMap, ...]:
        return tuple(self.products.radio_map(b, with_cars=False) for b in self.bs_ids)

    @property
    def est_pl(self) -> np.ndarray:
        """(J, n, n) estimated pathloss stack in BS order."""
        return self.products.pl_free[list(self.bs_ids)]

    @property
    def city(self) -> np.ndarray:
        return self.products.scene.buildings

    @property
    def bs_positions(self) -> tuple[Position, ...]:
        return tuple(self.products.scene.bs[b] for b in self.bs_ids)

    @property
    def spec(self) -> GridSpec:
        return self.products.scene.spec


@dataclass(eq=False)
class RssDataset:
    scenario: Scenario
    spec: GridSpec
    budget: LinkBudget
    dpm: DpmConfig
    seed: int
    splits: dict[str, list[int]]
    products: dict[int, MapProducts]
    instances: list[LocalizationInstance]
    noise_db: float = 0.0
    scene_config: dict | None = None

    def split(self, name: str) -> list[LocalizationInstance]:
        maps = set(self.splits[name])
        return [inst for inst in self.instances if inst.map_id in maps]

    def with_scenario(self, scenario: Scenario) -> "RssDataset":
        """Same maps and instances, measurements read from another ground truth."""
        return _assemble_rss(
            self.products, scenario, self.spec, self.budget, self.dpm, self.seed,
            self.splits, self.noise_db, self.scene_config,
        )

    @property
    def n_bs(self) -> int:
        return len(self.instances[0].bs_ids) if self.instances else 0


def _measure(products: MapProducts, bs_ids, ue: Position, with_cars: bool, noise_db: float, rng_key, budget) -> np.ndarray:
    r, c = pixel_index(ue)
    pl = products.stack(with_cars)[list(bs_ids), r, c].astype(float)
    if noise_db > 0:
        pl = pl + np.random.default_rng(rng_key).normal(0.0, noise_db, size=pl.shape)
        pl = np.clip(pl, budget.noise_floor_db, 0.0)
    return pl


def _assemble_rss(products, scenario, spec, budget, dpm, seed, splits, noise_db, scene_config) -> RssDataset:
    instances = []
    iid = 0
    for map_id in sorted(products):
        p = products[map_id]
        for dep in p.deployments:
            for u, ue in enumerate(p.scene.ue):
                meas = _measure(p, dep.bs_ids, ue, scenario.measures_cars, noise_db, [seed, iid], budget)
                instances.append(
                    LocalizationInstance(iid, map_id, dep.deployment_id, u, tuple(dep.bs_ids), meas, ue, p)
                )
                iid += 1
    return RssDataset(scenario, spec, budget, dpm, seed, splits, products, instances, noise_db, scene_config)


def build_rss_dataset(
    scenes: Sequence[MapScene],
    scenario: Scenario,
    budget: LinkBudget | None = None,
    cfg: DpmConfig | None = None,
    seed: int = 0,
    products: dict[int, MapProducts] | None = None,
    noise_db: float = 0.0,
    scene_config: dict | None = None,
    jobs: int = 1,
) -> RssDataset:
    """RSS localization instances for every (map, deployment, UE).

    Estimated maps are always the car-free simulation; ``measured_pl`` comes
    from the scenario's ground truth at the UE pixel, plus optional Gaussian
    noise seeded by ``(seed, instance_id)``.
    """
    budget = budget or LinkBudget()
    cfg = cfg or DpmConfig()
    if products is None:
        products = simulate_all(scenes, budget, cfg, jobs)
    missing = [ms.map_id for ms in scenes if ms.map_id not in products]
    if missing:
        raise MissingProductsError(f"no simulation products for maps {missing}")
    products = {ms.map_id: products[ms.map_id] for ms in scenes}
    spec = scenes[0].scene.spec if scenes else GridSpec()
    splits = split_maps([ms.map_id for ms in scenes], seed)
    return _assemble_rss(products, scenario, spec, budget, cfg, seed, splits, noise_db, scene_config)


# --------------------------------------------------------------------------
# ToA instances


@dataclass(frozen=True, eq=False)
class ToaInstance:
    instance_id: int
    map_id: int
    deployment_id: int
    ue_id: int
    bs_ids: tuple[int, ...]
    anchors: tuple[Position, ...]  # meters
    ranges_m: np.ndarray
    clean_ranges_m: np.ndarray
    straight_m: np.ndarray
    los: np.ndarray
    truth: Position  # meters

    @property
    def bias_m(self) -> np.ndarray:
        return self.clean_ranges_m - self.straight_m


@dataclass(eq=False)
class ToaDataset:
    spec: GridSpec
    seed: int
    noise_sigma_m: float
    excess_delay: dict | None
    splits: dict[str, list[int]]
    instances: list[ToaInstance]
    skipped: int = 0

    def split(self, name: str) -> list[ToaInstance]:
        maps = set(self.splits[name])
        return [inst for inst in self.instances if inst.map_id in maps]


def excess_delay_m(eps_r: float, wall_m: float) -> float:
    """Extra range from penetrating ``wall_m`` of material with permittivity ``eps_r``."""
    return (math.sqrt(eps_r) - 1.0) * wall_m


def build_toa_dataset(
    scenes: Sequence[MapScene],
    budget: LinkBudget | None = None,
    cfg: DpmConfig | None = None,
    noise_sigma_m: float = 0.0,
    apply_excess_delay: bool = False,
    seed: int = 0,
    eps_r: float = 4.0,
    wall_m: float = 3.0,
    products: dict[int, MapProducts] | None = None,
    jobs: int = 1,
) -> ToaDataset:
    """ToA ranges = car-free dominant-path lengths (+ seeded Gaussian noise).

    Noisy ranges are clipped at zero.  Instances whose UE cannot be reached
    from some BS of the deployment are skipped and counted.
    """
    if noise_sigma_m < 0:
        raise ValueError("noise_sigma_m must be >= 0")
    budget = budget or LinkBudget()
    cfg = cfg or DpmConfig()
    if products is None:
        products = simulate_all(scenes, budget, cfg, jobs)
    spec = scenes[0].scene.spec if scenes else GridSpec()
    L = spec.pixel_len_m
    extra = excess_delay_m(eps_r, wall_m) if apply_excess_delay else 0.0
    instances = []
    skipped = 0
    iid = 0
    for ms in scenes:
        if ms.map_id not in products:
            raise MissingProductsError(f"no simulation products for map {ms.map_id}")
        p = products[ms.map_id]
        for dep in p.deployments:
            ids = list(dep.bs_ids)
            bs = [p.scene.bs[b] for b in ids]
            for u, ue in enumerate(p.scene.ue):
                key = iid
                iid += 1
                r, c = pixel_index(ue)
                clean = p.len_free[ids, r, c].astype(float)
                if not np.all(np.isfinite(clean)):
                    skipped += 1
                    continue
                los = p.los_free[ids, r, c].copy()
                straight = np.array([straight_len_m(b, ue, L) for b in bs])
                rng_ = clean + np.where(los, 0.0, extra)
                if noise_sigma_m > 0:
                    noise = np.random.default_rng([seed, key]).normal(0.0, noise_sigma_m, size=len(ids))
                    rng_ = np.maximum(rng_ + noise, 0.0)
                instances.append(
                    ToaInstance(
                        key, ms.map_id, dep.deployment_id, u, tuple(ids),
                        tuple(Position(b.x * L, b.y * L) for b in bs),
                        rng_, clean, straight, los, Position(ue.x * L, ue.y * L),
                    )
                )
    splits = split_maps([ms.map_id for ms in scenes], seed)
    ed = {"eps_r": eps_r, "wall_m": wall_m} if apply_excess_delay else None
    return ToaDataset(spec, seed, noise_sigma_m, ed, splits, instances, skipped)


@dataclass(frozen=True)
class BiasCdf:
    """Empirical CDF of the NLOS bias (dominant minus straight-line length)."""

    bias_m: np.ndarray  # distinct sorted values
    fraction: np.ndarray  # P(bias <= value)
    n_links: int
    los_fraction: float
    nlos_below_30m: float  # fraction of NLOS links with bias < 30 m

    def at(self, x: float) -> float:
        i = np.searchsorted(self.bias_m, x, side="right")
        return 0.0 if i == 0 else float(self.fraction[i - 1])

    def binned(self, width: float = 0.5, upto: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
        edges = np.arange(0.0, upto + width / 2, width)
        return edges, np.array([self.at(e) for e in edges])


def nlos_bias_cdf(data: ToaDataset | Iterable[ToaInstance]) -> BiasCdf:
    insts = data.instances if isinstance(data, ToaDataset) else list(data)
    if not insts:
        return BiasCdf(np.zeros(0), np.zeros(0), 0, 0.0, 0.0)
    bias = np.concatenate([i.bias_m for i in insts])
    los = np.concatenate([i.los for i in insts])
    vals, counts = np.unique(bias, return_counts=True)
    frac = np.cumsum(counts) / len(bias)
    nl = bias[~los]
    below = float(np.mean(nl < 30.0)) if len(nl) else 0.0
    return BiasCdf(vals, frac, len(bias), float(np.mean(los)), below)


# --------------------------------------------------------------------------
# save / load


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class _Writer:
    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, dict] = {}

    def put(self, rel: str, data: bytes) -> None:
        atomic_write_bytes(self.root / rel, data)
        self.files[rel] = {"sha256": sha256_bytes(data), "bytes": len(data)}


def _write_products(w: _Writer, p: MapProducts, budget: LinkBudget) -> None:
    d = f"map_{p.map_id:03d}"
    sc = p.scene
    w.put(f"{d}/city.png", png_bytes(sc.buildings.astype(np.uint8) * 255))
    w.put(f"{d}/cars.png", png_bytes(sc.cars.astype(np.uint8) * 255))
    for b in range(p.n_bs):
        w.put(f"{d}/dpm/bs_{b:03d}.png", png_bytes(quantize_unit(to_gray(p.pl_free[b], budget))))
        w.put(f"{d}/dpm_cars/bs_{b:03d}.png", png_bytes(quantize_unit(to_gray(p.pl_cars[b], budget))))
    deps = np.array([dep.bs_ids for dep in p.deployments], dtype=np.int64)
    w.put(
        f"{d}/products.npz",
        npz_bytes(
            buildings=sc.buildings, cars=sc.cars,
            bs=np.array(sc.bs, float).reshape(-1, 2), ue=np.array(sc.ue, float).reshape(-1, 2),
            deployments=deps.reshape(len(p.deployments), -1),
            pl_free=p.pl_free, pl_cars=p.pl_cars, len_free=p.len_free, len_cars=p.len_cars,
            los_free=p.los_free, los_cars=p.los_cars,
        ),
    )


def _manifest_base(kind: str, spec: GridSpec, seed: int, splits) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tool_version": __version__,
        "kind": kind,
        "spec": spec.to_dict(),
        "seed": seed,
        "splits": {k: list(map(int, v)) for k, v in splits.items()},
    }


def save_dataset(ds: RssDataset | ToaDataset, root) -> Path:
    """Write ``ds`` under ``root``; the manifest ``dataset.json`` is written last."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    w = _Writer(root)
    if isinstance(ds, RssDataset):
        man = _manifest_base("rss", ds.spec, ds.seed, ds.splits)
        man.update(
            scenario=ds.scenario.value, budget=ds.budget.to_dict(), dpm=ds.dpm.to_dict(),
            noise_db=ds.noise_db, scene_config=ds.scene_config, maps=sorted(ds.products),
        )
        for mid in sorted(ds.products):
            _write_products(w, ds.products[mid], ds.budget)
        J = ds.n_bs
        rows = [
            [i.map_id, i.deployment_id, i.ue_id, " ".join(map(str, i.bs_ids)), f"{i.truth.x:.4f}", f"{i.truth.y:.4f}"]
            + [f"{v:.4f}" for v in i.measured_pl]
            for i in ds.instances
        ]
        header = ["map_id", "deployment_id", "ue_id", "bs_ids", "truth_x", "truth_y"] + [f"pl_{j + 1}" for j in range(J)]
        w.put("instances.csv", _csv_text(header, rows).encode())
        w.put("instances.npz", npz_bytes(**_rss_arrays(ds.instances, J)))
    elif isinstance(ds, ToaDataset):
        man = _manifest_base("toa", ds.spec, ds.seed, ds.splits)
        man.update(noise_sigma_m=ds.noise_sigma_m, excess_delay=ds.excess_delay, skipped=ds.skipped)
        J = len(ds.instances[0].bs_ids) if ds.instances else 0
        rows = [
            [i.map_id, i.deployment_id, i.ue_id, " ".join(map(str, i.bs_ids)), f"{i.truth.x:.4f}", f"{i.truth.y:.4f}"]
            + [f"{v:.4f}" for v in i.ranges_m]
            for i in ds.instances
        ]
        header = ["map_id", "deployment_id", "ue_id", "bs_ids", "truth_x", "truth_y"] + [f"range_{j + 1}" for j in range(J)]
        w.put("instances.csv", _csv_text(header, rows).encode())
        w.put("instances.npz", npz_bytes(**_toa_arrays(ds.instances, J)))
    else:
        raise TypeError(f"cannot save {type(ds).__name__}")
    man["files"] = w.files
    atomic_write_json(root / "dataset.json", man)
    return root / "dataset.json"


def _rss_arrays(insts, J) -> dict:
    N = len(insts)
    return dict(
        instance_id=np.array([i.instance_id for i in insts], np.int64),
        map_id=np.array([i.map_id for i in insts], np.int64),
        deployment_id=np.array([i.deployment_id for i in insts], np.int64),
        ue_id=np.array([i.ue_id for i in insts], np.int64),
        bs_ids=np.array([i.bs_ids for i in insts], np.int64).reshape(N, J),
        measured_pl=np.array([i.measured_pl for i in insts], float).reshape(N, J),
        truth=np.array([i.truth for i in insts], float).reshape(N, 2),
    )


def _toa_arrays(insts, J) -> dict:
    N = len(insts)
    return dict(
        instance_id=np.array([i.instance_id for i in insts], np.int64),
        map_id=np.array([i.map_id for i in insts], np.int64),
        deployment_id=np.array([i.deployment_id for i in insts], np.int64),
        ue_id=np.array([i.ue_id for i in insts], np.int64),
        bs_ids=np.array([i.bs_ids for i in insts], np.int64).reshape(N, J),
        anchors=np.array([i.anchors for i in insts], float).reshape(N, J, 2),
        ranges=np.array([i.ranges_m for i in insts], float).reshape(N, J),
        clean=np.array([i.clean_ranges_m for i in insts], float).reshape(N, J),
        straight=np.array([i.straight_m for i in insts], float).reshape(N, J),
        los=np.array([i.los for i in insts], bool).reshape(N, J),
        truth=np.array([i.truth for i in insts], float).reshape(N, 2),
    )


def verify_files(root, manifest: dict) -> None:
    """Check every listed file: missing/short/long -> malformed, content -> checksum."""
    root = Path(root)
    files = manifest.get("files")
    if not isinstance(files, dict):
        raise MalformedDatasetError("manifest lacks a file table")
    for rel, meta in files.items():
        path = root / rel
        if not path.is_file():
            raise MalformedDatasetError(f"missing file {rel}")
        if path.stat().st_size != meta.get("bytes"):
            raise MalformedDatasetError(f"{rel}: size {path.stat().st_size} != recorded {meta.get('bytes')} (truncated?)")
        if sha256_file(path) != meta.get("sha256"):
            raise ChecksumMismatchError(f"{rel}: checksum mismatch")


def read_manifest(root) -> dict:
    path = Path(root) / "dataset.json"
    try:
        man = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise MalformedDatasetError(f"no manifest at {path}") from e
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedDatasetError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(man, dict) or man.get("format") != FORMAT_NAME:
        raise MalformedDatasetError(f"{path} is not a {FORMAT_NAME} manifest")
    if man.get("version") != FORMAT_VERSION:
        raise DatasetVersionError(f"format version {man.get('version')} unsupported (expected {FORMAT_VERSION})")
    return man


def _load_npz(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except Exception as e:  # zip/format errors of many kinds
        raise MalformedDatasetError(f"cannot read {path}: {e}") from e


def _load_products(root: Path, map_id: int, spec: GridSpec, budget: LinkBudget) -> MapProducts:
    z = _load_npz(root / f"map_{map_id:03d}" / "products.npz")
    scene = CityScene(
        spec, z["buildings"], z["cars"],
        tuple(Position(*p) for p in z["bs"]), tuple(Position(*p) for p in z["ue"]),
    )
    deps = tuple(Deployment(d, tuple(int(b) for b in row)) for d, row in enumerate(z["deployments"]))
    return MapProducts(
        map_id, scene, deps, budget, z["pl_free"], z["pl_cars"], z["len_free"], z["len_cars"],
        z["los_free"], z["los_cars"],
    )


def load_dataset(root, verify: bool = True) -> RssDataset | ToaDataset:
    root = Path(root)
    man = read_manifest(root)
    if verify:
        verify_files(root, man)
    try:
        spec = GridSpec.from_dict(man["spec"])
        splits = {k: [int(m) for m in v] for k, v in man["splits"].items()}
        seed = int(man["seed"])
        kind = man["kind"]
        z = _load_npz(root / "instances.npz")
        if kind == "rss":
            budget = LinkBudget.from_dict(man["budget"])
            dpm = DpmConfig.from_dict(man["dpm"])
            products = {int(m): _load_products(root, int(m), spec, budget) for m in man["maps"]}
            insts = [
                LocalizationInstance(
                    int(z["instance_id"][k]), int(z["map_id"][k]), int(z["deployment_id"][k]), int(z["ue_id"][k]),
                    tuple(int(b) for b in z["bs_ids"][k]), z["measured_pl"][k].copy(),
                    Position(*map(float, z["truth"][k])), products[int(z["map_id"][k])],
                )
                for k in range(len(z["instance_id"]))
            ]
            return RssDataset(
                Scenario(man["scenario"]), spec, budget, dpm, seed, splits, products, insts,
                float(man["noise_db"]), man.get("scene_config"),
            )
        if kind == "toa":
            insts = [
                ToaInstance(
                    int(z["instance_id"][k]), int(z["map_id"][k]), int(z["deployment_id"][k]), int(z["ue_id"][k]),
                    tuple(int(b) for b in z["bs_ids"][k]),
                    tuple(Position(*map(float, a)) for a in z["anchors"][k]),
                    z["ranges"][k].copy(), z["clean"][k].copy(), z["straight"][k].copy(), z["los"][k].copy(),
                    Position(*map(float, z["truth"][k])),
                )
                for k in range(len(z["instance_id"]))
            ]
            return ToaDataset(
                spec, seed, float(man["noise_sigma_m"]), man.get("excess_delay"), splits, insts, int(man.get("skipped", 0))
            )
        raise MalformedDatasetError(f"unknown dataset kind {kind!r}")
    except KeyError as e:
        raise MalformedDatasetError(f"manifest or arrays lack field {e}") from e


# --------------------------------------------------------------------------
# published layout


@dataclass(frozen=True)
class PublishedLayout:
    """Where a published-style dataset keeps its files, and its gray scale.

    Patterns are formatted with ``map`` (map id), ``bs`` (BS index) and
    ``source`` (simulator folder name).  Gray 0 maps to ``gray_floor_db``
    and 255 to ``gray_top_db``.
    """

    root: Path
    city_pattern: str = "png/buildings_complete/{map}.png"
    gain_pattern: str = "gain/{source}/{map}_{bs}.png"
    coords_pattern: str = "antenna/{map}.txt"
    source: str = "DPM"
    gray_floor_db: float = -134.0
    gray_top_db: float = 0.0


@dataclass(frozen=True, eq=False)
class PublishedMap:
    map_id: int
    buildings: np.ndarray  # bool, white (255) = building
    gains: dict[int, np.ndarray]  # gray in [0, 1]
    bs: tuple[Position, ...]

    def pathloss_db(self, bs: int, layout: PublishedLayout) -> np.ndarray:
        return layout.gray_floor_db + self.gains[bs] * (layout.gray_top_db - layout.gray_floor_db)


def read_published_map(layout: PublishedLayout, map_id: int, bs_ids: Sequence[int] | None = None) -> PublishedMap:
    root = Path(layout.root)
    city_path = root / layout.city_pattern.format(map=map_id)
    if not city_path.is_file():
        raise MalformedDatasetError(f"missing city map {city_path}")
    city = read_png_gray(city_path) > 127
    coords_path = root / layout.coords_pattern.format(map=map_id)
    bs: tuple[Position, ...] = ()
    if coords_path.is_file():
        rows = []
        for line in coords_path.read_text().splitlines():
            parts = line.replace(",", " ").split()
            if len(parts) >= 2:
                try:
                    rows.append(Position(float(parts[0]), float(parts[1])))
                except ValueError as e:
                    raise MalformedDatasetError(f"bad coordinate line {line!r} in {coords_path}") from e
        bs = tuple(rows)
    if bs_ids is None:
        bs_ids = range(len(bs))
    gains = {}
    for b in bs_ids:
        gp = root / layout.gain_pattern.format(map=map_id, bs=b, source=layout.source)
        if not gp.is_file():
            raise MalformedDatasetError(f"missing gain image {gp}")
        g = read_png_gray(gp)
        if g.shape != city.shape:
            raise MalformedDatasetError(f"{gp}: shape {g.shape} differs from city map {city.shape}")
        gains[int(b)] = g.astype(float) / 255.0
    return PublishedMap(map_id, city, gains, bs)
