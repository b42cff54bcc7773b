"""Procedural Manhattan-style cities, parked cars, and BS/UE deployments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import CityScene, GridSpec, Position


class SceneConfigError(ValueError):
    """Generator settings that can never produce a valid scene."""


class InfeasibleSceneError(RuntimeError):
    """A particular scene cannot host the requested deployment; regenerate it."""


@dataclass(frozen=True)
class SceneGenConfig:
    seed: int = 0
    n_maps: int = 99
    spec: GridSpec = field(default_factory=GridSpec)
    street_pitch_px: int = 40
    street_width_px: tuple[int, int] = (8, 14)
    building_fill: float = 0.35
    empty_block_prob: float = 0.08
    notch_prob: float = 0.3
    n_cars: int = 100
    car_size_px: tuple[int, int] = (2, 5)
    n_bs_pool: int = 80
    n_ue: int = 200
    n_deployments: int = 50
    bs_per_deployment: int = 5
    bs_box_m: float = 150.0
    ue_box_m: float = 164.0
    bs_min_sep_m: float = 20.0
    max_attempts: int = 1000

    def __post_init__(self):
        if min(self.street_width_px) < 4:
            raise SceneConfigError("street corridors must be at least 4 px wide")
        if not 0.0 <= self.building_fill < 1.0:
            raise SceneConfigError("building_fill must lie in [0, 1)")
        if self.bs_per_deployment > self.n_bs_pool:
            raise SceneConfigError("bs_per_deployment exceeds the BS pool size")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["spec"] = self.spec.to_dict()
        d["street_width_px"] = list(self.street_width_px)
        d["car_size_px"] = list(self.car_size_px)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        d = dict(d)
        d["spec"] = GridSpec.from_dict(d["spec"])
        d["street_width_px"] = tuple(d["street_width_px"])
        d["car_size_px"] = tuple(d["car_size_px"])
        return cls(**d)


def desk_config(seed: int = 0, n_maps: int = 14, **overrides) -> SceneGenConfig:
    """64 px at 4 m/px: the full-size 256 m city at a CPU-friendly resolution."""
    kw = dict(
        seed=seed,
        n_maps=n_maps,
        spec=GridSpec(64, 4.0),
        street_pitch_px=12,
        street_width_px=(4, 5),
        building_fill=0.35,
        n_cars=40,
        car_size_px=(1, 2),
        n_bs_pool=16,
        n_ue=20,
        n_deployments=10,
        bs_per_deployment=3,
    )
    kw.update(overrides)
    return SceneGenConfig(**kw)


@dataclass(frozen=True)
class Deployment:
    deployment_id: int
    bs_ids: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class MapScene:
    """One city map: scene with cars, BS pool and UEs, plus BS deployments."""

    map_id: int
    scene: CityScene
    deployments: tuple[Deployment, ...]
    attempts: int = 1


# --------------------------------------------------------------------------
# cities


def _street_layout(rng, n, pitch, wmin, wmax):
    """Street corridors ``[(start, stop), ...]`` along one axis."""
    streets = []
    pos = int(rng.integers(0, pitch))
    jitter = max(1, pitch // 5)
    while pos < n:
        w = int(rng.integers(wmin, wmax + 1))
        streets.append((pos, min(n, pos + w)))
        pos += w + max(2, pitch - w + int(rng.integers(-jitter, jitter + 1)))
    return streets


def _blocks(streets, n):
    blocks = []
    prev = 0
    for s, e in streets:
        if s > prev:
            blocks.append((prev, s))
        prev = e
    if prev < n:
        blocks.append((prev, n))
    return blocks


def generate_city(cfg: SceneGenConfig, index: int, attempt: int = 0) -> CityScene:
    """Buildings only; no cars, BSs or UEs.

    Raises ``InfeasibleSceneError`` when the random street draw leaves too
    little block area for ``building_fill``.
    """
    if index >= cfg.n_maps or index < 0:
        raise IndexError(f"map index {index} outside 0..{cfg.n_maps - 1}")
    n = cfg.spec.size_px
    buildings = np.zeros((n, n), bool)
    if cfg.building_fill == 0:
        return CityScene(cfg.spec, buildings)
    if cfg.building_fill > 0.7:
        raise SceneConfigError("building_fill above 0.7 leaves less than 30% free space")
    rng = np.random.default_rng([cfg.seed, index, attempt])
    wmin, wmax = cfg.street_width_px
    rows = _blocks(_street_layout(rng, n, cfg.street_pitch_px, wmin, wmax), n)
    cols = _blocks(_street_layout(rng, n, cfg.street_pitch_px, wmin, wmax), n)
    block_area = sum((b - a) for a, b in rows) * sum((b - a) for a, b in cols)
    if block_area == 0:
        raise SceneConfigError("street pitch too small: no room for blocks")
    ratio = cfg.building_fill * n * n / (block_area * (1.0 - cfg.empty_block_prob))
    if ratio > 1.0:
        # this street draw leaves too little block area; another attempt may fit
        raise InfeasibleSceneError(
            f"building_fill {cfg.building_fill} does not fit this street layout"
        )
    scale = math.sqrt(ratio)
    for r0, r1 in rows:
        for c0, c1 in cols:
            if rng.random() < cfg.empty_block_prob:
                continue
            bh, bw = r1 - r0, c1 - c0
            h = max(1, min(bh, int(round(bh * scale * rng.uniform(0.9, 1.1)))))
            w = max(1, min(bw, int(round(bw * scale * rng.uniform(0.9, 1.1)))))
            top = r0 + int(rng.integers(0, bh - h + 1))
            left = c0 + int(rng.integers(0, bw - w + 1))
            buildings[top:top + h, left:left + w] = True
            if h >= 4 and w >= 4 and rng.random() < cfg.notch_prob:
                nh, nw = int(rng.integers(1, h // 2 + 1)), int(rng.integers(1, w // 2 + 1))
                rr = top if rng.random() < 0.5 else top + h - nh
                cc = left if rng.random() < 0.5 else left + w - nw
                buildings[rr:rr + nh, cc:cc + nw] = False
    return CityScene(cfg.spec, buildings)


# --------------------------------------------------------------------------
# cars


def _window_sum(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum of ``mask`` over every h x w window anchored at its top-left pixel."""
    s = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), np.int64)
    s[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    return s[h:, w:] - s[:-h, w:] - s[h:, :-w] + s[:-h, :-w]


def _street_centerlines(buildings: np.ndarray) -> np.ndarray:
    dt = ndimage.distance_transform_cdt(~buildings, metric="chessboard").astype(float)
    ridge_x = dt >= ndimage.maximum_filter(dt, size=(1, 3), mode="nearest")
    ridge_y = dt >= ndimage.maximum_filter(dt, size=(3, 1), mode="nearest")
    return (ridge_x | ridge_y) & (dt >= 2) & ~buildings


def place_cars(scene: CityScene, cfg: SceneGenConfig, rng_seed) -> CityScene:
    """Up to ``cfg.n_cars`` non-overlapping cars parked at curbs or on street centerlines."""
    if scene.has_cars:
        raise ValueError("scene already carries cars")
    n = scene.spec.size_px
    rng = np.random.default_rng(rng_seed)
    occ = scene.buildings.copy()
    for p in (*scene.bs, *scene.ue):
        occ[int(round(p.y)) - 1, int(round(p.x)) - 1] = True
    cars = np.zeros((n, n), bool)
    cw, cl = cfg.car_size_px
    near_building = ndimage.binary_dilation(scene.buildings, structure=np.ones((3, 3), bool)) & ~scene.buildings
    center = _street_centerlines(scene.buildings)
    shapes = [(cw, cl), (cl, cw)]  # (rows, cols): along x, along y
    anchor_ok = []
    for h, w in shapes:
        if h > n or w > n:
            anchor_ok.append(np.zeros((0, 0), bool))
            continue
        ok = (_window_sum(near_building, h, w) > 0) | (_window_sum(center, h, w) > 0)
        anchor_ok.append(ok)
    for _ in range(cfg.n_cars):
        first = int(rng.integers(0, 2))
        placed = False
        for o in (first, 1 - first):
            h, w = shapes[o]
            if anchor_ok[o].size == 0:
                continue
            cand = anchor_ok[o] & (_window_sum(occ | cars, h, w) == 0)
            idx = np.flatnonzero(cand)
            if len(idx) == 0:
                continue
            r, c = np.unravel_index(idx[int(rng.integers(0, len(idx)))], cand.shape)
            cars[r:r + h, c:c + w] = True
            placed = True
            break
        if not placed:
            break
    return scene.replace(cars=cars)


# --------------------------------------------------------------------------
# deployments


def _box_pixels(free: np.ndarray, lo: int, hi: int) -> np.ndarray:
    rows, cols = np.nonzero(free)
    x, y = cols + 1, rows + 1
    m = (x >= lo) & (x <= hi) & (y >= lo) & (y <= hi)
    return np.stack([x[m], y[m]], axis=1)


def _separated(pts: np.ndarray, min_sep_px: float) -> bool:
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    return bool(d2[np.triu_indices(len(pts), 1)].min(initial=np.inf) >= min_sep_px ** 2 - 1e-9)


def sample_deployments(scene: CityScene, cfg: SceneGenConfig, rng) -> tuple[CityScene, tuple[Deployment, ...]]:
    """Sample the BS pool, the UEs and the BS deployments of one map.

    The pool holds distinct free pixels of the central BS box; the 20 m
    separation applies to the BSs of each deployment, which are drawn by
    rejection.  Returns the scene carrying ``bs`` (pool) and ``ue``, and the
    deployments as sorted pool-index tuples.  Raises ``InfeasibleSceneError``
    when the free space cannot host the pool or a separated deployment.
    """
    rng = np.random.default_rng(rng)
    spec = scene.spec
    free = scene.free(with_cars=True)
    lo, hi = spec.central_box(cfg.bs_box_m)
    cand = _box_pixels(free, lo, hi)
    if len(cand) < cfg.n_bs_pool:
        raise InfeasibleSceneError(f"only {len(cand)} free pixels for {cfg.n_bs_pool} BS positions")
    pool = cand[np.sort(rng.choice(len(cand), cfg.n_bs_pool, replace=False))]
    rng.shuffle(pool)
    lo, hi = spec.central_box(cfg.ue_box_m)
    ue_cand = _box_pixels(free, lo, hi)
    taken = {tuple(p) for p in pool.tolist()}
    ue_cand = np.array([p for p in ue_cand.tolist() if tuple(p) not in taken]).reshape(-1, 2)
    if len(ue_cand) < cfg.n_ue:
        raise InfeasibleSceneError("not enough free pixels for the UEs")
    ue = ue_cand[rng.choice(len(ue_cand), cfg.n_ue, replace=False)]
    sep_px = cfg.bs_min_sep_m / spec.pixel_len_m
    deps = []
    for d in range(cfg.n_deployments):
        for _ in range(cfg.max_attempts):
            ids = np.sort(rng.choice(cfg.n_bs_pool, cfg.bs_per_deployment, replace=False))
            if _separated(pool[ids].astype(float), sep_px):
                break
        else:
            raise InfeasibleSceneError(f"no {cfg.bs_per_deployment} BSs {cfg.bs_min_sep_m} m apart in the pool")
        deps.append(Deployment(d, tuple(int(i) for i in ids)))
    bs = tuple(Position(float(x), float(y)) for x, y in pool)
    ues = tuple(Position(float(x), float(y)) for x, y in ue)
    return scene.replace(bs=bs, ue=ues), tuple(deps)


def generate_map(cfg: SceneGenConfig, index: int) -> MapScene:
    """City + cars + deployments for one map, regenerating infeasible cities."""
    for attempt in range(cfg.max_attempts):
        try:
            city = generate_city(cfg, index, attempt)
            with_cars = place_cars(city, cfg, [cfg.seed, index, attempt, 1])
            scene, deps = sample_deployments(with_cars, cfg, [cfg.seed, index, attempt, 2])
        except InfeasibleSceneError:
            continue
        return MapScene(index, scene, deps, attempt + 1)
    raise SceneConfigError(f"map {index}: no feasible scene after {cfg.max_attempts} attempts")


def generate_scene_set(cfg: SceneGenConfig) -> list[MapScene]:
    return [generate_map(cfg, i) for i in range(cfg.n_maps)]


def split_maps(map_ids, seed: int) -> dict[str, list[int]]:
    """Random 69/15/15 (out of 99) train/val/test split at the map level.

    With three or more maps, validation and test get at least one map each.
    """
    ids = sorted(int(m) for m in map_ids)
    n = len(ids)
    n_val = int(round(n * 15 / 99))
    n_test = int(round(n * 15 / 99))
    if n >= 3:
        n_val, n_test = max(1, n_val), max(1, n_test)
    n_train = n - n_val - n_test
    perm = np.random.default_rng([seed, 99]).permutation(n)
    shuffled = [ids[i] for i in perm]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }
