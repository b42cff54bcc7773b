"""Grid geometry, link budget and dB conversions shared across the package.

Arrays are indexed ``[row, col]`` with ``row = y - 1`` and ``col = x - 1``;
pixel centers sit at integer coordinates ``1..size_px`` on both axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class Position(NamedTuple):
    x: float
    y: float

    def dist(self, other: "Position") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class GridSpec:
    size_px: int = 256
    pixel_len_m: float = 1.0

    def __post_init__(self):
        if self.size_px < 16:
            raise ValueError(f"size_px must be >= 16, got {self.size_px}")
        if not self.pixel_len_m > 0:
            raise ValueError(f"pixel_len_m must be > 0, got {self.pixel_len_m}")

    @property
    def center(self) -> float:
        return (self.size_px + 1) / 2.0

    @property
    def pixel_diag_m(self) -> float:
        return math.sqrt(2.0) * self.pixel_len_m

    def central_box(self, side_m: float) -> tuple[int, int]:
        """Inclusive integer pixel range of the centered box ``side_m`` wide.

        At 256 px / 1 m a 164 m box is ``(47, 210)``.
        """
        half = side_m / self.pixel_len_m / 2.0 - 0.5
        lo = max(1, math.ceil(self.center - half - 1e-9))
        hi = min(self.size_px, math.floor(self.center + half + 1e-9))
        return lo, hi

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """``(X, Y)`` grids of pixel-center coordinates."""
        r = np.arange(1, self.size_px + 1, dtype=float)
        return np.meshgrid(r, r)

    def to_meters(self, p: Position) -> Position:
        return Position(p.x * self.pixel_len_m, p.y * self.pixel_len_m)

    def to_dict(self) -> dict:
        return {"size_px": self.size_px, "pixel_len_m": self.pixel_len_m}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["size_px"]), float(d["pixel_len_m"]))


@dataclass(frozen=True)
class LinkBudget:
    tx_power_dbm: float = 23.0
    noise_psd_dbm_hz: float = -174.0
    bandwidth_hz: float = 10e6
    noise_floor_db: float = -134.0
    carrier_ghz: float = 5.9

    def __post_init__(self):
        if not self.bandwidth_hz > 0:
            raise ValueError("bandwidth_hz must be > 0")
        if not self.noise_floor_db < 0:
            raise ValueError("noise_floor_db must be < 0")

    def to_dict(self) -> dict:
        return {
            "tx_power_dbm": self.tx_power_dbm,
            "noise_psd_dbm_hz": self.noise_psd_dbm_hz,
            "bandwidth_hz": self.bandwidth_hz,
            "noise_floor_db": self.noise_floor_db,
            "carrier_ghz": self.carrier_ghz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinkBudget":
        return cls(**{k: float(v) for k, v in d.items()})


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CityScene:
    spec: GridSpec
    buildings: np.ndarray
    cars: np.ndarray | None = None
    bs: tuple[Position, ...] = ()
    ue: tuple[Position, ...] = ()

    def __post_init__(self):
        n = self.spec.size_px
        b = np.asarray(self.buildings, dtype=bool)
        if b.shape != (n, n):
            raise ValueError(f"buildings grid has shape {b.shape}, expected {(n, n)}")
        object.__setattr__(self, "buildings", _readonly(b))
        c = np.zeros((n, n), bool) if self.cars is None else np.asarray(self.cars, dtype=bool)
        if c.shape != (n, n):
            raise ValueError(f"cars grid has shape {c.shape}, expected {(n, n)}")
        object.__setattr__(self, "cars", _readonly(c))
        object.__setattr__(self, "bs", tuple(Position(float(p[0]), float(p[1])) for p in self.bs))
        object.__setattr__(self, "ue", tuple(Position(float(p[0]), float(p[1])) for p in self.ue))

    @property
    def has_cars(self) -> bool:
        return bool(self.cars.any())

    def obstacles(self, with_cars: bool = True) -> np.ndarray:
        return (self.buildings | self.cars) if with_cars else self.buildings.copy()

    def free(self, with_cars: bool = True) -> np.ndarray:
        return ~self.obstacles(with_cars)

    def replace(self, **changes) -> "CityScene":
        kw = dict(spec=self.spec, buildings=self.buildings, cars=self.cars, bs=self.bs, ue=self.ue)
        kw.update(changes)
        return CityScene(**kw)

    def without_cars(self) -> "CityScene":
        return self.replace(cars=None)


@dataclass(frozen=True, eq=False)
class RadioMap:
    spec: GridSpec
    bs: Position
    pathloss_db: np.ndarray
    path_len_m: np.ndarray
    los: np.ndarray
    truncated: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pathloss_db", "path_len_m", "los", "truncated"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    def at(self, p: Position) -> float:
        return float(self.pathloss_db[pixel_index(p)])


def pixel_index(p: Position) -> tuple[int, int]:
    """Array index ``(row, col)`` of the pixel containing ``p``."""
    return int(round(p.y)) - 1, int(round(p.x)) - 1


def pathloss_to_rss(pl_db, budget: LinkBudget):
    return pl_db + budget.tx_power_dbm


def rss_to_pathloss(rss_dbm, budget: LinkBudget):
    return rss_dbm - budget.tx_power_dbm


def to_gray(pl_db, budget: LinkBudget):
    """Affine map of pathloss onto [0, 1]: noise floor -> 0, 0 dB -> 1.

    Accepts a scalar, an array or a ``RadioMap``.
    """
    if isinstance(pl_db, RadioMap):
        pl_db = pl_db.pathloss_db
    floor = budget.noise_floor_db
    return (np.asarray(pl_db, dtype=float) - floor) / (0.0 - floor)


def from_gray(gray, budget: LinkBudget):
    floor = budget.noise_floor_db
    return np.asarray(gray, dtype=float) * (0.0 - floor) + floor


def count_detectable(pl_vector: Sequence[float], budget: LinkBudget, margin_db: float = 0.0) -> int:
    if margin_db < 0:
        raise ValueError("margin_db must be >= 0")
    pl = np.asarray(pl_vector, dtype=float)
    return int(np.count_nonzero(pl > budget.noise_floor_db + margin_db))
