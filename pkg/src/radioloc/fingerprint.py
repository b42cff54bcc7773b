"""RSS fingerprinting: kNN and adaptive kNN over estimated radio maps."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, Position


class CandidateMask(enum.Enum):
    FREE = "free-pixels"
    ALL = "all-pixels"


class EmptyCandidatesError(ValueError):
    """No candidate pixel left to match against."""


@dataclass(frozen=True)
class KnnConfig:
    k: int = 16
    candidate_mask: CandidateMask = CandidateMask.FREE
    ue_box_m: float | None = 164.0  # restrict candidates to the central UE box

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class AdaptiveKnnConfig:
    alpha: float = 0.05
    k_max: int = 40
    candidate_mask: CandidateMask = CandidateMask.FREE
    ue_box_m: float | None = 164.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")


def signal_distance(pl_meas, pl_pixel) -> float:
    """Euclidean distance between two pathloss vectors, dB."""
    a = np.asarray(pl_meas, dtype=float)
    b = np.asarray(pl_pixel, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def candidate_pixels(spec: GridSpec, buildings: np.ndarray | None, mask: CandidateMask, ue_box_m: float | None) -> np.ndarray:
    """Flat row-major indices of the candidate pixels."""
    n = spec.size_px
    ok = np.ones((n, n), bool)
    if mask is CandidateMask.FREE and buildings is not None:
        ok &= ~np.asarray(buildings, bool)
    if ue_box_m is not None:
        lo, hi = spec.central_box(ue_box_m)
        box = np.zeros((n, n), bool)
        box[lo - 1:hi, lo - 1:hi] = True
        ok &= box
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        raise EmptyCandidatesError("candidate mask selects no pixel")
    return idx


def ranked_candidates(est_pl: np.ndarray, pl_meas, cand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Candidates sorted by signal distance; ties keep row-major order."""
    J = est_pl.shape[0]
    meas = np.asarray(pl_meas, dtype=float)
    if meas.shape != (J,):
        raise ValueError(f"{meas.shape[0] if meas.ndim else 0} measurements for {J} radio maps")
    vals = est_pl.reshape(J, -1)[:, cand]
    d = np.sqrt(np.sum((vals - meas[:, None]) ** 2, axis=0))
    order = np.argsort(d, kind="stable")
    return cand[order], d[order]


def _centroid(flat_idx: np.ndarray, n: int) -> Position:
    rows, cols = np.divmod(flat_idx, n)
    return Position(float(np.mean(cols + 1)), float(np.mean(rows + 1)))


def knn_localize(instance, cfg: KnnConfig = KnnConfig()) -> Position:
    """Centroid of the ``k`` candidate pixels closest in signal space."""
    spec = instance.spec
    cand = candidate_pixels(spec, instance.city, cfg.candidate_mask, cfg.ue_box_m)
    if cfg.k > len(cand):
        raise ValueError(f"k={cfg.k} exceeds the {len(cand)} candidate pixels")
    idx, _ = ranked_candidates(instance.est_pl, instance.measured_pl, cand)
    return _centroid(idx[:cfg.k], spec.size_px)


def adaptive_knn_localize(instance, cfg: AdaptiveKnnConfig = AdaptiveKnnConfig()) -> tuple[Position, int]:
    """Centroid of every candidate within ``(1 + alpha) * d_min``, at most ``k_max`` of them."""
    spec = instance.spec
    cand = candidate_pixels(spec, instance.city, cfg.candidate_mask, cfg.ue_box_m)
    idx, d = ranked_candidates(instance.est_pl, instance.measured_pl, cand)
    k = int(np.searchsorted(d, (1.0 + cfg.alpha) * d[0], side="right"))
    k = max(1, min(k, cfg.k_max))
    return _centroid(idx[:k], spec.size_px), k


class KnnLocalizer:
    name = "knn"

    def __init__(self, cfg: KnnConfig = KnnConfig()):
        self.cfg = cfg
        self.name = f"knn(k={cfg.k})"

    def localize(self, instance) -> Position:
        return knn_localize(instance, self.cfg)


class AdaptiveKnnLocalizer:
    def __init__(self, cfg: AdaptiveKnnConfig = AdaptiveKnnConfig()):
        self.cfg = cfg
        self.name = f"adaptive-knn(alpha={cfg.alpha})"
        self.k_used: list[int] = []

    def localize(self, instance) -> Position:
        p, k = adaptive_knn_localize(instance, self.cfg)
        self.k_used.append(k)
        return p

    @property
    def mean_k(self) -> float:
        return float(np.mean(self.k_used)) if self.k_used else float("nan")
