"""ToA ranging localizers: POCS, bisection squared-range LS, max correntropy.

Squared-range least squares (SR-LS) lifts the position to ``y = [x; |x|^2]``
so the residuals ``|x - a_j|^2 - r_j^2`` become linear in ``y`` and the
problem turns into a generalized trust-region subproblem (GTRS):

    min |A y - b|^2   s.t.  y^T D y + 2 f^T y = 0,

with rows ``A_j = [-2 a_j^T, 1]``, ``b_j = r_j^2 - |a_j|^2``,
``D = diag(1, 1, 0)`` and ``f = (0, 0, -1/2)``.  Its solution is
``y(lam) = (A^T A + lam D)^-1 (A^T b - lam f)`` at the root of the
decreasing function ``phi(lam) = y^T D y + 2 f^T y`` on the interval where
``A^T A + lam D`` is positive definite, which bisection finds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import Position


class DegenerateGeometryError(ValueError):
    """Anchors do not span the plane (e.g. all collinear)."""


class InsufficientAnchorsError(ValueError):
    """Fewer anchors than the solver needs."""


@dataclass(frozen=True, eq=False)
class RangingProblem:
    anchors: np.ndarray  # (J, 2) meters
    ranges_m: np.ndarray  # (J,)
    bias_b_m: float = 0.0
    sigma_m: float = 1e-4

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=float).reshape(-1, 2)
        r = np.asarray(self.ranges_m, dtype=float).reshape(-1)
        if len(a) == 0:
            raise InsufficientAnchorsError("no anchors")
        if len(r) != len(a):
            raise ValueError(f"{len(r)} ranges for {len(a)} anchors")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("ranges must be finite and >= 0")
        if self.bias_b_m < 0:
            raise ValueError("bias_b_m must be >= 0")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "ranges_m", r)

    @classmethod
    def from_instance(cls, inst, bias_b_m: float = 0.0, sigma_m: float = 1e-4) -> "RangingProblem":
        return cls(np.array(inst.anchors, float), np.asarray(inst.ranges_m, float), bias_b_m, sigma_m)

    def adjusted_ranges(self) -> np.ndarray:
        return np.maximum(self.ranges_m - self.bias_b_m, 0.0)


@dataclass(frozen=True, eq=False)
class SolverResult:
    estimate: Position
    iterations: int
    converged: bool
    residual: float  # RMS range residual at the estimate, m
    weights: np.ndarray | None = field(default=None, repr=False)


def range_residuals(x, anchors, ranges) -> np.ndarray:
    return np.hypot(anchors[:, 0] - x[0], anchors[:, 1] - x[1]) - ranges


def _result(x, p: RangingProblem, it, conv, weights=None) -> SolverResult:
    e = range_residuals(x, p.anchors, p.ranges_m)
    return SolverResult(Position(float(x[0]), float(x[1])), it, conv, float(np.sqrt(np.mean(e * e))), weights)


# --------------------------------------------------------------------------
# POCS


def pocs_localize(p: RangingProblem, max_iter: int = 10000, tol: float = 1e-9, x0=None) -> SolverResult:
    """Cyclic projections onto the disks ``|x - a_j| <= r_j`` (relaxation 1).

    Stops once a full sweep moves the iterate by less than ``tol``; with
    disjoint disks the sweeps settle into a limit cycle and the run ends
    unconverged after ``max_iter`` sweeps.
    """
    a, r = p.anchors, p.ranges_m
    x = a.mean(axis=0) if x0 is None else np.asarray(x0, dtype=float).copy()
    for it in range(1, max_iter + 1):
        step = 0.0
        for j in range(len(a)):
            d = x - a[j]
            n = math.hypot(d[0], d[1])
            if n > r[j]:
                nx = a[j] + d * (r[j] / n)
                step = max(step, math.hypot(nx[0] - x[0], nx[1] - x[1]))
                x = nx
        if step < tol:
            return _result(x, p, it, True)
    return _result(x, p, max_iter, False)


# --------------------------------------------------------------------------
# SR-LS by bisection

_D = np.diag([1.0, 1.0, 0.0])
_F = np.array([0.0, 0.0, -0.5])


def _check_geometry(anchors: np.ndarray, weights: np.ndarray | None = None) -> None:
    if len(anchors) < 3:
        raise InsufficientAnchorsError(f"{len(anchors)} anchors; at least 3 are needed")
    a = anchors if weights is None else anchors[weights > 0]
    if len(a) < 3:
        raise DegenerateGeometryError("fewer than 3 anchors carry weight")
    c = a - a.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] == 0 or s[-1] <= 1e-9 * s[0]:
        raise DegenerateGeometryError("anchors are collinear")


def srls_system(anchors: np.ndarray, ranges: np.ndarray, weights: np.ndarray | None = None):
    """Lifted least-squares data ``(A, b)``, rows scaled by ``sqrt(w)``."""
    A = np.column_stack([-2.0 * anchors, np.ones(len(anchors))])
    b = ranges ** 2 - np.sum(anchors ** 2, axis=1)
    if weights is not None:
        s = np.sqrt(weights)
        A = A * s[:, None]
        b = b * s
    return A, b


def gtrs_y(AtA: np.ndarray, Atb: np.ndarray, lam: float) -> np.ndarray:
    """Direct dense solve of the shifted system (reference for ``Gtrs``)."""
    return np.linalg.solve(AtA + lam * _D, Atb - lam * _F)


def gtrs_phi(AtA: np.ndarray, Atb: np.ndarray, lam: float) -> float:
    y = gtrs_y(AtA, Atb, lam)
    return float(y @ _D @ y + 2.0 * _F @ y)


class Gtrs:
    """Lifted SR-LS problem diagonalized once so ``phi`` costs a few flops.

    With ``R = AtA^-1/2`` and ``R D R = Q diag(ev) Q^T``, the solution is
    ``y(lam) = R Q z`` where ``z_i = (c_i - lam g_i) / (1 + lam ev_i)``,
    ``c = Q^T R Atb`` and ``g = Q^T R f``, and
    ``phi(lam) = sum_i ev_i z_i^2 + 2 g^T z``.
    """

    def __init__(self, A: np.ndarray, b: np.ndarray):
        AtA = A.T @ A
        w, V = np.linalg.eigh(AtA)
        if w[0] <= 0:
            raise DegenerateGeometryError("lifted normal matrix is singular")
        R = V @ np.diag(w ** -0.5) @ V.T
        ev, Q = np.linalg.eigh(R @ _D @ R)
        self.M = R @ Q
        self.ev = tuple(float(v) for v in ev)
        self.c = tuple(float(v) for v in Q.T @ R @ (A.T @ b))
        self.g = tuple(float(v) for v in Q.T @ R @ _F)
        self.lower = -1.0 / max(self.ev)

    def z(self, lam: float) -> list[float]:
        return [(c - lam * g) / (1.0 + lam * e) for c, g, e in zip(self.c, self.g, self.ev)]

    def phi(self, lam: float) -> float:
        e0, e1, e2 = self.ev
        c0, c1, c2 = self.c
        g0, g1, g2 = self.g
        z0 = (c0 - lam * g0) / (1.0 + lam * e0)
        z1 = (c1 - lam * g1) / (1.0 + lam * e1)
        z2 = (c2 - lam * g2) / (1.0 + lam * e2)
        return e0 * z0 * z0 + e1 * z1 * z1 + e2 * z2 * z2 + 2.0 * (g0 * z0 + g1 * z1 + g2 * z2)

    def y(self, lam: float) -> np.ndarray:
        return self.M @ np.array(self.z(lam))

    def bracket(self) -> tuple[float, float]:
        """``[lo, hi]`` with ``phi(lo) >= 0 >= phi(hi)``; ``phi`` decreases in between."""
        lb = self.lower
        scale = max(1.0, abs(lb))
        lo = lb + scale * 2.0 ** -60  # hard case: the root sits at the interval end
        for k in range(1, 60):
            cand = lb + scale * 2.0 ** -k
            if self.phi(cand) >= 0:
                lo = cand
                break
        hi = lo + scale
        while self.phi(hi) > 0 and hi < 1e30:
            hi = lo + 2.0 * (hi - lo)
        return lo, hi

    def solve(self, tol: float = 1e-14, max_iter: int = 400):
        lo, hi = self.bracket()
        it = 0
        for it in range(1, max_iter + 1):
            mid = 0.5 * (lo + hi)
            if hi - lo <= tol * max(1.0, abs(mid)) or mid in (lo, hi):
                break
            if self.phi(mid) > 0:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
        return self.y(lam), it, lam


def _gtrs_solve(A: np.ndarray, b: np.ndarray, tol: float):
    return Gtrs(A, b).solve(tol)


def bisection_robust_localize(
    p: RangingProblem, tol: float = 1e-14, weights: np.ndarray | None = None
) -> SolverResult:
    """SR-LS on bias-adjusted ranges ``max(r_j - b, 0)``, solved by bisection on lambda.

    ``tol`` bounds the relative width of the final multiplier interval.
    """
    w = None if weights is None else np.asarray(weights, dtype=float)
    _check_geometry(p.anchors, w)
    A, b = srls_system(p.anchors, p.adjusted_ranges(), w)
    try:
        y, it, _ = _gtrs_solve(A, b, tol)
    except np.linalg.LinAlgError as e:
        raise DegenerateGeometryError(f"lifted system is singular: {e}") from e
    return _result(y[:2], p, it, bool(np.all(np.isfinite(y))), w)


# --------------------------------------------------------------------------
# maximum correntropy


def range_normalizer(ranges: np.ndarray, floor_m: float = 1.0) -> np.ndarray:
    """``1 / r_j^2``: to first order a squared-range residual is ``2 r_j e_j``,
    so these inner weights make SR-LS act on range residuals ``e_j``."""
    return 1.0 / np.maximum(ranges, floor_m) ** 2


def _mcc_irls(p: RangingProblem, x0: np.ndarray, ks: float, max_iter: int, tol: float, anneal: float, bw0: float | None = None):
    base = RangingProblem(p.anchors, p.ranges_m, 0.0, p.sigma_m)
    norm = range_normalizer(p.ranges_m)
    x = np.asarray(x0, dtype=float)
    e = range_residuals(x, p.anchors, p.ranges_m)
    bw = max(ks, float(np.max(np.abs(e)))) if bw0 is None else max(ks, bw0)
    it = 0
    for it in range(1, max_iter + 1):
        e = range_residuals(x, p.anchors, p.ranges_m)
        z = e * e / (2.0 * bw * bw)
        w = np.exp(-(z - z.min())) * norm
        # rescaling leaves the LS solution unchanged; the floor keeps full rank
        w = np.maximum(w / w.max(), 1e-8)
        xn = np.array(bisection_robust_localize(base, weights=w).estimate)
        move = math.hypot(*(xn - x))
        x = xn
        at_floor = bw <= ks
        bw = max(ks, bw * anneal)
        if at_floor and move < tol:
            return x, it, True
    return x, it, False


def correntropy(x, p: RangingProblem, kernel_sigma_m: float) -> float:
    e = range_residuals(x, p.anchors, p.ranges_m)
    return float(np.sum(np.exp(-e * e / (2.0 * kernel_sigma_m ** 2))))


def correntropy_localize(
    p: RangingProblem,
    kernel_sigma_m: float | None = None,
    max_iter: int = 300,
    tol: float = 1e-9,
    anneal: float = 0.8,
    restarts: bool = True,
) -> SolverResult:
    """Maximum-correntropy estimate by iteratively reweighted SR-LS.

    The main run starts from the unweighted (b = 0) solution.  Link ``j``
    enters the inner weighted SR-LS with weight ``w_j / r_j^2``, ``w_j``
    being its Gaussian-kernel weight, so the kernel acts on range residuals
    rather than squared-range ones.  The bandwidth opens at the largest
    initial residual and shrinks by ``anneal`` per iteration down to
    ``kernel_sigma_m`` (default ``max(sigma, 1 m)``).

    With ``restarts`` and four or more anchors, the reweighting is also run
    (at the final bandwidth) from every leave-one-out SR-LS solution and the
    end point with the highest correntropy wins.  ``result.weights`` are the final ``w_j``.
    """
    _check_geometry(p.anchors)
    ks = max(p.sigma_m, 1.0) if kernel_sigma_m is None else float(kernel_sigma_m)
    if not ks > 0:
        raise ValueError("kernel_sigma_m must be > 0")
    if not 0 < anneal <= 1:
        raise ValueError("anneal must lie in (0, 1]")
    base = RangingProblem(p.anchors, p.ranges_m, 0.0, p.sigma_m)
    starts = [(np.array(bisection_robust_localize(base).estimate), None)]
    J = len(p.anchors)
    if restarts and J >= 4:
        for j in range(J):
            keep = np.arange(J) != j
            try:
                sub = RangingProblem(p.anchors[keep], p.ranges_m[keep])
                # restarts sit in their basin already: no annealing
                starts.append((np.array(bisection_robust_localize(sub).estimate), ks))
            except DegenerateGeometryError:
                continue
    best = None
    total = 0
    for x0, bw0 in starts:
        x, it, conv = _mcc_irls(p, x0, ks, max_iter, tol, anneal, bw0)
        total += it
        score = correntropy(x, p, ks)
        if best is None or score > best[0] + 1e-12:
            best = (score, x, conv)
    _, x, conv = best
    e = range_residuals(x, p.anchors, p.ranges_m)
    w = np.exp(-e * e / (2.0 * ks * ks))
    return _result(x, p, total, conv, w)


# --------------------------------------------------------------------------
# localizer wrappers used by the evaluation harness


class PocsLocalizer:
    name = "pocs"

    def __init__(self, max_iter: int = 10000, tol: float = 1e-6):
        self.max_iter, self.tol = max_iter, tol

    def localize(self, inst) -> Position:
        return pocs_localize(RangingProblem.from_instance(inst), self.max_iter, self.tol).estimate


class BisectionLocalizer:
    def __init__(self, bias_b_m: float = 0.0):
        self.b = bias_b_m
        self.name = f"bisection(b={bias_b_m:g})"

    def localize(self, inst) -> Position:
        return bisection_robust_localize(RangingProblem.from_instance(inst, self.b)).estimate


class CorrentropyLocalizer:
    def __init__(self, sigma_m: float = 1e-4, kernel_sigma_m: float | None = None):
        self.sigma_m, self.kernel_sigma_m = sigma_m, kernel_sigma_m
        self.name = "correntropy"

    def localize(self, inst) -> Position:
        p = RangingProblem.from_instance(inst, 0.0, self.sigma_m)
        return correntropy_localize(p, self.kernel_sigma_m).estimate


def grid_search_srls(anchors: Sequence, ranges: Sequence, lo: float, hi: float, step: float, weights=None) -> Position:
    """Dense grid minimizer of the (weighted) squared-range residual."""
    a = np.asarray(anchors, float)
    r = np.asarray(ranges, float)
    w = np.ones(len(a)) if weights is None else np.asarray(weights, float)
    g = np.arange(lo, hi + step / 2, step)
    X, Y = np.meshgrid(g, g)
    cost = np.zeros_like(X)
    for j in range(len(a)):
        cost += w[j] * ((X - a[j, 0]) ** 2 + (Y - a[j, 1]) ** 2 - r[j] ** 2) ** 2
    k = int(np.argmin(cost))
    return Position(float(X.flat[k]), float(Y.flat[k]))
