"""Dominant Path Model radio-map simulator.

The dominant path from a transmitter to a receiver is the shortest free-space
path around obstacles; it bends only at convex obstacle corners, each bend
being one diffraction.  Obstacles are unions of closed pixel squares and the
region outside the map is free.

Geometry runs on *doubled* integer coordinates so every visibility decision
is exact: a pixel center ``(x, y)`` becomes ``(2x, 2y)`` and pixel-square
vertices land on odd integers.  Geodesics are found with Dijkstra over the
visibility graph of {transmitter} + convex corners, then every receiver pixel
takes the best visible graph node as the last bend of its path.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .grid import CityScene, GridSpec, LinkBudget, Position, RadioMap, pixel_index


def free_space_ref_loss_db(carrier_ghz: float) -> float:
    """Free-space loss at 1 m, ``32.44 + 20 log10(f_MHz) + 20 log10(1e-3 km)``."""
    return 32.44 + 20.0 * math.log10(carrier_ghz * 1e3) - 60.0


@dataclass(frozen=True)
class DpmConfig:
    fs_ref_loss_db: float = free_space_ref_loss_db(5.9)
    fs_exponent: float = 2.0
    diff_loss_base_db: float = 8.0
    diff_loss_growth: float = 1.5
    diff_angle_ref_deg: float = 90.0
    diff_loss_cap_db: float = 60.0
    max_diff_count: int = 8
    # with-cars loss never drops below the building-only loss
    car_loss_envelope: bool = True

    def __post_init__(self):
        if self.fs_exponent <= 0:
            raise ValueError("fs_exponent must be > 0")
        for name in ("fs_ref_loss_db", "diff_loss_base_db", "diff_loss_cap_db"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.diff_loss_growth < 1.0:
            raise ValueError("diff_loss_growth must be >= 1")
        if self.diff_angle_ref_deg <= 0:
            raise ValueError("diff_angle_ref_deg must be > 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DpmConfig":
        return cls(**d)


class BlockedTransmitterError(ValueError):
    """Transmitter placed on an obstacle pixel."""


# --------------------------------------------------------------------------
# exact visibility


@dataclass
class ObstacleGeometry:
    """Boundary walls and corner vertices of an obstacle grid (doubled coords)."""

    n: int
    vwalls: np.ndarray  # (Wv, 3) x, y_lo, y_hi
    hwalls: np.ndarray  # (Wh, 3) y, x_lo, x_hi
    vertices: np.ndarray  # (K, 2) wall endpoints
    enter_lut: np.ndarray  # (K, 3, 3) entering-interior flag by direction signs
    pinch: np.ndarray  # (K,) bool
    convex: np.ndarray  # (K,) bool
    vertex_lookup: dict


def _vertex_cells(padded: np.ndarray, i, j):
    """Cells around vertex (i, j): (-x,-y), (+x,-y), (-x,+y), (+x,+y)."""
    return padded[i, j], padded[i, j + 1], padded[i + 1, j], padded[i + 1, j + 1]


def _enter_table(a: bool, b: bool, c: bool, d: bool) -> np.ndarray:
    # indexed [sign(dx) + 1, sign(dy) + 1]
    t = np.zeros((3, 3), bool)
    t[0, 0], t[2, 0], t[0, 2], t[2, 2] = a, b, c, d
    t[1, 0] = a and b
    t[1, 2] = c and d
    t[0, 1] = a and c
    t[2, 1] = b and d
    return t


def _runs(mask: np.ndarray):
    """Start/stop pairs of True runs along the last axis, per leading index."""
    out = []
    for k in range(mask.shape[0]):
        row = np.concatenate(([False], mask[k], [False]))
        d = np.diff(row.astype(np.int8))
        starts = np.flatnonzero(d == 1)
        stops = np.flatnonzero(d == -1)
        out.extend((k, s, e) for s, e in zip(starts, stops))
    return out


def obstacle_geometry(obstacles: np.ndarray) -> ObstacleGeometry:
    obs = np.asarray(obstacles, bool)
    n = obs.shape[0]
    P = np.zeros((n + 2, n + 2), bool)
    P[1:-1, 1:-1] = obs

    # vertical unit edges on vertex column j between vertex rows i and i+1:
    # left cell P[i+1, j], right cell P[i+1, j+1]
    left = P[1:-1, :-1]
    right = P[1:-1, 1:]
    vwalls = []
    for side in (True, False):
        m = (left == side) & (right != side)  # (n rows, n+1 cols)
        for j, s, e in _runs(m.T):
            vwalls.append((2 * j + 1, 2 * s + 1, 2 * e + 1))
    # horizontal unit edges on vertex row i between vertex cols j and j+1
    up = P[:-1, 1:-1]
    down = P[1:, 1:-1]
    hwalls = []
    for side in (True, False):
        m = (up == side) & (down != side)  # (n+1 rows, n cols)
        for i, s, e in _runs(m):
            hwalls.append((2 * i + 1, 2 * s + 1, 2 * e + 1))

    ends = set()
    for x, y0, y1 in vwalls:
        ends.add((x, y0))
        ends.add((x, y1))
    for y, x0, x1 in hwalls:
        ends.add((x0, y))
        ends.add((x1, y))
    vertices = np.array(sorted(ends, key=lambda v: (v[1], v[0])), dtype=np.int64).reshape(-1, 2)

    K = len(vertices)
    lut = np.zeros((K, 3, 3), bool)
    pinch = np.zeros(K, bool)
    convex = np.zeros(K, bool)
    lookup = {}
    for k, (vx, vy) in enumerate(vertices):
        j, i = (vx - 1) // 2, (vy - 1) // 2
        a, b, c, d = (bool(v) for v in _vertex_cells(P, i, j))
        lut[k] = _enter_table(a, b, c, d)
        cnt = a + b + c + d
        pinch[k] = cnt == 2 and ((a and d) or (b and c))
        convex[k] = cnt == 1
        lookup[(int(vx), int(vy))] = k
    return ObstacleGeometry(
        n=n,
        vwalls=np.array(vwalls, dtype=np.int64).reshape(-1, 3),
        hwalls=np.array(hwalls, dtype=np.int64).reshape(-1, 3),
        vertices=vertices,
        enter_lut=lut,
        pinch=pinch,
        convex=convex,
        vertex_lookup=lookup,
    )


def _crossing(s_par, s_perp, e_par, e_perp, line, lo, hi):
    """Proper crossings of segments with axis-aligned walls.

    ``par`` is the coordinate perpendicular to the wall line (x for a vertical
    wall), ``perp`` the coordinate along it.  Returns (W, T) bool.
    """
    p1 = (s_par - line)[:, None]
    p2 = e_par[None, :] - line[:, None]
    opp = (p1 * p2) < 0
    if not opp.any():
        return opp
    D = (e_par - s_par)[None, :]
    Dp = (e_perp - s_perp)[None, :]
    num = s_perp * D + Dp * (line[:, None] - s_par)
    sg = np.sign(D)
    inside = ((num - lo[:, None] * D) * sg > 0) & ((hi[:, None] * D - num) * sg > 0)
    return opp & inside


def visible_from(
    geo: ObstacleGeometry,
    src: tuple[int, int],
    targets: np.ndarray,
    src_vertex: int | None = None,
    target_vertices: np.ndarray | None = None,
    chunk: int = 1 << 21,
) -> np.ndarray:
    """Exact line-of-sight from ``src`` to each target (doubled coordinates).

    A segment is blocked when it passes through the interior of the obstacle
    union or squeezes through a diagonal pinch.  ``src_vertex`` and
    ``target_vertices`` give vertex ids for endpoints lying on obstacle
    corners (``-1`` for plain points).
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 2)
    T = len(targets)
    sx, sy = int(src[0]), int(src[1])
    blocked = np.zeros(T, bool)
    if T == 0:
        return ~blocked
    nw = max(1, len(geo.vwalls) + len(geo.hwalls) + len(geo.vertices))
    step = max(1, chunk // nw)
    for t0 in range(0, T, step):
        sl = slice(t0, t0 + step)
        ex = targets[sl, 0]
        ey = targets[sl, 1]
        b = blocked[sl]
        if len(geo.vwalls):
            w = geo.vwalls
            b |= _crossing(sx, sy, ex, ey, w[:, 0], w[:, 1], w[:, 2]).any(axis=0)
        if len(geo.hwalls):
            w = geo.hwalls
            b |= _crossing(sy, sx, ey, ex, w[:, 0], w[:, 1], w[:, 2]).any(axis=0)
        Dx = ex - sx
        Dy = ey - sy
        gx = np.sign(Dx) + 1
        gy = np.sign(Dy) + 1
        if len(geo.vertices):
            vx = geo.vertices[:, 0][:, None] - sx
            vy = geo.vertices[:, 1][:, None] - sy
            cross = Dx[None, :] * vy - Dy[None, :] * vx
            dot = Dx[None, :] * vx + Dy[None, :] * vy
            L2 = (Dx * Dx + Dy * Dy)[None, :]
            on = (cross == 0) & (dot > 0) & (dot < L2)
            if on.any():
                kk, tt = np.nonzero(on)
                lut = geo.enter_lut
                hit = (
                    geo.pinch[kk]
                    | lut[kk, gx[tt], gy[tt]]
                    | lut[kk, 2 - gx[tt], 2 - gy[tt]]
                )
                np.logical_or.at(b, tt[hit], True)
        if src_vertex is not None and src_vertex >= 0:
            b |= geo.enter_lut[src_vertex][gx, gy]
        if target_vertices is not None:
            tv = np.asarray(target_vertices)[sl]
            m = tv >= 0
            if m.any():
                b[m] |= geo.enter_lut[tv[m], 2 - gx[m], 2 - gy[m]]
        blocked[sl] = b
    return ~blocked


@njit(cache=True)
def _occ(obs, r, c):
    n = obs.shape[0]
    if r < 0 or c < 0 or r >= n or c >= n:
        return False
    return obs[r, c]


@njit(cache=True)
def _segment_clear(obs, sx, sy, ex, ey):
    """Grid traversal of one segment in doubled coordinates.

    Between consecutive grid-line crossings the segment sits in one open cell
    (or on one grid line); that piece is blocked when it lies in the obstacle
    interior.  Passing exactly through a vertex whose two off-path cells are
    both obstacles (a diagonal pinch) is blocked too.
    """
    dx = ex - sx
    dy = ey - sy
    if dx == 0 and dy == 0:
        return True
    gx = 1 if dx > 0 else (-1 if dx < 0 else 0)
    gy = 1 if dy > 0 else (-1 if dy < 0 else 0)
    adx = abs(dx)
    ady = abs(dy)
    # x state: edge mode when moving along a vertical grid line
    x_edge = dx == 0 and sx % 2 == 1
    y_edge = dy == 0 and sy % 2 == 1
    if sx % 2 == 0:
        c = sx // 2 - 1
    elif gx >= 0:
        c = (sx - 1) // 2
    else:
        c = (sx - 3) // 2
    if sy % 2 == 0:
        r = sy // 2 - 1
    elif gy >= 0:
        r = (sy - 1) // 2
    else:
        r = (sy - 3) // 2
    if x_edge:
        c = (sx - 1) // 2  # right-hand column; left is c - 1
    if y_edge:
        r = (sy - 1) // 2
    # next line crossings as numerators over adx / ady: t = num / a
    if gx > 0:
        nx = 2 * c + 3 - sx
    elif gx < 0:
        nx = sx - (2 * c + 1)
    else:
        nx = 0
    if gy > 0:
        ny = 2 * r + 3 - sy
    elif gy < 0:
        ny = sy - (2 * r + 1)
    else:
        ny = 0
    while True:
        # interior test for the current open piece
        if x_edge:
            inside = _occ(obs, r, c - 1) and _occ(obs, r, c)
        elif y_edge:
            inside = _occ(obs, r - 1, c) and _occ(obs, r, c)
        else:
            inside = _occ(obs, r, c)
        if inside:
            return False
        # compare next crossing parameters tx = nx/adx, ty = ny/ady against 1
        if gx != 0 and not x_edge:
            tx_num, tx_den = nx, adx
        else:
            tx_num, tx_den = 1, 0  # infinity
        if gy != 0 and not y_edge:
            ty_num, ty_den = ny, ady
        else:
            ty_num, ty_den = 1, 0
        # t >= 1 ends the segment
        x_done = tx_den == 0 or tx_num >= tx_den
        y_done = ty_den == 0 or ty_num >= ty_den
        if x_done and y_done:
            return True
        if x_done:
            step = 2
        elif y_done:
            step = 1
        else:
            lhs = tx_num * ty_den
            rhs = ty_num * tx_den
            step = 0 if lhs == rhs else (1 if lhs < rhs else 2)
        if step == 0:
            # through a vertex: the two off-path cells must not both be obstacles
            if _occ(obs, r, c + gx) and _occ(obs, r + gy, c):
                return False
            c += gx
            r += gy
            nx += 2
            ny += 2
        elif step == 1:
            if y_edge:
                # crossing a vertical line while running along a horizontal one
                a = _occ(obs, r - 1, c)
                b = _occ(obs, r, c)
                a2 = _occ(obs, r - 1, c + gx)
                b2 = _occ(obs, r, c + gx)
                if (a and b2 and not b and not a2) or (b and a2 and not a and not b2):
                    return False
            c += gx
            nx += 2
        else:
            if x_edge:
                a = _occ(obs, r, c - 1)
                b = _occ(obs, r, c)
                a2 = _occ(obs, r + gy, c - 1)
                b2 = _occ(obs, r + gy, c)
                if (a and b2 and not b and not a2) or (b and a2 and not a and not b2):
                    return False
            r += gy
            ny += 2


@njit(cache=True)
def _visible_many(obs, sx, sy, targets):
    out = np.empty(targets.shape[0], np.bool_)
    for k in range(targets.shape[0]):
        out[k] = _segment_clear(obs, sx, sy, targets[k, 0], targets[k, 1])
    return out


def line_of_sight(obstacles: np.ndarray, src, targets) -> np.ndarray:
    """Exact visibility from ``src`` to each target, doubled coordinates."""
    t = np.ascontiguousarray(np.asarray(targets, dtype=np.int64).reshape(-1, 2))
    return _visible_many(np.ascontiguousarray(obstacles, dtype=np.bool_), int(src[0]), int(src[1]), t)


# --------------------------------------------------------------------------
# dominant paths


@dataclass(frozen=True, eq=False)
class DominantPathField:
    spec: GridSpec
    bs: Position
    dist_m: np.ndarray
    diff_count: np.ndarray
    diff_angle_sum_deg: np.ndarray
    diff_weighted_deg: np.ndarray  # sum_k growth**(k-1) * angle_k
    reachable: np.ndarray
    last_node: np.ndarray  # -1 for direct (LOS) paths and unreachable pixels


def _turn_deg(ix, iy, ox, oy):
    """Absolute heading change (degrees) between incoming and outgoing vectors."""
    cross = ix * oy - iy * ox
    dot = ix * ox + iy * oy
    return np.degrees(np.arctan2(np.abs(cross), dot)), (cross == 0) & (dot > 0)


def _seg_len(dx, dy):
    return np.sqrt(dx * dx + dy * dy) / 2.0


class SceneGeometry:
    """Per-obstacle-set cache: walls, corner nodes and their visibility."""

    def __init__(self, obstacles: np.ndarray):
        self.obstacles = np.asarray(obstacles, bool)
        self.n = self.obstacles.shape[0]
        self.geo = obstacle_geometry(self.obstacles)
        conv = np.flatnonzero(self.geo.convex)
        self.corner_ids = conv  # vertex ids of graph corner nodes
        self.corners = self.geo.vertices[conv]
        rows, cols = np.nonzero(~self.obstacles)
        self.free_rc = (rows, cols)
        self.free_pts = np.stack([2 * (cols + 1), 2 * (rows + 1)], axis=1).astype(np.int64)
        self._corner_vis = None
        self._corner_pix = None

    @property
    def corner_visibility(self) -> np.ndarray:
        """(C, C) corner-to-corner visibility."""
        if self._corner_vis is None:
            C = len(self.corners)
            vis = np.zeros((C, C), bool)
            for a in range(C):
                vis[a] = line_of_sight(self.obstacles, self.corners[a], self.corners)
            np.fill_diagonal(vis, False)
            self._corner_vis = vis
        return self._corner_vis

    @property
    def corner_pixel_visibility(self) -> np.ndarray:
        """(C, F) corner-to-free-pixel visibility, F = number of free pixels."""
        if self._corner_pix is None:
            C = len(self.corners)
            vis = np.zeros((C, len(self.free_pts)), bool)
            for a in range(C):
                vis[a] = line_of_sight(self.obstacles, self.corners[a], self.free_pts)
            self._corner_pix = vis
        return self._corner_pix


def straight_len_m(a: Position, b: Position, pixel_len_m: float) -> float:
    """Straight-line length between the pixel centers holding ``a`` and ``b``.

    Uses the tracer's own arithmetic so a line-of-sight path length equals
    this value bit for bit.
    """
    ra, ca = pixel_index(a)
    rb, cb = pixel_index(b)
    dx = np.int64(2 * (cb - ca))
    dy = np.int64(2 * (rb - ra))
    return float(_seg_len(dx, dy) * pixel_len_m)


def _bs_point(scene_n: int, bs: Position, obstacles: np.ndarray) -> tuple[int, int]:
    r, c = pixel_index(bs)
    if not (0 <= r < scene_n and 0 <= c < scene_n):
        raise BlockedTransmitterError(f"transmitter {bs} outside the grid")
    if obstacles[r, c]:
        raise BlockedTransmitterError(f"transmitter {bs} lies inside an obstacle")
    return 2 * (c + 1), 2 * (r + 1)


def node_dijkstra(sg: SceneGeometry, src: tuple[int, int], growth: float):
    """Heap Dijkstra over {source} + corners with lexicographic tie-breaking.

    Node 0 is the source, node ``k + 1`` is corner ``k``.  Settling order is
    by (distance, diffraction count, node index); a node's label is replaced
    only by a lexicographically smaller (distance, count, predecessor).
    """
    C = len(sg.corners)
    pts = np.vstack([np.array(src, np.int64)[None, :], sg.corners])
    src_vis = line_of_sight(sg.obstacles, src, sg.corners)
    cvis = sg.corner_visibility
    V = C + 1
    dist = np.full(V, np.inf)
    count = np.zeros(V, np.int64)
    asum = np.zeros(V)
    wsum = np.zeros(V)
    pred = np.full(V, -1, np.int64)
    done = np.zeros(V, bool)
    dist[0] = 0.0
    heap = [(0.0, 0, 0)]
    while heap:
        d, c, u = heapq.heappop(heap)
        if done[u] or d != dist[u] or c != count[u]:
            continue
        done[u] = True
        nbr = np.flatnonzero(src_vis) + 1 if u == 0 else np.flatnonzero(cvis[u - 1]) + 1
        nbr = nbr[~done[nbr]]
        if len(nbr) == 0:
            continue
        dx = pts[nbr, 0] - pts[u, 0]
        dy = pts[nbr, 1] - pts[u, 1]
        nd = dist[u] + _seg_len(dx, dy)
        if u == 0:
            nc = np.zeros(len(nbr), np.int64)
            na = np.zeros(len(nbr))
            nwv = np.zeros(len(nbr))
        else:
            p = pred[u]
            turn, straight = _turn_deg(pts[u, 0] - pts[p, 0], pts[u, 1] - pts[p, 1], dx, dy)
            turn = np.where(straight, 0.0, turn)
            nc = count[u] + (~straight).astype(np.int64)
            na = asum[u] + turn
            nwv = wsum[u] + growth ** count[u] * turn
        for k in range(len(nbr)):
            v = nbr[k]
            key = (nd[k], nc[k], u)
            if key < (dist[v], count[v], pred[v] if pred[v] >= 0 else V):
                dist[v], count[v], pred[v] = nd[k], nc[k], u
                asum[v], wsum[v] = na[k], nwv[k]
                heapq.heappush(heap, (nd[k], int(nc[k]), int(v)))
    return pts, dist, count, asum, wsum, pred


def assign_pixels(sg: SceneGeometry, src, pts, dist, count, asum, wsum, pred, growth: float):
    """Best last bend for every free pixel; returns flat arrays over free pixels."""
    F = len(sg.free_pts)
    fx = sg.free_pts[:, 0]
    fy = sg.free_pts[:, 1]
    vis0 = line_of_sight(sg.obstacles, src, sg.free_pts)
    best_d = np.where(vis0, _seg_len(fx - src[0], fy - src[1]), np.inf)
    best_c = np.zeros(F, np.int64)
    best_a = np.zeros(F)
    best_w = np.zeros(F)
    best_n = np.full(F, -1, np.int64)
    open_ = ~vis0
    cpv = sg.corner_pixel_visibility
    for v in range(1, len(pts)):
        if not np.isfinite(dist[v]):
            continue
        m = cpv[v - 1] & open_
        if not m.any():
            continue
        idx = np.flatnonzero(m)
        dx = fx[idx] - pts[v, 0]
        dy = fy[idx] - pts[v, 1]
        cd = dist[v] + _seg_len(dx, dy)
        p = pred[v]
        turn, straight = _turn_deg(pts[v, 0] - pts[p, 0], pts[v, 1] - pts[p, 1], dx, dy)
        turn = np.where(straight, 0.0, turn)
        cc = count[v] + (~straight).astype(np.int64)
        better = (cd < best_d[idx]) | ((cd == best_d[idx]) & (cc < best_c[idx]))
        if not better.any():
            continue
        j = idx[better]
        best_d[j] = cd[better]
        best_c[j] = cc[better]
        best_a[j] = asum[v] + turn[better]
        best_w[j] = wsum[v] + growth ** count[v] * turn[better]
        best_n[j] = v - 1
    return best_d, best_c, best_a, best_w, best_n


def trace_dominant_paths(
    scene: CityScene | np.ndarray,
    bs: Position,
    cfg: DpmConfig | None = None,
    with_cars: bool = True,
    geometry: SceneGeometry | None = None,
    spec: GridSpec | None = None,
) -> DominantPathField:
    """Dominant-path geometry from ``bs`` to every pixel.

    ``scene`` may be a ``CityScene`` (obstacles = buildings, plus cars when
    ``with_cars``) or a bare obstacle grid.  Pass a cached ``geometry`` when
    tracing many transmitters over the same obstacles.
    """
    cfg = cfg or DpmConfig()
    if isinstance(scene, CityScene):
        obstacles = scene.obstacles(with_cars)
        spec = scene.spec
    else:
        obstacles = np.asarray(scene, bool)
        spec = spec or GridSpec(obstacles.shape[0], 1.0)
    sg = geometry if geometry is not None else SceneGeometry(obstacles)
    n = sg.n
    src = _bs_point(n, bs, sg.obstacles)
    g = cfg.diff_loss_growth
    pts, dist, count, asum, wsum, pred = node_dijkstra(sg, src, g)
    bd, bc, ba, bw, bn = assign_pixels(sg, src, pts, dist, count, asum, wsum, pred, g)

    rows, cols = sg.free_rc
    dist_m = np.full((n, n), np.inf)
    dist_m[rows, cols] = bd * spec.pixel_len_m
    diff_count = np.zeros((n, n), np.int64)
    diff_count[rows, cols] = bc
    angle = np.zeros((n, n))
    angle[rows, cols] = ba
    weighted = np.zeros((n, n))
    weighted[rows, cols] = bw
    last = np.full((n, n), -1, np.int64)
    last[rows, cols] = bn
    reachable = np.isfinite(dist_m)
    diff_count[~reachable] = 0
    angle[~reachable] = 0.0
    weighted[~reachable] = 0.0
    return DominantPathField(spec, bs, dist_m, diff_count, angle, weighted, reachable, last)


def diffraction_loss_db(weighted_deg, cfg: DpmConfig):
    """``min(cap, base * sum_k growth**(k-1) * angle_k / angle_ref)``."""
    return np.minimum(cfg.diff_loss_cap_db, cfg.diff_loss_base_db * np.asarray(weighted_deg) / cfg.diff_angle_ref_deg)


def free_space_loss_db(dist_m, cfg: DpmConfig):
    d = np.maximum(np.asarray(dist_m, dtype=float), 1.0)
    return cfg.fs_ref_loss_db + 10.0 * cfg.fs_exponent * np.log10(d)


def field_to_radiomap(field: DominantPathField, budget: LinkBudget, cfg: DpmConfig | None = None) -> RadioMap:
    cfg = cfg or DpmConfig()
    ok = field.reachable & (field.diff_count <= cfg.max_diff_count)
    with np.errstate(invalid="ignore"):
        loss = free_space_loss_db(np.where(ok, field.dist_m, 1.0), cfg) + diffraction_loss_db(field.diff_weighted_deg, cfg)
    pl = np.where(ok, -loss, budget.noise_floor_db)
    truncated = pl <= budget.noise_floor_db
    pl = np.maximum(pl, budget.noise_floor_db)
    los = field.reachable & (field.diff_count == 0)
    return RadioMap(
        spec=field.spec,
        bs=field.bs,
        pathloss_db=pl,
        path_len_m=field.dist_m.copy(),
        los=los,
        truncated=truncated,
    )


def _trace_all(scene: CityScene, with_cars: bool, cfg: DpmConfig, transmitters) -> list[DominantPathField]:
    sg = SceneGeometry(scene.obstacles(with_cars))
    return [trace_dominant_paths(scene, bs, cfg, with_cars=with_cars, geometry=sg) for bs in transmitters]


def apply_car_envelope(with_cars: RadioMap, without_cars: RadioMap, budget: LinkBudget) -> RadioMap:
    """Keep the with-cars loss at least as large as the building-only loss.

    Cars are treated as extra attenuation on top of the building geometry, so
    a car that diverts the geodesic onto a route with gentler corners cannot
    make a pixel louder than in the car-free city.
    """
    pl = np.minimum(with_cars.pathloss_db, without_cars.pathloss_db)
    lifted = int(np.count_nonzero(pl < with_cars.pathloss_db))
    meta = dict(with_cars.meta, car_envelope_px=lifted)
    return RadioMap(
        spec=with_cars.spec,
        bs=with_cars.bs,
        pathloss_db=pl,
        path_len_m=with_cars.path_len_m,
        los=with_cars.los,
        truncated=pl <= budget.noise_floor_db,
        meta=meta,
    )


def simulate_pair(
    scene: CityScene,
    budget: LinkBudget | None = None,
    cfg: DpmConfig | None = None,
    transmitters=None,
):
    """Car-free and with-cars simulations of one scene in one call.

    Returns ``(maps_no_cars, maps_cars, fields_no_cars, fields_cars)``.
    """
    budget = budget or LinkBudget()
    cfg = cfg or DpmConfig()
    tx = list(transmitters if transmitters is not None else scene.bs)
    f0 = _trace_all(scene, False, cfg, tx)
    m0 = [field_to_radiomap(f, budget, cfg) for f in f0]
    if not scene.has_cars:
        return m0, list(m0), f0, list(f0)
    f1 = _trace_all(scene, True, cfg, tx)
    m1 = [field_to_radiomap(f, budget, cfg) for f in f1]
    if cfg.car_loss_envelope:
        m1 = [apply_car_envelope(a, b, budget) for a, b in zip(m1, m0)]
    return m0, m1, f0, f1


def simulate_scene(
    scene: CityScene,
    with_cars: bool,
    budget: LinkBudget | None = None,
    cfg: DpmConfig | None = None,
    transmitters=None,
) -> tuple[list[RadioMap], list[DominantPathField]]:
    """Radio maps for every transmitter of ``scene`` (default: its BS pool)."""
    budget = budget or LinkBudget()
    cfg = cfg or DpmConfig()
    tx = list(transmitters if transmitters is not None else scene.bs)
    if with_cars and scene.has_cars and cfg.car_loss_envelope:
        _, m1, _, f1 = simulate_pair(scene, budget, cfg, tx)
        return m1, f1
    fields = _trace_all(scene, with_cars, cfg, tx)
    return [field_to_radiomap(f, budget, cfg) for f in fields], fields
