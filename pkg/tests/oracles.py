"""Independent reference implementations used as test oracles."""

import math

import numpy as np

from radioloc.dpm import obstacle_geometry, visible_from
from radioloc.grid import Position


def naive_oracle(obs: np.ndarray, bs: Position, growth: float):
    """O(V^2) array Dijkstra over {bs} + convex corners, then per-pixel best last bend.

    Visibility comes from the vectorized wall-crossing test (independent of the
    tracer's segment walker); ties break on (distance, diffraction count, node).
    """
    geo = obstacle_geometry(obs)
    conv = np.flatnonzero(geo.convex)
    corners = geo.vertices[conv]
    src = np.array([2 * int(round(bs.x)), 2 * int(round(bs.y))])
    pts = np.vstack([src[None], corners])
    vids = np.concatenate([[-1], conv])
    V = len(pts)
    vis = np.zeros((V, V), bool)
    for a in range(V):
        vis[a] = visible_from(geo, pts[a], pts, src_vertex=vids[a], target_vertices=vids)
        vis[a, a] = False

    def seg(a, b):
        return math.sqrt(float((b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2)) / 2.0

    def turn(p, u, v):
        ix, iy = u[0] - p[0], u[1] - p[1]
        ox, oy = v[0] - u[0], v[1] - u[1]
        cross, dot = ix * oy - iy * ox, ix * ox + iy * oy
        straight = cross == 0 and dot > 0
        return (0.0 if straight else math.degrees(math.atan2(abs(cross), dot))), not straight

    dist = [math.inf] * V
    cnt = [0] * V
    wsum = [0.0] * V
    pred = [-1] * V
    done = [False] * V
    dist[0] = 0.0
    for _ in range(V):
        u = min((i for i in range(V) if not done[i] and dist[i] < math.inf), key=lambda i: (dist[i], cnt[i], i),
                default=None)
        if u is None:
            break
        done[u] = True
        for v in range(V):
            if done[v] or not vis[u, v]:
                continue
            nd = dist[u] + seg(pts[u], pts[v])
            if u == 0:
                nc, nw = 0, 0.0
            else:
                t, bent = turn(pts[pred[u]], pts[u], pts[v])
                nc, nw = cnt[u] + bent, wsum[u] + growth ** cnt[u] * t
            if (nd, nc, u) < (dist[v], cnt[v], pred[v] if pred[v] >= 0 else V):
                dist[v], cnt[v], pred[v], wsum[v] = nd, nc, u, nw

    n = obs.shape[0]
    rows, cols = np.nonzero(~obs)
    fp = np.stack([2 * (cols + 1), 2 * (rows + 1)], 1).astype(np.int64)
    pvis = np.stack([visible_from(geo, pts[v], fp, src_vertex=vids[v]) for v in range(V)])
    out_d = np.full((n, n), np.inf)
    out_c = np.zeros((n, n), int)
    for k, (r, c) in enumerate(zip(rows, cols)):
        p = fp[k]
        best = (math.inf, 0)
        if pvis[0, k]:
            # a visible receiver's geodesic is the straight segment itself
            out_d[r, c], out_c[r, c] = seg(src, p), 0
            continue
        for v in range(1, V):
            if not (math.isfinite(dist[v]) and pvis[v, k]):
                continue
            _, bent = turn(pts[pred[v]], pts[v], p)
            cand = (dist[v] + seg(pts[v], p), cnt[v] + bent)
            if cand < best:
                best = cand
        out_d[r, c], out_c[r, c] = best
    return out_d, out_c


def grid_referee(anchors, ranges, center, half=15.0, step=1e-2):
    """Unweighted squared-range LS minimizer by dense grid search around ``center``."""
    a = np.asarray(anchors, float)
    r = np.asarray(ranges, float)
    g = np.arange(-half, half + step / 2, step)
    X, Y = np.meshgrid(center[0] + g, center[1] + g)
    cost = np.zeros_like(X)
    for j in range(len(a)):
        cost += ((X - a[j, 0]) ** 2 + (Y - a[j, 1]) ** 2 - r[j] ** 2) ** 2
    k = int(np.argmin(cost))
    return np.array([X.flat[k], Y.flat[k]])


def corrupted_instances(n=100, seed=5, extra=50.0, anchors=5):
    """``n`` random geometries with ``anchors`` exact ranges, the first inflated by ``extra`` m."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a = rng.uniform(0, 100, (anchors, 2))
        x = rng.uniform(20, 80, 2)
        r = np.hypot(*(a - x).T)
        r[0] += extra
        out.append((a, r, x))
    return out


def fd_grad(f, x, eps):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def fd_check(f, tensors, eps=1e-6):
    """Worst relative error between backprop and central differences.

    ``f()`` builds a scalar ``Tensor`` from ``tensors`` (perturbed in place).
    """
    for t in tensors:
        t.grad = None
    f().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, analytic):
        num = np.zeros_like(t.data)
        for i in np.ndindex(t.data.shape):
            old = t.data[i]
            t.data[i] = old + eps
            fp = float(f().data)
            t.data[i] = old - eps
            fm = float(f().data)
            t.data[i] = old
            num[i] = (fp - fm) / (2 * eps)
        worst = max(worst, rel_err(num, g))
        t.grad = None
    return worst
