import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radioloc.toa import (
    BisectionLocalizer, CorrentropyLocalizer, DegenerateGeometryError, Gtrs, InsufficientAnchorsError,
    PocsLocalizer, RangingProblem, bisection_robust_localize, correntropy_localize, gtrs_phi, gtrs_y,
    pocs_localize, srls_system,
)

from oracles import corrupted_instances, grid_referee

SQ = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], float)


def err(res, x):
    return math.hypot(res.estimate.x - x[0], res.estimate.y - x[1])


def exact(anchors, x):
    return np.hypot(*(np.asarray(anchors) - x).T)


def test_problem_validation():
    with pytest.raises(InsufficientAnchorsError):
        RangingProblem(np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        RangingProblem(SQ, [1, 2, 3])
    with pytest.raises(ValueError):
        RangingProblem(SQ, [1, 2, 3, -1])
    with pytest.raises(ValueError):
        RangingProblem(SQ, [1, 2, 3, 4], bias_b_m=-1)
    assert np.array_equal(RangingProblem(SQ, [1, 25, 3, 30], 20).adjusted_ranges(), [0, 5, 0, 10])


def test_pocs_consistent_disks():
    a = SQ[:3]
    r = pocs_localize(RangingProblem(a, exact(a, (3, 4))))
    assert err(r, (3, 4)) < 0.1


def test_pocs_single_anchor_feasible():
    r = pocs_localize(RangingProblem([[5, 5]], [3.0]), x0=(20, 20))
    assert math.dist(r.estimate, (5, 5)) <= 3.0 + 1e-9 and r.converged


def test_pocs_disjoint_disks_limit_cycle():
    r = pocs_localize(RangingProblem([[0, 0], [10, 0]], [2.0, 2.0]), max_iter=200)
    # the two projections alternate between (2, 0) and (8, 0) forever
    assert not r.converged and np.isfinite(r.estimate).all()


def test_bisection_square_exact():
    r = bisection_robust_localize(RangingProblem(SQ, exact(SQ, (3, 4))))
    assert err(r, (3, 4)) < 1e-6
    assert np.allclose(grid_referee(SQ, exact(SQ, (3, 4)), (5, 5), half=5, step=1e-3), (3, 4), atol=1e-3)


def test_bisection_errors():
    with pytest.raises(DegenerateGeometryError):
        bisection_robust_localize(RangingProblem([[0, 0], [5, 0], [10, 0]], [1, 2, 3]))
    with pytest.raises(InsufficientAnchorsError):
        bisection_robust_localize(RangingProblem([[0, 0], [5, 0]], [1, 2]))


def test_bias_adjustment_helps_inflated_link():
    x = np.array([3.0, 4.0])
    r = exact(SQ, x)
    r[1] += 30.0
    r0 = bisection_robust_localize(RangingProblem(SQ, r, 0.0))
    r20 = bisection_robust_localize(RangingProblem(SQ, r, 20.0))
    assert err(r20, x) < err(r0, x)
    # the b = 0 solution is the squared-range LS minimizer (grid referee)
    ref = grid_referee(SQ, r, (r0.estimate.x, r0.estimate.y), half=1.0, step=1e-3)
    assert math.dist(r0.estimate, ref) < 2e-3


def test_bisection_random_noiseless():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.uniform(0, 100, (4, 2))
        x = rng.uniform(0, 100, 2)
        assert err(bisection_robust_localize(RangingProblem(a, exact(a, x))), x) < 1e-6


def test_gtrs_matches_dense_solve_and_brackets():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.uniform(0, 100, (5, 2))
        r = exact(a, rng.uniform(0, 100, 2)) + rng.normal(0, 5, 5).clip(-1, None)
        A, b = srls_system(a, np.abs(r))
        g = Gtrs(A, b)
        lo, hi = g.bracket()
        assert g.phi(lo) >= 0 >= g.phi(hi)
        lams = np.linspace(lo, hi, 50)
        ph = [g.phi(l) for l in lams]
        assert np.all(np.diff(ph) <= 1e-9 * max(1.0, max(map(abs, ph))))
        AtA, Atb = A.T @ A, A.T @ b
        lam = 0.5 * (lo + hi)
        np.testing.assert_allclose(g.y(lam), gtrs_y(AtA, Atb, lam), rtol=1e-7, atol=1e-7)
        assert g.phi(lam) == pytest.approx(gtrs_phi(AtA, Atb, lam), rel=1e-6, abs=1e-6)


def test_correntropy_exact_ranges():
    x = np.array([3.0, 4.0])
    r = correntropy_localize(RangingProblem(SQ, exact(SQ, x)))
    assert err(r, x) < 1e-6 and np.all(r.weights > 0.999)


def test_correntropy_downweights_outlier():
    a = np.array([[0, 0], [100, 0], [0, 100], [100, 100], [50, -20]], float)
    x = np.array([40.0, 55.0])
    r = exact(a, x)
    r[0] += 50.0
    c = correntropy_localize(RangingProblem(a, r))
    u = bisection_robust_localize(RangingProblem(a, r))
    assert c.weights[0] < 0.1
    assert err(c, x) < err(u, x)


def test_correntropy_wide_kernel_is_unweighted():
    a = np.array([[0, 0], [100, 0], [0, 100], [100, 100]], float)
    rng = np.random.default_rng(2)
    r = exact(a, (30, 60)) + rng.normal(0, 3, 4)
    c = correntropy_localize(RangingProblem(a, r), kernel_sigma_m=1e7, restarts=False)
    # unweighted here means uniform kernel weights on range residuals
    base = RangingProblem(a, r)
    from radioloc.toa import range_normalizer
    w = bisection_robust_localize(base, weights=range_normalizer(r))
    assert math.dist(c.estimate, w.estimate) < 1e-6


def test_correntropy_beats_unweighted_95_of_100():
    wins = low = 0
    for a, r, x in corrupted_instances(100):
        p = RangingProblem(a, r)
        c = correntropy_localize(p)
        u = bisection_robust_localize(p)
        ref = grid_referee(a, r, (u.estimate.x, u.estimate.y), half=0.5, step=1e-3)
        assert math.dist(u.estimate, ref) < 5e-3
        wins += err(c, x) < math.dist(ref, x)
        low += c.weights[0] < 0.1
    assert wins >= 95 and low >= 95


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-500, 500), st.floats(-500, 500))
def test_translation_equivariance(seed, tx, ty):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 100, (4, 2))
    x = rng.uniform(10, 90, 2)
    r = exact(a, x) + rng.uniform(0, 10, 4)
    t = np.array([tx, ty])
    for solve, tol in ((bisection_robust_localize, 1e-6), (correntropy_localize, 1e-5)):
        e0 = np.array(solve(RangingProblem(a, r)).estimate)
        e1 = np.array(solve(RangingProblem(a + t, r)).estimate)
        assert np.allclose(e1, e0 + t, atol=tol * max(1, abs(tx), abs(ty)))
    p0 = np.array(pocs_localize(RangingProblem(a, exact(a, x)), tol=1e-12).estimate)
    p1 = np.array(pocs_localize(RangingProblem(a + t, exact(a, x)), tol=1e-12).estimate)
    assert np.allclose(p1, p0 + t, atol=1e-6)


def test_all_los_instances_within_pixel(toa_clean):
    insts = [i for i in toa_clean.instances if i.los.all()]
    assert len(insts) >= 10
    diag = toa_clean.spec.pixel_diag_m
    loc = BisectionLocalizer(0.0)
    ok = [math.dist(loc.localize(i), i.truth) <= diag for i in insts]
    assert np.mean(ok) >= 0.99


def test_localizer_wrappers(toa_clean):
    i = toa_clean.instances[0]
    for loc in (PocsLocalizer(), BisectionLocalizer(20.0), CorrentropyLocalizer()):
        assert np.isfinite(loc.localize(i)).all()
