import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from radioloc.grid import (
    GridSpec, LinkBudget, Position, RadioMap, CityScene, count_detectable, from_gray, pathloss_to_rss,
    pixel_index, rss_to_pathloss, to_gray,
)

B = LinkBudget()
finite = st.floats(-300, 50, allow_nan=False)


def test_defaults():
    g = GridSpec()
    assert (g.size_px, g.pixel_len_m) == (256, 1.0)
    assert (B.tx_power_dbm, B.noise_psd_dbm_hz, B.bandwidth_hz, B.noise_floor_db, B.carrier_ghz) == (
        23.0, -174.0, 10e6, -134.0, 5.9)


@pytest.mark.parametrize("kw", [dict(size_px=15), dict(pixel_len_m=0.0), dict(pixel_len_m=-1.0)])
def test_gridspec_rejects(kw):
    with pytest.raises(ValueError):
        GridSpec(**kw)


@pytest.mark.parametrize("kw", [dict(bandwidth_hz=0.0), dict(noise_floor_db=0.0), dict(noise_floor_db=5.0)])
def test_budget_rejects(kw):
    with pytest.raises(ValueError):
        LinkBudget(**kw)


def test_central_box_full_scale():
    g = GridSpec()
    lo, hi = g.central_box(164)
    assert hi - lo + 1 == 164 and (lo + hi) / 2 == g.center
    lo, hi = g.central_box(150)
    assert hi - lo + 1 == 150 and (lo + hi) / 2 == g.center


def test_rss_examples():
    assert pathloss_to_rss(-100.0, B) == -77.0
    assert pathloss_to_rss(0.0, B) == 23.0
    assert pathloss_to_rss(-134.0, B) == -111.0
    assert rss_to_pathloss(-77.0, B) == -100.0
    assert rss_to_pathloss(23.0, B) == 0.0


def test_rss_roundtrip_vector():
    v = np.random.default_rng(0).uniform(-200, 0, 100)
    np.testing.assert_allclose(rss_to_pathloss(pathloss_to_rss(v, B), B), v, rtol=0, atol=1e-12)


def test_gray_endpoints():
    assert to_gray(-134.0, B) == 0.0
    assert to_gray(0.0, B) == 1.0
    assert to_gray(-67.0, B) == 0.5


def test_gray_accepts_radiomap():
    g = GridSpec(16, 1.0)
    pl = np.full((16, 16), -67.0)
    z = np.zeros((16, 16))
    m = RadioMap(g, Position(1, 1), pl, z, z.astype(bool), z.astype(bool))
    assert np.all(to_gray(m, B) == 0.5)


def test_count_detectable_examples():
    pl = [-100, -140, -130, -120, -133]
    assert count_detectable(pl, B, 0) == 4
    # threshold -124: only -100 and -120 exceed it
    assert count_detectable(pl, B, 10) == 2
    assert count_detectable([], B, 0) == 0
    with pytest.raises(ValueError):
        count_detectable(pl, B, -1)


@given(finite)
def test_gray_roundtrip(pl):
    assert math.isclose(float(from_gray(to_gray(pl, B), B)), pl, rel_tol=0, abs_tol=1e-9)


@given(finite, finite)
def test_gray_monotone(a, b):
    if a < b:
        assert to_gray(a, B) <= to_gray(b, B)


@given(finite)
def test_rss_roundtrip(pl):
    assert rss_to_pathloss(pathloss_to_rss(pl, B), B) == pytest.approx(pl, abs=1e-12)


@given(st.lists(st.floats(-200, 0, allow_nan=False), max_size=12), st.floats(0, 50), st.floats(0, 50))
def test_count_detectable_monotone_in_margin(pl, m1, m2):
    lo, hi = sorted((m1, m2))
    assert count_detectable(pl, B, hi) <= count_detectable(pl, B, lo)


def test_pixel_index_convention():
    assert pixel_index(Position(1, 1)) == (0, 0)
    assert pixel_index(Position(3, 7)) == (6, 2)


def test_scene_immutable_and_validated():
    g = GridSpec(16, 1.0)
    s = CityScene(g, np.zeros((16, 16)))
    with pytest.raises(ValueError):
        s.buildings[0, 0] = True
    with pytest.raises(ValueError):
        CityScene(g, np.zeros((8, 8)))
    assert not s.has_cars and s.free().all()
