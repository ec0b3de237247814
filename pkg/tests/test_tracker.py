import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from geoseg.errors import ConfigError, ImageTooSmall, SizeMismatch
from geoseg.tracker import (
    Status,
    TrackerConfig,
    Tracks,
    forward_backward_filter,
    lk_track,
    min_eigenvalue_map,
    shi_tomasi,
    track_frames,
)


def shifted_pair(seed, du, dv, size=96, margin=24):
    """``next`` shows the same texture moved by (du, dv) pixels."""
    big = oracles.textured_image(seed, size + 2 * margin, size + 2 * margin)
    prev = big[margin:margin + size, margin:margin + size]
    nxt = big[margin - dv:margin - dv + size, margin - du:margin - du + size]
    return prev, nxt


def corner_points(img, n=60):
    return np.array([c.position for c in shi_tomasi(img, n, 0.01, 5)])


def test_constant_image_has_no_corners():
    assert shi_tomasi(np.full((32, 32), 0.4)) == []


def test_square_corners():
    # a 7x7 block pulls the maximum about half a window inside the square; a
    # 3x3 block keeps it within a pixel of the vertex
    img = np.zeros((48, 48))
    img[12:36, 16:40] = 1.0
    found = np.array([c.position for c in shi_tomasi(img, 10, 0.1, 5, block_size=3)])
    expected = np.array([[16, 12], [40, 12], [40, 36], [16, 36]], float)
    assert len(found) == 4
    for e in expected:
        assert np.min(np.linalg.norm(found - e, axis=1)) <= 1.0


def test_step_edge_has_no_corners():
    img = np.zeros((40, 40))
    img[:, 20:] = 1.0
    assert np.max(min_eigenvalue_map(img)) < 1e-12
    assert shi_tomasi(img) == []


@pytest.mark.parametrize("seed", range(3))
def test_scores_match_bruteforce(seed):
    img = np.random.default_rng(seed).random((32, 32))
    ref = oracles.brute_min_eig(img)
    assert np.max(np.abs(min_eigenvalue_map(img) - ref)) < 1e-9
    for c in shi_tomasi(img, 50, 0.01, 3):
        assert abs(c.score - ref[int(c.v), int(c.u)]) < 1e-9


def test_selection_rules():
    img = oracles.textured_image(4, 64, 64, smooth=1)
    corners = shi_tomasi(img, 25, 0.05, 6)
    scores = [c.score for c in corners]
    assert len(corners) <= 25
    assert scores == sorted(scores, reverse=True)
    assert min(scores) >= 0.05 * min_eigenvalue_map(img).max()
    pos = np.array([c.position for c in corners])
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(len(pos)) * 1e9
    assert d.min() >= 6


def test_too_small_image():
    with pytest.raises(ImageTooSmall):
        shi_tomasi(np.zeros((5, 5)))


def test_identity_flow():
    img = oracles.textured_image(1)
    pts = corner_points(img)
    tr = lk_track(img, img, pts)
    ok = tr.status == Status.VALID
    assert ok.all()
    assert np.max(np.abs(tr.q - tr.p)) < 0.01


@pytest.mark.parametrize("seed", range(20))
def test_integer_shift_recovered(seed):
    prev, nxt = shifted_pair(seed, 3, 0)
    tr = lk_track(prev, nxt, corner_points(prev))
    ok = tr.status == Status.VALID
    assert ok.sum() > 0.8 * len(tr)
    assert np.max(np.abs(tr.q[ok] - tr.p[ok] - [3, 0])) < 0.2


@settings(max_examples=30)
@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(0, 1000))
def test_shift_equivariance(du, dv, seed):
    # coarse pyramid levels need texture at coarse scales to see large motion
    size, margin = 160, 24
    big = oracles.multiscale_texture(seed, size + 2 * margin, size + 2 * margin)
    prev = big[margin:margin + size, margin:margin + size]
    nxt = big[margin - dv:margin - dv + size, margin - du:margin - du + size]
    tr = lk_track(prev, nxt, corner_points(prev, 30))
    # only points whose true match stays in view, clear of the window border
    dest = tr.p + [du, dv]
    visible = ((dest >= 10) & (dest <= size - 10)).all(axis=1)
    ok = (tr.status == Status.VALID) & visible
    assert np.max(np.abs(tr.q[ok] - tr.p[ok] - [du, dv]), initial=0.0) < 0.2


def test_flat_region_diverges():
    img = oracles.textured_image(2)
    img[30:70, 30:70] = 0.5
    tr = lk_track(img, img, np.array([[50.5, 50.5]]))
    assert tr.status[0] == Status.DIVERGED


def test_leaving_the_image_is_out_of_bounds():
    prev, nxt = shifted_pair(5, 12, 0)
    pts = corner_points(prev)
    tr = lk_track(prev, nxt, pts)
    gone = tr.p[:, 0] + 12 >= prev.shape[1] + 1
    assert gone.any()
    assert (tr.status[gone] != Status.VALID).all()
    assert set(tr.status[tr.status != Status.VALID]) <= {Status.OUT_OF_BOUNDS, Status.DIVERGED}


def test_size_mismatch():
    with pytest.raises(SizeMismatch):
        lk_track(np.zeros((32, 32)), np.zeros((32, 31)), np.array([[5.0, 5.0]]))


def test_output_order_matches_input():
    img = oracles.textured_image(3)
    pts = corner_points(img)[::-1]
    assert np.array_equal(lk_track(img, img, pts).p, pts)


def test_translation_has_no_fb_rejections():
    prev, nxt = shifted_pair(6, 2, -1)
    tr = forward_backward_filter(lk_track(prev, nxt, corner_points(prev)), prev, nxt)
    assert not (tr.status == Status.FB_REJECTED).any()


def test_corrupted_matches_are_rejected():
    prev, nxt = shifted_pair(7, 2, 1)
    r = np.random.default_rng(0)
    pts = corner_points(prev)
    centre = (pts[:, 0] > 20) & (pts[:, 0] < 76) & (pts[:, 1] > 20) & (pts[:, 1] < 76)
    p = r.choice(pts[centre], 100)
    q = r.uniform(12, 84, (100, 2))
    fake = Tracks(p, q, np.zeros(100, dtype=np.int8))
    out = forward_backward_filter(fake, prev, nxt)
    far = np.linalg.norm(q - p - [2, 1], axis=1) > 1.0
    assert (out.status[far] == Status.FB_REJECTED).sum() >= 0.95 * far.sum()


def test_fb_on_empty_input():
    out = forward_backward_filter(Tracks.empty(), np.zeros((32, 32)), np.zeros((32, 32)))
    assert len(out) == 0


def test_track_frames_only_valid_points_in_bounds():
    prev, nxt = shifted_pair(8, 4, 2)
    tr = track_frames(prev, nxt)
    v = tr.valid()
    assert len(v) > 10
    h, w = prev.shape
    assert ((v.q >= 0) & (v.q < [w, h])).all()


def test_csv_round_trip():
    r = np.random.default_rng(1)
    t = Tracks(r.uniform(0, 100, (7, 2)), r.uniform(0, 100, (7, 2)), r.integers(0, 4, 7).astype(np.int8))
    back = Tracks.from_csv(t.to_csv())
    assert np.array_equal(back.p, t.p) and np.array_equal(back.q, t.q)
    assert np.array_equal(back.status, t.status)
    assert t.to_csv().splitlines()[0] == "pu,pv,qu,qv,status"


def test_config_validation_names_field():
    with pytest.raises(ConfigError, match="window"):
        TrackerConfig(window=4)
    with pytest.raises(ConfigError, match="quality_level"):
        TrackerConfig(quality_level=0)
