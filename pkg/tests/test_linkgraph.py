import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keycongeal import geometry, harness
from keycongeal import linkgraph as lg
from keycongeal.congeal import select_keyframes
from keycongeal.keypoints import KeypointSet, normalize_scales

from conftest import random_homography


def shifted_sets(rng, shifts, n=80):
    """Keypoint sets sharing descriptors; frame t's positions are frame 0's minus shifts[t]."""
    d = rng.normal(size=(n, 32))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    base = rng.uniform(20, 300, (n, 2))
    return [KeypointSet(t, base - np.asarray(s, float), np.full(n, 2.0), np.ones(n), d)
            for t, s in enumerate(shifts)]


def test_estimate_translations_constant_motion(rng):
    sets = shifted_sets(rng, [(0, 0), (2, 3), (4, 6), (6, 9)])
    offs, diag = lg.estimate_translations(sets)
    np.testing.assert_allclose(offs, [[0, 0], [2, 3], [4, 6], [6, 9]], atol=1e-9)
    assert diag == []


def test_estimate_translations_static(rng):
    offs, _ = lg.estimate_translations(shifted_sets(rng, [(0, 0)] * 4))
    np.testing.assert_allclose(offs, 0, atol=1e-12)


def test_estimate_translations_no_matches_logged(rng):
    sets = shifted_sets(rng, [(0, 0), (1, 0)])
    # Identical descriptors everywhere make every match ambiguous.
    sets[1].descriptors[:] = sets[1].descriptors[0]
    offs, diag = lg.estimate_translations(sets)
    assert np.array_equal(offs[1], [0.0, 0.0])
    assert diag == [{"pair": [0, 1], "status": "no-matches"}]


def test_mean_motion_robust_to_small_outliers():
    rng = np.random.default_rng(5)
    for _ in range(10):
        src = rng.uniform(0, 300, (100, 2))
        vec = np.tile([5.0, 0.0], (100, 1))
        bad = rng.choice(100, 20, replace=False)
        ang = rng.uniform(0, 2 * np.pi, 20)
        vec[bad] = rng.uniform(0, 2, (20, 1)) * np.stack([np.cos(ang), np.sin(ang)], 1)
        t = lg.mean_motion(src, src - vec, rng)
        assert abs(t[0] - 5) < 1 and abs(t[1]) < 1


def test_overlap_region_examples():
    full = lg.overlap_region((0, 0), (0, 0), (320, 240))
    assert full == ((0, 0, 320, 240), (0, 0, 320, 240))
    assert lg.overlap_region((0, 0), (400, 0), (320, 240)) is None
    ri, rj = lg.overlap_region((0, 0), (160, 0), (320, 240))
    assert ri == (160, 0, 320, 240) and rj == (0, 0, 160, 240)
    assert (ri[2] - ri[0]) * (ri[3] - ri[1]) == 0.5 * 320 * 240
    # Below the 10% gate.
    assert lg.overlap_region((0, 0), (300, 0), (320, 240)) is None


def test_prune_exact_consistent_keeps_all(rng):
    H = random_homography(rng)
    src = rng.uniform(0, 320, (60, 2))
    res = lg.prune_pair(src, geometry.warp_points(H, src), rng)
    assert res.keep.all()


def test_prune_too_few_candidates():
    pts = np.array([[0, 0], [10, 0], [0, 10]], float)
    res = lg.prune_pair(pts, pts)
    assert not res.keep.any() and res.H is None


@pytest.mark.parametrize("seed", range(3))
def test_prune_separates_outliers(seed):
    rng = np.random.default_rng(seed)
    H = random_homography(rng)
    src = rng.uniform(0, 320, (100, 2))
    dst = geometry.warp_points(H, src) + rng.normal(0, 0.5, (100, 2))
    out_src = rng.uniform(0, 320, (50, 2))
    out_dst = rng.uniform(0, 320, (50, 2))
    res = lg.prune_pair(np.vstack([src, out_src]), np.vstack([dst, out_dst]), rng)
    assert res.keep[:100].sum() >= 95
    assert res.keep[100:].sum() <= 2


def test_prune_is_seed_deterministic(rng):
    src = rng.uniform(0, 320, (80, 2))
    dst = src + rng.normal(0, 2, (80, 2))
    a = lg.prune_pair(src, dst, np.random.default_rng(3))
    b = lg.prune_pair(src, dst, np.random.default_rng(3))
    assert np.array_equal(a.keep, b.keep)


def test_smoothness_filter_rejects_lone_vector(rng):
    src = rng.uniform(0, 100, (40, 2))
    dst = src + [3.0, 1.0]
    dst[7] += [6.0, -5.0]
    keep = lg.smoothness_filter(src, dst)
    assert not keep[7] and keep.sum() == 39


def test_link_weight_examples():
    back = lg.Link(0, 1, (0, 0), (0, 0), (0, 0), (0, 0), 1.0)
    for q in range(6):
        assert lg.link_weight(back, 1, lg.BACKWARD, q) == 1.0
    assert lg.link_weight(back, 0, lg.BACKWARD, 5) == 0.0
    half = lg.Link(0, 1, (0, 0), (0, 0), (0, 0), (0, 0), 0.5)
    assert lg.link_weight(half, 1, lg.BACKWARD_FORWARD, 0) == pytest.approx(0.5)
    assert lg.link_weight(half, 1, lg.BACKWARD_FORWARD, 2) == pytest.approx(0.5 ** 0.49)
    assert lg.link_weight(half, 1, lg.BACKWARD_FORWARD, 2) == pytest.approx(0.712, abs=5e-4)
    with pytest.raises(ValueError):
        lg.link_weight(half, 5, lg.BACKWARD, 0)
    with pytest.raises(ValueError):
        lg.scheme_coefficients("sideways")


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 1.0), st.integers(0, 200))
def test_weight_monotone_in_q(base, q):
    a = lg.schedule(base, q, 0.7)
    b = lg.schedule(base, q + 1, 0.7)
    assert b >= a
    assert 0 <= a <= 1


def test_weight_converges_to_one():
    assert lg.schedule(0.01, 100, 0.7) == pytest.approx(1.0, abs=1e-12)
    assert lg.schedule(0.0, 100, 0.7) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0))
def test_scale_ordering(s1, s2):
    lo, hi = sorted([s1, s2])
    w = lg.view_weights([lo, hi], [0, 0], 1, lg.BACKWARD_FORWARD, 0)
    assert w[1] >= w[0]


def test_symmetric_views():
    g = lg.LinkGraph([0, 1], [2, 2], [0, 1], [0, 1], [[0, 0], [1, 1]], [[2, 2], [3, 3]], [0.5, 0.5])
    for k in range(2):
        link = g.link(k)
        # Seen from frame_b the partner is earlier (backward); from frame_a later (forward).
        wa = lg.link_weight(link, link.frame_a, lg.BACKWARD, 0)
        wb = lg.link_weight(link, link.frame_b, lg.BACKWARD, 0)
        assert wa == 0.0 and wb == 0.5


def test_refresh_keeps_warped_consistent(rng):
    g = lg.LinkGraph([0, 0, 1], [1, 2, 2], [0, 1, 2], [0, 1, 2],
                     rng.uniform(0, 100, (3, 2)), rng.uniform(0, 100, (3, 2)), [1, 1, 1])
    Hs = {f: random_homography(rng) for f in range(3)}
    for _ in range(3):
        for f in range(3):
            Hs[f] = geometry.compose(random_homography(rng, 0.01, 1e-6, 1.0), Hs[f])
            g.refresh(f, Hs[f])
    for k in range(3):
        np.testing.assert_array_equal(g.warped_a[k], geometry.warp_points(Hs[g.frame_a[k]], g.orig_a[k])[0])
        np.testing.assert_array_equal(g.warped_b[k], geometry.warp_points(Hs[g.frame_b[k]], g.orig_b[k])[0])


def test_graph_rejects_unordered_links():
    with pytest.raises(ValueError):
        lg.LinkGraph([1], [0], [0], [0], [[0, 0]], [[0, 0]], [1.0])


def test_graph_json_round_trip(rng):
    g = lg.LinkGraph([0, 1], [1, 2], [0, 0], [0, 0], rng.uniform(0, 9, (2, 2)),
                     rng.uniform(0, 9, (2, 2)), [0.5, 1.0])
    h = lg.LinkGraph.from_json(g.to_json())
    np.testing.assert_array_equal(h.orig_a, g.orig_a)
    np.testing.assert_array_equal(h.frame_b, g.frame_b)


def test_connect_two_identical_frames(rng):
    sets = shifted_sets(rng, [(0, 0), (0, 0)])
    normalize_scales(sets)
    from keycongeal.keypoints import match_ratio
    m = match_ratio(sets[0], sets[1])
    g = lg.connect_stack({0: sets[0], 1: sets[1]}, {0: (0, 0), 1: (0, 0)}, (320, 320))
    assert len(g) == len(m) == 80
    assert g.pair_counts == {(0, 1): 80}


def test_connect_skips_non_overlapping_pairs(rng):
    sets = shifted_sets(rng, [(0, 0), (150, 0), (300, 0)], n=150)
    normalize_scales(sets)
    offs = {0: (0, 0), 1: (150, 0), 2: (300, 0)}
    g = lg.connect_stack(dict(enumerate(sets)), offs, (320, 320))
    assert set(g.pair_counts) == {(0, 1), (1, 2)}
    assert set(zip(g.frame_a.tolist(), g.frame_b.tolist())) == {(0, 1), (1, 2)}


def _true_link_fraction(g, kps):
    tracks = [k.extra["track"] for k in kps]
    labels = [k.extra["label"] for k in kps]
    good = [tracks[a][i] == tracks[b][j] and labels[a][i] == harness.INLIER
            for a, b, i, j in zip(g.frame_a, g.frame_b, g.kp_a, g.kp_b)]
    return float(np.mean(good)), int(np.sum(good))


def test_connect_links_are_true_correspondences():
    spec = harness.SceneSpec(trajectory="homography", M=5, noise_sigma=0.5, outlier_frac=0.2,
                             step=20, seed=3, render=False)
    sc = harness.generate_scene(spec)
    normalize_scales(sc.keypoints)
    offs, _ = lg.estimate_translations(sc.keypoints)
    g = lg.connect_stack(dict(enumerate(sc.keypoints)), dict(enumerate(offs)), sc.size)
    frac, _ = _true_link_fraction(g, sc.keypoints)
    assert frac >= 0.9


def test_dense_graph_has_more_background_links():
    spec = harness.SceneSpec(trajectory="translation", M=21, noise_sigma=0.5, outlier_frac=0.2,
                             fg_count=2, step=8, seed=4, render=False)
    sc = harness.generate_scene(spec)
    normalize_scales(sc.keypoints)
    offs, _ = lg.estimate_translations(sc.keypoints)
    keys = select_keyframes(21, 5)
    dense = lg.connect_stack({k: sc.keypoints[k] for k in keys}, {k: offs[k] for k in keys}, sc.size)
    chain = [lg.connect_stack({a: sc.keypoints[a], b: sc.keypoints[b]},
                              {a: offs[a], b: offs[b]}, sc.size)
             for a, b in zip(keys[:-1], keys[1:])]
    f_dense, n_dense = _true_link_fraction(dense, sc.keypoints)
    chain_stats = [_true_link_fraction(g, sc.keypoints) for g in chain]
    n_chain = sum(n for _, n in chain_stats)
    bad_chain = sum(len(g) for g in chain) - n_chain
    assert n_dense > n_chain
    # Inlier:outlier ratio of the dense graph is at least the chain's.
    assert n_dense * max(bad_chain, 1) >= n_chain * (len(dense) - n_dense)
