import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from defectforge.errors import DegenerateImage, DimensionMismatch, ImageTooSmall
from defectforge.imgcore import ImageBuffer
from defectforge.matchfilter import (DESIRED, IRRELEVANT, NO_ANOMALY, FilterParams, FilterReport,
                                     HarrisParams, MatchFilter, SamplingPattern, compute_descriptors,
                                     decide, detect_keypoints, filter_decision, hamming_matrix,
                                     match_descriptors)
from defectforge.mockedits import local_edit, scramble

LADDER = [0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0]


def gray(a):
    return ImageBuffer(np.asarray(a, dtype=np.uint8)[..., None])


def square_image():
    a = np.zeros((64, 64), np.uint8)
    a[24:40, 24:40] = 255
    return gray(a)


def test_constant_image_has_no_keypoints():
    assert detect_keypoints(gray(np.full((32, 32), 90))) == []


def test_square_corners():
    kps = detect_keypoints(square_image())
    corners = [(23.5, 23.5), (39.5, 23.5), (23.5, 39.5), (39.5, 39.5)]
    assert len(kps) >= 4
    for kp in kps:
        assert min(np.hypot(kp.x - cx, kp.y - cy) for cx, cy in corners) <= 3.0
    for cx, cy in corners:
        assert any(np.hypot(kp.x - cx, kp.y - cy) <= 3.0 for kp in kps)


def test_keypoints_deterministic_and_bounded(fixture_set):
    p = HarrisParams(max_kp=5)
    a = detect_keypoints(fixture_set[0], p)
    assert a == detect_keypoints(fixture_set[0], p)
    assert len(a) <= 5
    assert all(k.response > p.threshold and 0 <= k.x < 64 and 0 <= k.y < 64 for k in a)
    assert [k.response for k in a] == sorted((k.response for k in a), reverse=True)


def test_image_too_small():
    with pytest.raises(ImageTooSmall):
        detect_keypoints(gray(np.zeros((5, 40))))


def test_descriptor_self_and_shift_invariance(fixture_set):
    img = fixture_set[4]
    kps = detect_keypoints(img, FilterParams().harris)
    d = compute_descriptors(img, kps)
    assert len(d) > 0 and d.bits.shape[1] == 256
    assert (np.diag(hamming_matrix(d, d)) == 0).all()
    assert img.gray().max() <= 225
    shifted = gray(img.gray().astype(int) + 30)
    d2 = compute_descriptors(shifted, kps)
    assert (np.diag(hamming_matrix(d, d2)) == 0).all()


def test_descriptor_scramble_distance(fixture_set):
    dists = []
    for i, img in enumerate(fixture_set[:20]):
        kps = detect_keypoints(img, FilterParams().harris)
        d = compute_descriptors(img, kps)
        ds = compute_descriptors(scramble(img, i), d.keypoints)
        dists.extend(np.diag(hamming_matrix(d, ds)))
    assert np.mean(dists) > 64


def test_boundary_keypoints_dropped():
    from defectforge.matchfilter import Keypoint
    img = square_image()
    d = compute_descriptors(img, [Keypoint(2.0, 2.0, 1.0), Keypoint(32.0, 32.0, 1.0)])
    assert len(d) == 1 and d.dropped == 1


def test_pattern_is_shared_and_immutable():
    a, b = SamplingPattern.create(3), SamplingPattern.create(3)
    assert np.array_equal(a.p, b.p) and np.array_equal(a.q, b.q)
    assert np.abs(a.p).max() <= 15
    with pytest.raises(ValueError):
        a.p[0, 0] = 1


def distinct_bits(n, seed):
    r = np.random.default_rng(seed)
    bits = r.random((n, 256)) < 0.5
    assert len({b.tobytes() for b in bits}) == n
    return bits


def test_match_identity_and_permutation():
    a = distinct_bits(40, 1)
    assert match_descriptors(a, a) == [(i, i) for i in range(40)]
    rev = a[::-1]
    m = match_descriptors(a, rev)
    assert sorted(m) == [(i, 39 - i) for i in range(40)]


def test_random_descriptor_sets_rarely_match():
    assert len(match_descriptors(distinct_bits(100, 2), distinct_bits(100, 3))) <= 5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 10**6))
def test_matches_are_one_to_one(na, nb, seed):
    r = np.random.default_rng(seed)
    a = r.random((na, 256)) < 0.5
    b = a[r.integers(0, na, nb)] ^ (r.random((nb, 256)) < 0.1)
    m = match_descriptors(a, b)
    assert len({i for i, _ in m}) == len(m) == len({j for _, j in m})
    d = hamming_matrix(a, b)
    assert all(d[i, j] <= 64 for i, j in m)


def test_hamming_matches_bit_count():
    a, b = distinct_bits(5, 4), distinct_bits(6, 5)
    ref = np.array([[np.count_nonzero(x != y) for y in b] for x in a])
    assert np.array_equal(hamming_matrix(a, b), ref)


@given(st.floats(0, 1), st.floats(0, 0.5), st.floats(0.5, 1))
def test_decision_trichotomy(ratio, lo, hi):
    d = decide(ratio, lo, hi)
    assert d == (NO_ANOMALY if ratio > hi else IRRELEVANT if ratio <= lo else DESIRED)


def test_decision_examples(fixture_set):
    img = fixture_set[0]
    r = filter_decision(img, img)
    assert r.ratio == 1.0 and r.decision == NO_ANOMALY
    assert filter_decision(img, scramble(img, 1)).decision == IRRELEVANT
    cand, _, _ = local_edit(img, 11, area_frac=0.15, amplitude=90.0)
    r = filter_decision(img, cand)
    assert r.decision == DESIRED and 0 <= r.ratio <= 1
    assert FilterReport.from_dict(r.to_dict()) == r
    assert filter_decision(img, cand) == r


def test_symmetry_on_fixture_set(fixture_set):
    gate = MatchFilter()
    for img in fixture_set:
        assert gate(img, img).decision == NO_ANOMALY


def test_degenerate_and_mismatch(fixture_set):
    with pytest.raises(DegenerateImage):
        filter_decision(gray(np.full((64, 64), 40)), fixture_set[0])
    with pytest.raises(DimensionMismatch):
        filter_decision(fixture_set[0], gray(np.zeros((32, 32))))


def ladder_ratios(gate, img, seed):
    desc = gate.describe(img)
    return [gate(img, local_edit(img, seed, area_frac=a, amplitude=90.0)[0], desc).ratio
            for a in LADDER]


def test_gate_monotone_on_seeded_ladder(fixture_set):
    ratios = ladder_ratios(MatchFilter(), fixture_set[0], 100)
    assert ratios[0] == 1.0 and ratios[-1] < 0.05
    assert all(x >= y for x, y in zip(ratios, ratios[1:]))


def test_gate_trend_across_ladders(fixture_set):
    # per-image ladders are not all monotone (the min(kn, kc) denominator
    # shrinks when edits erase corners), but the trend must hold
    gate = MatchFilter()
    for i, img in enumerate(fixture_set[:12]):
        r = ladder_ratios(gate, img, 100 + i)
        assert r[0] == 1.0
        assert r[-1] <= min(r[:5])
        assert spearmanr(LADDER, r).statistic < -0.8
