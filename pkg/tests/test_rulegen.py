import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defectforge.errors import (DidNotConverge, DimensionMismatch, DimensionTooSmall,
                                MaskTouchesBorder)
from defectforge.imgcore import DefectMask, ImageBuffer, substream
from defectforge.rulegen import (PerlinParams, RuleConfig, ScalarField, cut_paste, fractal_perlin,
                                 gaussian_corrupt, laplacian_residual, perlin_fade, perlin_mask,
                                 perlin_noise_2d, perlin_texture_blend, poisson_blend, poisson_solve,
                                 random_gradients, synthesize, threshold_mask)


# --- independent reference evaluators --------------------------------------

def ref_fade(t):
    return 6 * t**5 - 15 * t**4 + 10 * t**3


def ref_noise(x, y, grads):
    """Scalar Perlin kernel written out corner by corner."""
    i, j = math.floor(x), math.floor(y)
    fx, fy = x - i, y - j
    corners = {}
    for di in (0, 1):
        for dj in (0, 1):
            gx, gy = grads[j + dj][i + di]
            corners[di, dj] = gx * (fx - di) + gy * (fy - dj)
    u, v = ref_fade(fx), ref_fade(fy)
    bottom = corners[0, 0] * (1 - u) + corners[1, 0] * u
    top = corners[0, 1] * (1 - u) + corners[1, 1] * u
    return bottom * (1 - v) + top * v


def dense_poisson(target, source, mask):
    """Direct sparse-free solve of the 5-point system on the masked pixels."""
    idx = {p: k for k, p in enumerate(zip(*np.nonzero(mask)))}
    n = len(idx)
    A = np.zeros((n, n))
    b = np.zeros(n)
    for (y, x), k in idx.items():
        A[k, k] = 4
        b[k] = 4 * source[y, x]
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            q = (y + dy, x + dx)
            b[k] -= source[q]
            if q in idx:
                A[k, idx[q]] = -1
            else:
                b[k] += target[q]
    sol = target.astype(np.float64).copy()
    for (y, x), v in zip(idx, np.linalg.solve(A, b)):
        sol[y, x] = v
    return sol


def gray(a):
    return ImageBuffer(np.asarray(a, dtype=np.uint8)[..., None])


# --- fade / noise ------------------------------------------------------------

def test_fade_values():
    assert perlin_fade(0.0) == 0.0
    assert perlin_fade(1.0) == 1.0
    assert abs(perlin_fade(0.25) - 0.103516) <= 1e-6
    with pytest.raises(AssertionError):
        perlin_fade(1.5)


@given(st.floats(0, 1), st.floats(0, 1))
def test_fade_monotone_and_symmetric(a, b):
    lo, hi = min(a, b), max(a, b)
    assert perlin_fade(lo) <= perlin_fade(hi)
    assert abs(perlin_fade(a) + perlin_fade(1 - a) - 1) < 1e-12
    assert abs(perlin_fade(a) - ref_fade(a)) < 1e-12


def test_fade_flat_at_endpoints():
    h = 1e-4
    for t in (0.0, 1.0 - h):
        assert abs((perlin_fade(t + h) - perlin_fade(t)) / h) < 1e-6


def test_noise_hand_cases():
    grads = np.tile([1.0, 0.0], (2, 2, 1))
    assert abs(perlin_noise_2d(0.25, 0.25, grads) - 0.146484) < 1e-5
    g = random_gradients(substream(3), 5, 5)
    for x, y in [(0, 0), (1, 2), (3, 3)]:
        assert perlin_noise_2d(x, y, g) == 0.0


def test_noise_matches_reference():
    g = random_gradients(substream(11), 6, 6)
    r = np.random.default_rng(1)
    for x, y in r.uniform(0, 4.99, size=(200, 2)):
        assert abs(perlin_noise_2d(x, y, g) - ref_noise(x, y, g.tolist())) < 1e-12
        assert abs(perlin_noise_2d(x, y, g)) <= math.sqrt(2) / 2 + 1e-12


# --- fractal field / masks --------------------------------------------------

def test_fractal_single_octave_is_plain_noise():
    p = PerlinParams(cell_size=8, octaves=1)
    f = fractal_perlin(16, 16, p, substream(5))
    g = random_gradients(substream(5), 4, 4)
    assert f.values[3, 5] == pytest.approx(ref_noise(5.5 / 8, 3.5 / 8, g.tolist()), abs=1e-12)


def test_fractal_deterministic_and_stats():
    p = PerlinParams()
    a = fractal_perlin(64, 64, p, substream(9))
    b = fractal_perlin(64, 64, p, substream(9))
    assert np.array_equal(a.values, b.values)
    assert np.abs(a.values).max() <= 1
    assert 0.05 <= a.values.std() <= 0.5


def test_fractal_too_small():
    with pytest.raises(DimensionTooSmall):
        fractal_perlin(8, 64, PerlinParams(cell_size=16), substream(0))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 4, 8, 16]), st.integers(1, 5), st.floats(0.1, 1.0), st.integers(0, 10**6))
def test_fractal_bounded(cell, octaves, persistence, seed):
    f = fractal_perlin(32, 32, PerlinParams(cell, octaves, persistence), substream(seed))
    assert np.abs(f.values).max() <= 1.0


def test_threshold_mask():
    f = ScalarField(np.array([[-0.5, 0.3]]))
    assert threshold_mask(f, 0.0).bits.tolist() == [[False, True]]
    g = fractal_perlin(32, 32, PerlinParams(cell_size=8), substream(1))
    assert threshold_mask(g, 2).is_empty()
    assert threshold_mask(g, -2).area == 32 * 32


def test_perlin_mask_redraws_until_nonempty():
    m = perlin_mask((64, 64), PerlinParams(threshold=0.2), seed=3)
    assert m.area > 0


# --- engines -----------------------------------------------------------------

def test_texture_blend_examples():
    normal = gray(np.full((4, 4), 100))
    tex = gray(np.full((4, 4), 200))
    bits = np.zeros((4, 4), bool)
    bits[1:3, 1:3] = True
    mask = DefectMask(bits)
    assert perlin_texture_blend(normal, tex, mask, 0.0).image == normal
    s1 = perlin_texture_blend(normal, tex, mask, 1.0)
    assert (s1.image.gray()[bits] == 200).all()
    s = perlin_texture_blend(normal, tex, mask, 0.3)
    assert s.image.gray()[1, 1] == 130 and s.image.gray()[0, 0] == 100
    assert s.provenance == "rule:perlin"
    with pytest.raises(DimensionMismatch):
        perlin_texture_blend(normal, gray(np.zeros((4, 5))), mask, 0.5)


def test_cut_paste_examples():
    const = gray(np.full((32, 32), 77))
    s = cut_paste(const, substream(0), 0.25)
    assert s.image == const and s.mask.area > 0
    grad = gray(np.add.outer(np.arange(32) * 3, np.arange(32) * 5) % 256)
    s = cut_paste(grad, substream(4), 0.25)
    (sx, sy), (dx, dy), (w, h) = s.params["src"], s.params["dst"], s.params["size"]
    assert np.array_equal(s.image.gray()[dy:dy + h, dx:dx + w], grad.gray()[sy:sy + h, sx:sx + w])
    assert s.mask.area == w * h
    assert s.provenance == "rule:cutpaste"


def test_cut_paste_self_paste_is_identity():
    class Fixed:
        def integers(self, lo, hi):
            return lo
    img = gray(np.arange(64).reshape(8, 8))
    s = cut_paste(img, Fixed(), 0.5)
    assert s.image == img and s.mask.area == 2 * 2


def test_gaussian_examples():
    img = gray(np.full((64, 64), 128))
    full = DefectMask(np.ones((64, 64), bool))
    assert gaussian_corrupt(img, full, 0.0, substream(0)).image == img
    assert gaussian_corrupt(img, DefectMask.empty(64, 64), 30.0, substream(0)).image == img
    s = gaussian_corrupt(img, full, 20.0, substream(1))
    d = s.image.gray().astype(float) - 128
    assert abs(d.mean()) <= 1.5 and 17 <= d.std() <= 23


# --- Poisson -----------------------------------------------------------------

def test_poisson_constant_source():
    t = gray(np.full((8, 8), 10))
    s = gray(np.full((8, 8), 99))
    bits = np.zeros((8, 8), bool)
    bits[2:6, 2:6] = True
    out = poisson_blend(t, s, DefectMask(bits))
    assert (out.image.gray() == 10).all()


def test_poisson_single_pixel_hand_case():
    t = np.full((3, 3), 10)
    s = np.full((3, 3), 4)
    s[1, 1] = 5
    bits = np.zeros((3, 3), bool)
    bits[1, 1] = True
    res = poisson_solve(gray(t), gray(s), DefectMask(bits))
    assert res.solution[1, 1, 0] == pytest.approx(11.0, abs=1e-3)
    assert res.sample.image.gray()[1, 1] == 11


def test_poisson_random_16_residual_and_monotone():
    r = np.random.default_rng(3)
    t, s = r.integers(0, 256, (16, 16)), r.integers(0, 256, (16, 16))
    bits = np.zeros((16, 16), bool)
    bits[3:13, 2:14] = r.random((10, 12)) < 0.8
    res = poisson_solve(gray(t), gray(s), DefectMask(bits), tol=1e-3)
    assert res.residual <= 1e-3
    f = res.solution[..., 0]
    guide = np.zeros_like(f)
    sf = s.astype(float)
    guide[1:-1, 1:-1] = 4 * sf[1:-1, 1:-1] - sf[:-2, 1:-1] - sf[2:, 1:-1] - sf[1:-1, :-2] - sf[1:-1, 2:]
    assert np.abs(laplacian_residual(f, guide, bits)).max() <= 1e-3
    hist = np.array(res.history)
    assert (np.diff(hist) <= 1e-12).all()
    assert (res.sample.image.gray()[~bits] == t[~bits]).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10**6))
def test_poisson_matches_dense_solve(h, w, seed):
    r = np.random.default_rng(seed)
    t, s = r.integers(0, 256, (h + 2, w + 2)), r.integers(0, 256, (h + 2, w + 2))
    bits = np.zeros((h + 2, w + 2), bool)
    bits[1:-1, 1:-1] = True
    res = poisson_solve(gray(t), gray(s), DefectMask(bits), tol=1e-6)
    ref = dense_poisson(t, s, bits)
    assert np.abs(res.solution[..., 0] - ref)[bits].max() <= 0.5


def test_poisson_errors():
    img = gray(np.zeros((6, 6)))
    bits = np.zeros((6, 6), bool)
    bits[0, 3] = True
    with pytest.raises(MaskTouchesBorder):
        poisson_blend(img, img, DefectMask(bits))
    r = np.random.default_rng(0)
    bits = np.zeros((20, 20), bool)
    bits[2:18, 2:18] = True
    with pytest.raises(DidNotConverge) as e:
        poisson_blend(gray(r.integers(0, 256, (20, 20))), gray(r.integers(0, 256, (20, 20))),
                      DefectMask(bits), tol=1e-9, max_iters=3)
    assert e.value.residual > 1e-9 and e.value.sample is not None


# --- invariants across engines ----------------------------------------------

ENGINES = ["perlin", "cutpaste", "gaussian", "poisson"]


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(ENGINES), st.integers(0, 2**40))
def test_mask_locality_and_determinism(engine, seed):
    r = np.random.default_rng(seed % 1000)
    normal = gray(r.integers(0, 256, (64, 64)))
    tex = gray(r.integers(0, 256, (64, 64)))
    cfg = RuleConfig(perlin=PerlinParams(threshold=0.2))
    a = synthesize(engine, normal, seed, cfg, texture=tex, donor=tex)
    b = synthesize(engine, normal, seed, cfg, texture=tex, donor=tex)
    assert a.image == b.image and a.mask == b.mask
    assert (a.image.gray()[~a.mask.bits] == normal.gray()[~a.mask.bits]).all()
    assert a.provenance == f"rule:{engine}" and not a.mask.is_empty()


def test_config_round_trip():
    cfg = RuleConfig(perlin=PerlinParams(threshold=0.2), weights={"perlin": 1.0, "cutpaste": 0.0, "gaussian": 2.0, "poisson": 0.0})
    assert RuleConfig.from_dict(cfg.to_dict()) == cfg


def test_provenance_tag_tracks_params():
    normal = gray(np.full((8, 8), 1))
    m = DefectMask(np.ones((8, 8), bool))
    a = perlin_texture_blend(normal, normal, m, 0.3)
    b = perlin_texture_blend(normal, normal, m, 0.4)
    assert a.tag != b.tag and a.tag.startswith("rule:perlin#")
