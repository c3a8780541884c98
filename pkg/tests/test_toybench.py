import numpy as np
import pytest

from defectforge.imgcore import derive_seed
from defectforge.matchfilter import FilterParams, MatchFilter
from defectforge.mockedits import AREA_RANGE, local_edit, scramble
from defectforge.pipeline.toybench import KINDS, TEXTURE_KINDS, render_product, render_texture


@pytest.mark.parametrize("kind", KINDS)
def test_products_are_deterministic_gray_64(kind):
    a, b = render_product(kind, 3), render_product(kind, 3)
    assert a == b and a.shape == (64, 64) and a.channels == 1
    assert a != render_product(kind, 4)


@pytest.mark.parametrize("kind", TEXTURE_KINDS)
def test_textures(kind):
    t = render_texture(kind, 1)
    assert t.shape == (64, 64) and t == render_texture(kind, 1)


def test_products_are_gateable():
    gate = MatchFilter()
    for i in range(30):
        img = render_product(KINDS[i % 3], derive_seed(1, "gateable", i))
        assert len(gate.describe(img)) >= FilterParams().min_keypoints


def test_local_edit_area_and_locality():
    img = render_product("plate", 2)
    for seed in range(20):
        out, ell, amp = local_edit(img, seed)
        region = ell.region(img.shape)
        assert AREA_RANGE[0] - 0.02 <= region.mean() <= AREA_RANGE[1] + 0.02
        changed = np.any(out.pixels != img.pixels, axis=2)
        assert changed.any() and not (changed & ~region).any()
        assert 70 <= abs(amp) <= 110
    same, ell, amp = local_edit(img, 0, area_frac=0.0)
    assert same == img and ell is None


def test_scramble_is_a_derangement_of_blocks():
    img = render_product("bars", 5)
    s = scramble(img, 1)
    assert s != img and s == scramble(img, 1)
    assert sorted(s.data.tolist()) == sorted(img.data.tolist())
