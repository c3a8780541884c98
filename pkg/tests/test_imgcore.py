import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from defectforge.errors import CorruptHeader, IoFailure, NotFound, UnsupportedFormat
from defectforge.imgcore import (DefectMask, ImageBuffer, derive_seed, load_image, save_image,
                                 substream, to_grayscale)


def test_load_hand_built_2x2(tmp_path):
    from PIL import Image
    p = tmp_path / "g.png"
    Image.fromarray(np.array([[0, 85], [170, 255]], dtype=np.uint8), mode="L").save(p)
    img = load_image(p)
    assert (img.width, img.height, img.channels) == (2, 2, 1)
    assert img.data.tolist() == [0, 85, 170, 255]


def test_from_flat_length_checked():
    assert ImageBuffer.from_flat(2, 1, 3, [255, 0, 0, 0, 0, 255]).pixels[0, 1].tolist() == [0, 0, 255]
    with pytest.raises(ValueError):
        ImageBuffer.from_flat(2, 2, 1, [1, 2, 3])


def test_save_examples(tmp_path):
    black = ImageBuffer.from_flat(1, 1, 1, [0])
    save_image(black, tmp_path / "b.png")
    assert load_image(tmp_path / "b.png") == black
    rb = ImageBuffer.from_flat(2, 1, 3, [255, 0, 0, 0, 0, 255])
    save_image(rb, tmp_path / "rb.png")
    assert load_image(tmp_path / "rb.png").data.tolist() == [255, 0, 0, 0, 0, 255]


def test_rgb_round_trip(tmp_path, rng):
    img = ImageBuffer(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
    save_image(img, tmp_path / "x.png")
    assert load_image(tmp_path / "x.png") == img


def test_errors_carry_path(tmp_path, rng):
    with pytest.raises(NotFound) as e:
        load_image(tmp_path / "missing.png")
    assert "missing.png" in e.value.path
    (tmp_path / "x.gif").write_bytes(b"GIF89a")
    with pytest.raises(UnsupportedFormat):
        load_image(tmp_path / "x.gif")
    blob = ImageBuffer(rng.integers(0, 256, (16, 16, 1), dtype=np.uint8)).to_png_bytes()
    (tmp_path / "t.png").write_bytes(blob[:40])
    with pytest.raises(CorruptHeader) as e:
        load_image(tmp_path / "t.png")
    assert e.value.path.endswith("t.png")
    with pytest.raises(IoFailure):
        save_image(ImageBuffer.from_flat(1, 1, 1, [0]), tmp_path / "nope" / "x.png")


def test_pgm_supported(tmp_path):
    from PIL import Image
    Image.fromarray(np.array([[1, 2, 3]], dtype=np.uint8)).save(tmp_path / "a.pgm")
    assert load_image(tmp_path / "a.pgm").data.tolist() == [1, 2, 3]


def test_grayscale_examples():
    white = ImageBuffer.from_flat(1, 1, 3, [255, 255, 255])
    red = ImageBuffer.from_flat(1, 1, 3, [255, 0, 0])
    assert to_grayscale(white).data.tolist() == [255]
    assert to_grayscale(red).data.tolist() == [76]
    g = ImageBuffer.from_flat(2, 1, 1, [3, 9])
    assert to_grayscale(g) is g


def test_buffers_immutable(rng):
    img = ImageBuffer(rng.integers(0, 256, (4, 4, 1), dtype=np.uint8))
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1


def test_mask_helpers():
    m = DefectMask.empty(3, 4)
    assert m.is_empty() and m.area == 0
    bits = np.zeros((3, 4), bool)
    bits[1, 2] = True
    m = DefectMask(bits)
    assert DefectMask.from_image(m.to_image()) == m


image_arrays = st.integers(1, 3).flatmap(lambda c: arrays(
    np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(1 if c < 3 else 3))))


@settings(max_examples=60, deadline=None)
@given(image_arrays)
def test_png_round_trip_property(pixels):
    img = ImageBuffer(pixels)
    assert ImageBuffer.from_png_bytes(img.to_png_bytes()) == img


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 8), st.just(3))))
def test_grayscale_idempotent(pixels):
    g = to_grayscale(ImageBuffer(pixels))
    assert to_grayscale(g) == g
    r, gg, b = (pixels[..., i].astype(np.float64) for i in range(3))
    assert np.array_equal(g.gray(), np.floor(0.299 * r + 0.587 * gg + 0.114 * b + 0.5))


def test_substreams_distinct_over_10k_ids():
    seen = set()
    for i in range(10_000):
        draws = substream(7, "item", i).integers(0, 2**63, size=64)
        seen.add(draws.tobytes())
    assert len(seen) == 10_000


def test_substream_keys_are_not_padded():
    a = substream(1).integers(0, 2**63, size=4)
    b = substream(1, 0).integers(0, 2**63, size=4)
    assert not np.array_equal(a, b)
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert 0 <= derive_seed(5, "x") < 2**63
