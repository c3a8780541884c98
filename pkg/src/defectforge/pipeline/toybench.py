"""Procedural 64x64 grayscale "products" standing in for a real inspection set."""
from __future__ import annotations

import math

import numpy as np

from ..imgcore import ImageBuffer, substream

SIZE = 64
SUPERSAMPLE = 4
KINDS = ("disk", "plate", "bars")


def _grid(size, ss, cx, cy, angle):
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(angle), math.sin(angle)
    return c * dx + s * dy, -s * dx + c * dy


def _downsample(hi, ss):
    n = hi.shape[0] // ss
    return hi.reshape(n, ss, n, ss).mean(axis=(1, 3))


def _checker(u, v, cell, cells):
    """Boolean checker of ``cells`` x ``cells`` squares centred on the origin."""
    half = cell * cells / 2.0
    inside = (np.abs(u) < half) & (np.abs(v) < half)
    parity = (np.floor((u + half) / cell) + np.floor((v + half) / cell)) % 2 == 0
    return inside, inside & parity


def _disk(u, v, rng, fg, bg):
    r = np.hypot(u, v)
    rad = rng.uniform(27.0, 29.0)
    img = np.full(u.shape, bg)
    img = np.where(r < rad, fg, img)
    ring_in = rng.uniform(23.0, 24.0)
    ring = (r > ring_in) & (r < ring_in + rng.uniform(1.5, 2.5))
    img = np.where(ring, bg + 0.5 * (fg - bg), img)
    # checkered hub: its junctions are the part's keypoints
    _, dark = _checker(u, v, rng.uniform(8.0, 9.0), 5)
    return np.where(dark & (r < ring_in), bg + 0.3 * (fg - bg), img)


def _plate(u, v, rng, fg, bg):
    inside = (np.abs(u) < rng.uniform(23.0, 26.0)) & (np.abs(v) < rng.uniform(21.0, 24.0))
    img = np.where(inside, fg, bg)
    # staggered brick inlay
    pitch = rng.uniform(8.0, 9.0)
    row = np.floor(v / pitch)
    col = np.floor((u + (row % 2) * pitch / 2) / pitch)
    dark = inside & ((col + row) % 2 == 0)
    return np.where(dark, bg + 0.3 * (fg - bg), img)


def _bars(u, v, rng, fg, bg):
    img = np.full(u.shape, bg)
    pitch = rng.uniform(9.0, 10.0)
    for j in range(-2, 3):
        off = (j % 2) * pitch / 2
        for i in range(-3, 3):
            cx, cy = i * pitch + off, j * pitch
            val = fg if (i + j) % 2 == 0 else bg + 0.6 * (fg - bg)
            img = np.where((np.abs(u - cx) < 2.0) & (np.abs(v - cy) < 1.75), val, img)
    return img


_RENDER = {"disk": _disk, "plate": _plate, "bars": _bars}


def render_product(kind, seed, size=SIZE, noise_sigma=2.0):
    """Render one jittered product; identical ``(kind, seed)`` gives identical pixels."""
    rng = substream(seed, "product", kind)
    cx = size / 2 + rng.uniform(-3.0, 3.0)
    cy = size / 2 + rng.uniform(-3.0, 3.0)
    angle = rng.uniform(-0.25, 0.25)
    bg = rng.uniform(75.0, 85.0)
    fg = rng.uniform(125.0, 135.0)
    u, v = _grid(size, SUPERSAMPLE, cx, cy, angle)
    hi = _RENDER[kind](u, v, rng, fg, bg)
    img = _downsample(hi, SUPERSAMPLE)
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return ImageBuffer(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))


def render_texture(kind, seed, size=SIZE):
    """Procedural texture (stripes, checker, speckle) used by the Perlin blend engine."""
    rng = substream(seed, "texture", kind)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    lo, hi = sorted(rng.uniform(0.0, 255.0, size=2))
    if kind == "stripes":
        angle = rng.uniform(0, math.pi)
        period = rng.uniform(3.0, 9.0)
        t = np.cos(angle) * xs + np.sin(angle) * ys
        val = 0.5 + 0.5 * np.sin(2 * math.pi * t / period)
    elif kind == "checker":
        cell = int(rng.integers(2, 7))
        val = ((xs // cell + ys // cell) % 2).astype(np.float64)
    elif kind == "speckle":
        val = rng.uniform(0.0, 1.0, size=(size, size))
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return ImageBuffer(np.clip(np.floor(lo + (hi - lo) * val + 0.5), 0, 255).astype(np.uint8))


TEXTURE_KINDS = ("stripes", "checker", "speckle")
