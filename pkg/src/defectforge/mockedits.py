"""Deterministic image edits used by the mock generation service and the toy
benchmark: a smooth elliptical intensity bump ("desired" defect) and a block
permutation ("irrelevant" candidate)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .imgcore import ImageBuffer, substream

AREA_RANGE = (0.06, 0.18)
AMPLITUDE_RANGE = (70.0, 110.0)


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float

    def radius2(self, shape):
        """Normalized squared radius; < 1 strictly inside the ellipse."""
        ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
        dx, dy = xs - self.cx, ys - self.cy
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (c * dx + s * dy) / self.a
        v = (-s * dx + c * dy) / self.b
        return u * u + v * v

    def region(self, shape):
        return self.radius2(shape) < 1.0

    def to_dict(self):
        return asdict(self)


def draw_ellipse(shape, rng, area_frac):
    h, w = shape
    area = area_frac * h * w
    aspect = float(rng.uniform(0.6, 1.0))
    a = math.sqrt(area / (math.pi * aspect))
    b = a * aspect
    angle = float(rng.uniform(0.0, math.pi))
    # keep the edit over the central part of the frame, where the objects are
    cx = float(rng.uniform(0.3 * w, 0.7 * w))
    cy = float(rng.uniform(0.3 * h, 0.7 * h))
    return Ellipse(cx, cy, a, b, angle)


def local_edit(img, seed, area_frac=None, amplitude=None):
    """Add a smooth bump ``amp * (1 - r^2)^2`` inside a seeded ellipse.

    Returns ``(candidate, ellipse, amplitude)``; pixels with ``r >= 1`` are untouched.
    A zero ``area_frac`` returns the input with no ellipse.
    """
    rng = substream(seed, "local-edit")
    if area_frac is None:
        area_frac = float(rng.uniform(*AREA_RANGE))
    else:
        rng.uniform()  # keep the stream aligned with the unforced path
    if area_frac <= 0:
        return img, None, 0.0
    ell = draw_ellipse(img.shape, rng, area_frac)
    if amplitude is None:
        mag = float(rng.uniform(*AMPLITUDE_RANGE))
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        amplitude = sign * mag
    r2 = ell.radius2(img.shape)
    bump = np.where(r2 < 1.0, amplitude * (1.0 - np.minimum(r2, 1.0)) ** 2, 0.0)
    vals = img.float() + bump[:, :, None]
    out = img.pixels.copy()
    inside = r2 < 1.0
    out[inside] = np.clip(np.floor(vals + 0.5), 0, 255).astype(np.uint8)[inside]
    return ImageBuffer(out), ell, amplitude


def scramble(img, seed, block=8):
    """Permute ``block``-sized tiles with a derangement (no tile stays put)."""
    rng = substream(seed, "scramble")
    h, w = img.shape
    by, bx = h // block, w // block
    n = by * bx
    if n < 2:
        raise ValueError("image too small to scramble")
    perm = rng.permutation(n)
    while np.any(perm == np.arange(n)):
        fixed = np.nonzero(perm == np.arange(n))[0]
        for i in fixed:
            j = int(rng.integers(0, n))
            perm[i], perm[j] = perm[j], perm[i]
    out = img.pixels.copy()
    src = img.pixels
    for dst_idx, src_idx in enumerate(perm):
        dy, dx = divmod(dst_idx, bx)
        sy, sx = divmod(int(src_idx), bx)
        tile = src[sy * block:(sy + 1) * block, sx * block:(sx + 1) * block]
        out[dy * block:(dy + 1) * block, dx * block:(dx + 1) * block] = np.rot90(tile, k=int(rng.integers(0, 4)))
    return ImageBuffer(out)
