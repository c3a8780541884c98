"""Rule-based defect synthesis: Perlin texture blending, cut-paste,
Gaussian corruption and Poisson (gradient-domain) blending.

Every engine leaves pixels outside its mask byte-identical to the input
normal image and clamps/rounds exactly once, at the end.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (DidNotConverge, DimensionMismatch, DimensionTooSmall, EmptyMask,
                     MaskTouchesBorder, PatchDoesNotFit)
from .imgcore import DefectMask, ImageBuffer, substream

PROVENANCES = ("rule:perlin", "rule:cutpaste", "rule:gaussian", "rule:poisson")
MAX_MASK_REDRAWS = 8


def params_hash(params):
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class SyntheticSample:
    image: ImageBuffer
    mask: DefectMask
    provenance: str
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def param_hash(self):
        return params_hash(self.params)

    @property
    def tag(self):
        return f"{self.provenance}#{self.param_hash}"


def _round_clamp(values):
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


# --- Perlin noise ------------------------------------------------------------

@dataclass(frozen=True)
class PerlinParams:
    cell_size: int = 16
    octaves: int = 3
    persistence: float = 0.5
    threshold: float = 0.4
    beta: float | None = None
    beta_range: tuple = (0.2, 0.8)

    def __post_init__(self):
        if self.cell_size < 2:
            raise ValueError("cell_size must be >= 2")
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not 0 < self.persistence <= 1:
            raise ValueError("persistence must lie in (0, 1]")
        if not -1 < self.threshold < 1:
            raise ValueError("threshold must lie in (-1, 1)")
        if self.beta is not None and not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")

    @property
    def amplitude_sum(self):
        return sum(self.persistence ** k for k in range(self.octaves))


@dataclass(frozen=True)
class ScalarField:
    values: np.ndarray

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def perlin_fade(t):
    assert 0.0 <= t <= 1.0, f"fade input {t} outside [0, 1]"
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _noise(x, y, gradients):
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    def dot(ix, iy, dx, dy):
        g = gradients[iy, ix]
        return g[..., 0] * dx + g[..., 1] * dy

    n00 = dot(x0, y0, fx, fy)
    n10 = dot(x0 + 1, y0, fx - 1.0, fy)
    n01 = dot(x0, y0 + 1, fx, fy - 1.0)
    n11 = dot(x0 + 1, y0 + 1, fx - 1.0, fy - 1.0)
    u = _fade(fx)
    v = _fade(fy)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return nx0 + v * (nx1 - nx0)


def perlin_noise_2d(x, y, gradients):
    """Gradient noise at ``(x, y)``.

    ``gradients[iy, ix]`` holds the unit gradient of lattice point ``(ix, iy)``.
    """
    return float(_noise(np.float64(x), np.float64(y), np.asarray(gradients, dtype=np.float64)))


def random_gradients(rng, rows, cols):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(rows, cols))
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def fractal_perlin(width, height, p, rng):
    if width < p.cell_size or height < p.cell_size:
        raise DimensionTooSmall(
            f"{width}x{height} field is smaller than cell_size {p.cell_size}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    total = np.zeros((height, width))
    for k in range(p.octaves):
        freq = (2.0 ** k) / p.cell_size
        cols = int(math.floor(width * freq)) + 2
        rows = int(math.floor(height * freq)) + 2
        grads = random_gradients(rng, rows, cols)
        total += (p.persistence ** k) * _noise(xs * freq, ys * freq, grads)
    return ScalarField(total / p.amplitude_sum)


def threshold_mask(field, threshold):
    return DefectMask(field.values > threshold)


def perlin_mask(shape, p, seed, min_area=1, clear_border=0):
    """Thresholded fractal mask, redrawn on fresh substreams while too small."""
    height, width = shape
    for attempt in range(MAX_MASK_REDRAWS):
        rng = substream(seed, "perlin-mask", attempt)
        mask = threshold_mask(fractal_perlin(width, height, p, rng), p.threshold)
        if clear_border:
            bits = mask.bits.copy()
            b = clear_border
            bits[:b, :] = bits[-b:, :] = False
            bits[:, :b] = bits[:, -b:] = False
            mask = DefectMask(bits)
        if mask.area >= min_area:
            return mask
    raise EmptyMask(f"no usable Perlin mask after {MAX_MASK_REDRAWS} draws (seed {seed})")


# --- engines -----------------------------------------------------------------

def _match_channels(img, channels):
    if img.channels == channels:
        return img.float()
    if img.channels == 1:
        return np.repeat(img.float(), channels, axis=2)
    raise DimensionMismatch(f"cannot use a {img.channels}-channel image with a {channels}-channel one")


def perlin_texture_blend(normal, texture, mask, beta, seed=0):
    if texture.shape != normal.shape:
        raise DimensionMismatch(f"texture {texture.shape} vs normal {normal.shape}")
    mask.check_matches(normal)
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    base = normal.float()
    tex = _match_channels(texture, normal.channels)
    out = normal.pixels.copy()
    blended = _round_clamp(beta * tex + (1.0 - beta) * base)
    out[mask.bits] = blended[mask.bits]
    return SyntheticSample(ImageBuffer(out), mask, "rule:perlin", seed, {"beta": round(float(beta), 6)})


def cut_paste(normal, rng, patch_frac, donor=None, seed=0):
    """Copy a random rectangle (from ``donor``, default ``normal``) onto ``normal``."""
    if not 0 < patch_frac <= 0.5:
        raise ValueError("patch_frac must lie in (0, 0.5]")
    donor = normal if donor is None else donor
    if donor.shape != normal.shape or donor.channels != normal.channels:
        raise DimensionMismatch("donor and normal must share dimensions")
    h, w = normal.shape
    max_w = int(math.floor(w * patch_frac))
    max_h = int(math.floor(h * patch_frac))
    if max_w < 1 or max_h < 1:
        raise PatchDoesNotFit(f"{w}x{h} image too small for patch_frac {patch_frac}")
    pw = int(rng.integers(max(1, max_w // 2), max_w + 1))
    ph = int(rng.integers(max(1, max_h // 2), max_h + 1))
    if pw > w or ph > h:
        raise PatchDoesNotFit(f"{pw}x{ph} patch in {w}x{h} image")
    sx = int(rng.integers(0, w - pw + 1))
    sy = int(rng.integers(0, h - ph + 1))
    dx = int(rng.integers(0, w - pw + 1))
    dy = int(rng.integers(0, h - ph + 1))
    out = normal.pixels.copy()
    out[dy:dy + ph, dx:dx + pw] = donor.pixels[sy:sy + ph, sx:sx + pw]
    bits = np.zeros((h, w), dtype=bool)
    bits[dy:dy + ph, dx:dx + pw] = True
    params = {"src": [sx, sy], "dst": [dx, dy], "size": [pw, ph], "patch_frac": patch_frac}
    return SyntheticSample(ImageBuffer(out), DefectMask(bits), "rule:cutpaste", seed, params)


def gaussian_corrupt(normal, mask, sigma, rng, seed=0):
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    mask.check_matches(normal)
    noise = rng.normal(0.0, 1.0, size=normal.pixels.shape) * sigma
    out = normal.pixels.copy()
    noisy = _round_clamp(normal.float() + noise)
    out[mask.bits] = noisy[mask.bits]
    return SyntheticSample(ImageBuffer(out), mask, "rule:gaussian", seed,
                           {"sigma": round(float(sigma), 6)})


# --- Poisson blending --------------------------------------------------------

def laplacian_residual(f, guide, inside):
    """``b - A f`` on masked pixels for the 5-point system ``4 f_p - sum f_q = 4 s_p - sum s_q``.

    ``f`` already holds the Dirichlet values outside ``inside``.
    """
    lap_f = 4.0 * f[1:-1, 1:-1] - f[:-2, 1:-1] - f[2:, 1:-1] - f[1:-1, :-2] - f[1:-1, 2:]
    r = np.zeros_like(f)
    r[1:-1, 1:-1] = guide[1:-1, 1:-1] - lap_f
    r[~inside] = 0.0
    return r


def _guidance(s):
    g = np.zeros_like(s)
    g[1:-1, 1:-1] = 4.0 * s[1:-1, 1:-1] - s[:-2, 1:-1] - s[2:, 1:-1] - s[1:-1, :-2] - s[1:-1, 2:]
    return g


def _gauss_seidel_channel(t, s, inside, tol, max_iters):
    """Red-black Gauss-Seidel on one channel (arrays cropped to the mask bbox + 1)."""
    f = t.copy()
    guide = _guidance(s)
    yy, xx = np.indices(f.shape)
    colors = [inside & ((yy + xx) % 2 == c) for c in (0, 1)]
    resid = float(np.abs(laplacian_residual(f, guide, inside)).max())
    history = [resid]
    iters = 0
    while resid > tol and iters < max_iters:
        for sel in colors:
            nb = np.zeros_like(f)
            nb[1:-1, 1:-1] = f[:-2, 1:-1] + f[2:, 1:-1] + f[1:-1, :-2] + f[1:-1, 2:]
            f[sel] = (guide[sel] + nb[sel]) / 4.0
        iters += 1
        resid = float(np.abs(laplacian_residual(f, guide, inside)).max())
        history.append(resid)
    return f, history


@dataclass
class PoissonResult:
    sample: SyntheticSample
    residual: float
    iterations: int
    history: list = field(default_factory=list)
    solution: np.ndarray | None = None


def poisson_solve(target, source, mask, tol=1e-3, max_iters=None):
    """Solve the blend and return a :class:`PoissonResult` (never raises on non-convergence)."""
    if target.shape != source.shape or mask.shape != target.shape:
        raise DimensionMismatch("target, source and mask must share dimensions")
    if mask.is_empty():
        raise EmptyMask("Poisson blending needs a non-empty mask")
    b = mask.bits
    if b[0, :].any() or b[-1, :].any() or b[:, 0].any() or b[:, -1].any():
        raise MaskTouchesBorder("mask must lie strictly inside the image")
    if max_iters is None:
        max_iters = 10 * mask.area
    ys, xs = np.nonzero(b)
    y0, y1 = ys.min() - 1, ys.max() + 2
    x0, x1 = xs.min() - 1, xs.max() + 2
    inside = b[y0:y1, x0:x1]
    tgt = target.float()
    src = _match_channels(source, target.channels)
    solved = tgt.copy()
    worst = 0.0
    iters = 0
    history = None
    for c in range(target.channels):
        f, hist = _gauss_seidel_channel(tgt[y0:y1, x0:x1, c], src[y0:y1, x0:x1, c],
                                        inside, tol, max_iters)
        solved[y0:y1, x0:x1, c] = f
        worst = max(worst, hist[-1])
        iters = max(iters, len(hist) - 1)
        if history is None:
            history = hist
    out = target.pixels.copy()
    out[b] = _round_clamp(solved)[b]
    sample = SyntheticSample(ImageBuffer(out), mask, "rule:poisson", 0, {"tol": tol})
    return PoissonResult(sample, worst, iters, history, solved)


def poisson_blend(target, source, mask, tol=1e-3, max_iters=None, seed=0):
    res = poisson_solve(target, source, mask, tol, max_iters)
    sample = SyntheticSample(res.sample.image, mask, "rule:poisson", seed, {"tol": tol})
    if res.residual > tol:
        raise DidNotConverge(
            f"max residual {res.residual:.3g} > tol {tol} after {res.iterations} sweeps",
            sample=sample, residual=res.residual)
    return sample


# --- seeded sample drivers used by dataset generation ------------------------

@dataclass(frozen=True)
class RuleConfig:
    perlin: PerlinParams = field(default_factory=PerlinParams)
    weights: dict = field(default_factory=lambda: {
        "perlin": 1.0, "cutpaste": 0.0, "gaussian": 0.0, "poisson": 0.0})
    patch_frac: float = 0.25
    sigma_range: tuple = (15.0, 40.0)
    poisson_tol: float = 1e-3

    def to_dict(self):
        d = asdict(self)
        d["perlin"]["beta_range"] = list(self.perlin.beta_range)
        d["sigma_range"] = list(self.sigma_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        perlin = dict(d.pop("perlin", {}) or {})
        if "beta_range" in perlin:
            perlin["beta_range"] = tuple(perlin["beta_range"])
        if "sigma_range" in d:
            d["sigma_range"] = tuple(d["sigma_range"])
        if "weights" in d:
            w = {"perlin": 0.0, "cutpaste": 0.0, "gaussian": 0.0, "poisson": 0.0}
            w.update(d["weights"])
            d["weights"] = w
        return cls(perlin=PerlinParams(**perlin), **d)


def pick_engine(weights, rng):
    names = sorted(k for k, v in weights.items() if v > 0)
    if not names:
        raise ValueError("at least one engine needs a positive weight")
    p = np.array([weights[k] for k in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=p / p.sum()))]


def synthesize(engine, normal, seed, cfg, texture=None, donor=None):
    """Produce one sample with ``engine``; all randomness derives from ``seed``."""
    rng = substream(seed, "engine", engine)
    p = cfg.perlin
    if engine == "perlin":
        if texture is None:
            raise ValueError("perlin engine needs a texture")
        mask = perlin_mask(normal.shape, p, seed)
        beta = p.beta if p.beta is not None else float(rng.uniform(*p.beta_range))
        s = perlin_texture_blend(normal, texture, mask, beta, seed)
    elif engine == "cutpaste":
        s = cut_paste(normal, rng, cfg.patch_frac, donor=donor, seed=seed)
    elif engine == "gaussian":
        mask = perlin_mask(normal.shape, p, seed)
        sigma = float(rng.uniform(*cfg.sigma_range))
        s = gaussian_corrupt(normal, mask, sigma, rng, seed)
    elif engine == "poisson":
        src = texture if texture is not None else donor
        if src is None:
            raise ValueError("poisson engine needs a texture or donor image")
        mask = perlin_mask(normal.shape, p, seed, clear_border=1)
        try:
            s = poisson_blend(normal, src, mask, tol=cfg.poisson_tol, seed=seed)
        except DidNotConverge as exc:
            # keep the best iterate; the residual stays on record in the params
            s = exc.sample
            s = SyntheticSample(s.image, s.mask, s.provenance, s.seed,
                                {**s.params, "residual": round(float(exc.residual), 6)})
    else:
        raise ValueError(f"unknown engine {engine!r}")
    params = dict(s.params, engine=engine)
    return SyntheticSample(s.image, s.mask, s.provenance, seed, params)
