"""Structural-consistency gate: Harris keypoints, binary point-pair
descriptors, mutual-nearest-neighbour matching and the three-way decision."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateImage, DimensionMismatch, ImageTooSmall
from .imgcore import substream, to_grayscale

log = logging.getLogger(__name__)

NO_ANOMALY = "NoAnomaly"
DESIRED = "Desired"
IRRELEVANT = "Irrelevant"

PATCH = 31
DESCRIPTOR_BITS = 256


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    response: float


@dataclass(frozen=True)
class HarrisParams:
    k: float = 0.04
    window: int = 7
    sigma: float = 1.5
    nms_radius: int = 5
    max_kp: int = 512
    threshold: float = 1e-4
    border: int | None = None


@dataclass(frozen=True)
class MatchParams:
    ratio: float = 0.8
    max_dist: int = 64


@dataclass(frozen=True)
class FilterParams:
    tau_low: float = 0.05
    tau_high: float = 0.90
    min_keypoints: int = 8
    harris: HarrisParams = field(default_factory=lambda: HarrisParams(border=PATCH // 2))
    match: MatchParams = field(default_factory=MatchParams)
    pattern_seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        harris = d.pop("harris", None)
        match = d.pop("match", None)
        kw = {}
        if harris is not None:
            kw["harris"] = HarrisParams(**{"border": PATCH // 2, **harris})
        if match is not None:
            kw["match"] = MatchParams(**match)
        return cls(**d, **kw)

    def to_dict(self):
        return asdict(self)


def harris_response(gray, k=0.04, sigma=1.5, window=7):
    """Harris measure ``det(M) - k trace(M)^2`` on a float image in [0, 1]."""
    ix = ndimage.sobel(gray, axis=1, mode="nearest")
    iy = ndimage.sobel(gray, axis=0, mode="nearest")
    truncate = (window // 2) / sigma
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest", truncate=truncate)
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest", truncate=truncate)
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest", truncate=truncate)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _subpixel(r, y, x):
    def offset(lo, mid, hi):
        denom = lo - 2.0 * mid + hi
        if denom >= 0:
            return 0.0
        return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))

    h, w = r.shape
    dx = offset(r[y, x - 1], r[y, x], r[y, x + 1]) if 0 < x < w - 1 else 0.0
    dy = offset(r[y - 1, x], r[y, x], r[y + 1, x]) if 0 < y < h - 1 else 0.0
    return min(max(x + dx, 0.0), w - 1e-6), min(max(y + dy, 0.0), h - 1e-6)


def detect_keypoints(gray, params=None):
    params = params or HarrisParams()
    if gray.channels != 1:
        gray = to_grayscale(gray)
    h, w = gray.shape
    if h < params.window or w < params.window:
        raise ImageTooSmall(f"{w}x{h} image is smaller than the {params.window}px window")
    img = gray.gray().astype(np.float64) / 255.0
    r = harris_response(img, params.k, params.sigma, params.window)
    size = 2 * params.nms_radius + 1
    peaks = (r == ndimage.maximum_filter(r, size=size, mode="constant", cval=-np.inf))
    peaks &= r > params.threshold
    border = params.window // 2 if params.border is None else params.border
    if border > 0:
        peaks[:border, :] = peaks[h - border:, :] = False
        peaks[:, :border] = peaks[:, w - border:] = False
    ys, xs = np.nonzero(peaks)
    order = np.lexsort((xs, ys, -r[ys, xs]))[:params.max_kp]
    kps = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        sx, sy = _subpixel(r, y, x)
        kps.append(Keypoint(sx, sy, float(r[y, x])))
    return kps


@dataclass(frozen=True)
class SamplingPattern:
    """Seeded point pairs ``(p_i, q_i)`` as ``(dy, dx)`` offsets inside the patch."""

    p: np.ndarray
    q: np.ndarray

    @classmethod
    def create(cls, seed=0, bits=DESCRIPTOR_BITS, patch=PATCH):
        rng = substream(seed, "brief-pattern")
        half = patch // 2
        pts = np.clip(np.rint(rng.normal(0.0, patch / 5.0, size=(2, bits, 2))), -half, half)
        pts = pts.astype(np.int64)
        pts.setflags(write=False)
        return cls(pts[0], pts[1])

    @property
    def half(self):
        return int(max(np.abs(self.p).max(), np.abs(self.q).max(), PATCH // 2))


@dataclass
class DescriptorSet:
    bits: np.ndarray          # (n, 256) bool
    keypoints: list
    dropped: int = 0

    def __len__(self):
        return len(self.keypoints)

    @property
    def packed(self):
        return np.packbits(self.bits, axis=1)


def compute_descriptors(gray, kps, pattern=None):
    """Binary tests on a 3x3 box-summed image; keypoints without a full patch are dropped."""
    pattern = pattern or SamplingPattern.create()
    if gray.channels != 1:
        gray = to_grayscale(gray)
    img = gray.gray().astype(np.int64)
    smooth = ndimage.correlate(img, np.ones((3, 3), dtype=np.int64), mode="nearest")
    h, w = img.shape
    half = PATCH // 2
    kept, rows = [], []
    for kp in kps:
        cx, cy = int(round(kp.x)), int(round(kp.y))
        if cx < half or cy < half or cx > w - 1 - half or cy > h - 1 - half:
            continue
        a = smooth[cy + pattern.p[:, 0], cx + pattern.p[:, 1]]
        b = smooth[cy + pattern.q[:, 0], cx + pattern.q[:, 1]]
        rows.append(a < b)
        kept.append(kp)
    dropped = len(kps) - len(kept)
    if dropped:
        log.debug("dropped %d boundary keypoint(s) without a full %dpx patch", dropped, PATCH)
    bits = np.array(rows, dtype=bool).reshape(len(rows), pattern.p.shape[0])
    return DescriptorSet(bits, kept, dropped)


def _as_bits(d):
    return d.bits if isinstance(d, DescriptorSet) else np.asarray(d, dtype=bool)


def hamming_matrix(a, b):
    a, b = _as_bits(a), _as_bits(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int64)
    # count differing bits via (a != b) = a + b - 2ab on 0/1 integers
    ai = a.astype(np.int64)
    bi = b.astype(np.int64)
    return ai.sum(1)[:, None] + bi.sum(1)[None, :] - 2 * ai @ bi.T


def _ratio_ok(dist, params):
    if dist.shape[1] == 0:
        return np.zeros(dist.shape[0], dtype=bool)
    if dist.shape[1] == 1:
        return np.ones(dist.shape[0], dtype=bool)
    two = np.sort(dist, axis=1)[:, :2]
    d1, d2 = two[:, 0], two[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d2 > 0, d1 / np.where(d2 > 0, d2, 1) < params.ratio, False)


def match_descriptors(a, b, params=None):
    """Mutual nearest neighbours with a symmetric ratio test and a distance cap."""
    params = params or MatchParams()
    dist = hamming_matrix(a, b)
    if dist.size == 0:
        return []
    nn_ab = dist.argmin(axis=1)
    nn_ba = dist.argmin(axis=0)
    ok_a = _ratio_ok(dist, params)
    ok_b = _ratio_ok(dist.T, params)
    out = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] == i and ok_a[i] and ok_b[j] and dist[i, j] <= params.max_dist:
            out.append((i, int(j)))
    return out


@dataclass(frozen=True)
class FilterReport:
    k_normal: int
    k_candidate: int
    m: int
    ratio: float
    decision: str
    tau_low: float
    tau_high: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def decide(ratio, tau_low, tau_high):
    if ratio > tau_high:
        return NO_ANOMALY
    if ratio <= tau_low:
        return IRRELEVANT
    return DESIRED


class MatchFilter:
    """Holds the immutable sampling pattern so repeated calls share it."""

    def __init__(self, params=None):
        self.params = params or FilterParams()
        self.pattern = SamplingPattern.create(self.params.pattern_seed)

    def describe(self, img):
        gray = to_grayscale(img)
        kps = detect_keypoints(gray, self.params.harris)
        return compute_descriptors(gray, kps, self.pattern)

    def __call__(self, normal, candidate, normal_desc=None):
        if normal.shape != candidate.shape:
            raise DimensionMismatch(f"normal {normal.shape} vs candidate {candidate.shape}")
        p = self.params
        dn = normal_desc if normal_desc is not None else self.describe(normal)
        dc = self.describe(candidate)
        kn, kc = len(dn), len(dc)
        # only the reference can make an input un-gateable; a candidate whose
        # keypoints collapse is scored normally (it almost always lands Irrelevant)
        if kn < p.min_keypoints:
            raise DegenerateImage(
                f"normal image has {kn} keypoints (candidate {kc}); need {p.min_keypoints}")
        m = len(match_descriptors(dn, dc, p.match))
        ratio = m / max(1, min(kn, kc))
        return FilterReport(kn, kc, m, ratio, decide(ratio, p.tau_low, p.tau_high),
                            p.tau_low, p.tau_high)


def filter_decision(normal, candidate, params=None):
    return MatchFilter(params)(normal, candidate)
