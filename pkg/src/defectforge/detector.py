"""Patch-wise fully connected autoencoder, momentum-SGD trainer, reconstruction
scoring and AUROC."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionMismatch, IoFailure, NonFiniteLoss, OneClassOnly, PatchTooLarge
from .imgcore import substream, to_grayscale

log = logging.getLogger(__name__)

LEAK = 0.01
MAGIC = b"DFAE"
FORMAT_VERSION = 1
DEFAULT_HIDDEN = (128, 32, 128)


@dataclass
class AutoencoderModel:
    sizes: tuple
    weights: list
    biases: list
    version: str = "ae-v1"
    velocity: list | None = field(default=None, repr=False, compare=False)

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def output_dim(self):
        return self.sizes[-1]

    @property
    def patch_size(self):
        side = int(round(self.input_dim ** 0.5))
        return side if side * side == self.input_dim else None

    def copy(self):
        return AutoencoderModel(tuple(self.sizes), [w.copy() for w in self.weights],
                                [b.copy() for b in self.biases], self.version)

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self):
        return sum(p.size for p in self.parameters())

    def reset_optimizer(self):
        self.velocity = None


def init_model(patch_size=16, hidden=DEFAULT_HIDDEN, seed=0, sizes=None):
    """Glorot-uniform weights, zero biases."""
    if sizes is None:
        d = patch_size * patch_size
        sizes = (d, *hidden, d)
    sizes = tuple(int(s) for s in sizes)
    rng = substream(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return AutoencoderModel(sizes, weights, biases)


def _leaky(z):
    return np.where(z > 0, z, LEAK * z)


def _forward_cache(model, x):
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _leaky(z)
        acts.append(h)
    return acts, pre


def forward(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise DimensionMismatch(f"input has {x.shape[-1]} features, model expects {model.input_dim}")
    return _forward_cache(model, x)[0][-1]


def loss_and_grads(model, inputs, targets):
    """MSE ``mean_n ||f(x_n) - y_n||^2 / d`` and its exact gradients (dW, db per layer)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if x.shape[1] != model.input_dim or y.shape[1] != model.output_dim:
        raise DimensionMismatch("batch width does not match the model")
    acts, pre = _forward_cache(model, x)
    diff = acts[-1] - y
    n, d = diff.shape
    loss = float(np.mean(diff * diff))
    delta = (2.0 / (n * d)) * diff
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i].T
            delta = delta * np.where(pre[i - 1] > 0, 1.0, LEAK)
    return loss, gw, gb


def train_step(model, batch, lr, momentum=0.9):
    """One momentum-SGD step on ``batch = (inputs, targets)``; returns ``(model, pre-update loss)``.

    The model is updated in place; its momentum buffers live on ``model.velocity``.
    """
    inputs, targets = batch
    if len(inputs) == 0:
        raise ValueError("empty batch")
    loss, gw, gb = loss_and_grads(model, inputs, targets)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}")
    if model.velocity is None:
        model.velocity = [np.zeros_like(p) for p in model.parameters()]
    grads = []
    for a, b in zip(gw, gb):
        grads += [a, b]
    for p, v, g in zip(model.parameters(), model.velocity, grads):
        v *= momentum
        v -= lr * g
        p += v
    return model, loss


@dataclass(frozen=True)
class TrainSchedule:
    stage: str = "single"
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    lr_decay: float = 0.9
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune", "single"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def finetune(self, epochs=None, seed=None):
        """Fine-tuning schedule derived from this one: lr / 10 and 20% of the epochs."""
        return TrainSchedule("finetune",
                             max(1, round(0.2 * self.epochs)) if epochs is None else epochs,
                             self.batch_size, self.learning_rate / 10.0, self.lr_decay,
                             self.seed if seed is None else seed, self.momentum)

    def to_dict(self):
        return asdict(self)


def extract_patches(img, patch=16, stride=16):
    """Row-major grid of ``patch`` x ``patch`` windows scaled to [0, 1], shape (n, patch*patch)."""
    if img.channels != 1:
        img = to_grayscale(img)
    h, w = img.shape
    if patch > min(h, w):
        raise PatchTooLarge(f"patch {patch} exceeds image {w}x{h}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    g = img.gray().astype(np.float64) / 255.0
    windows = np.lib.stride_tricks.sliding_window_view(g, (patch, patch))[::stride, ::stride]
    return windows.reshape(-1, patch * patch).copy()


def patch_grid(shape, patch, stride):
    h, w = shape
    return ((h - patch) // stride + 1, (w - patch) // stride + 1)


def pair_arrays(pairs, patch=16, stride=8):
    """Stack ``(corrupted, clean)`` image pairs into aligned patch matrices."""
    xs, ys = [], []
    for corrupted, clean in pairs:
        if corrupted.shape != clean.shape:
            raise DimensionMismatch("corrupted and clean images differ in size")
        xs.append(extract_patches(corrupted, patch, stride))
        ys.append(extract_patches(clean, patch, stride))
    return np.concatenate(xs), np.concatenate(ys)


def train(model, pairs, schedule, patch=16, stride=8):
    """Run ``schedule`` over image pairs; returns ``(model, per-epoch mean loss)``."""
    if not pairs:
        raise ValueError("training set is empty")
    if schedule.epochs == 0:
        return model, []
    x, y = pair_arrays(pairs, patch, stride)
    return train_arrays(model, x, y, schedule)


def train_arrays(model, x, y, schedule):
    model.reset_optimizer()
    n = len(x)
    curve = []
    for epoch in range(schedule.epochs):
        lr = schedule.learning_rate * schedule.lr_decay ** epoch
        order = substream(schedule.seed, "shuffle", schedule.stage, epoch).permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            _, loss = train_step(model, (x[idx], y[idx]), lr, schedule.momentum)
            total += loss
            batches += 1
        curve.append(total / batches)
        log.debug("%s epoch %d/%d loss %.6f", schedule.stage, epoch + 1, schedule.epochs, curve[-1])
    model.reset_optimizer()
    return model, curve


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    label: str
    score: float
    score_map: list

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["sample_id"], d["label"], float(d["score"]), [list(r) for r in d["score_map"]])


def anomaly_score(model, img, sample_id="", label="normal", stride=None):
    patch = model.patch_size
    if patch is None or model.input_dim != model.output_dim:
        raise DimensionMismatch("model is not a square-patch autoencoder")
    if img.channels != 1:
        img = to_grayscale(img)
    if patch > min(img.shape):
        raise DimensionMismatch(f"image {img.width}x{img.height} smaller than model patch {patch}")
    stride = patch if stride is None else stride
    x = extract_patches(img, patch, stride)
    err = np.mean((forward(model, x) - x) ** 2, axis=1)
    grid = err.reshape(patch_grid(img.shape, patch, stride))
    return ScoreRecord(sample_id, label, float(np.mean(grid)), grid.tolist())


def compute_auroc(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label == "anomalous" for r in records])
    return auroc_from_scores(scores, labels)


def auroc_from_scores(scores, positive):
    """Mann-Whitney AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = int(len(positive) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("AUROC needs at least one normal and one anomalous record")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --- checkpoints --------------------------------------------------------------

def save_model(model, path):
    path = Path(path)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(model.sizes))
    header += struct.pack(f"<{len(model.sizes)}I", *model.sizes)
    tag = model.version.encode("utf-8")
    header += struct.pack("<I", len(tag)) + tag
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.parameters())
    try:
        path.write_bytes(header + body)
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc


def load_model(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc
    if blob[:4] != MAGIC:
        raise IoFailure(path, "not a defectforge checkpoint")
    try:
        return _parse_checkpoint(blob, path)
    except (struct.error, ValueError) as exc:
        raise IoFailure(path, f"truncated or corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(blob, path):
    version, n = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise IoFailure(path, f"unsupported checkpoint version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n}I", blob, off)
    off += 4 * n
    (tag_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    tag = blob[off:off + tag_len].decode("utf-8")
    off += tag_len
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(blob):
        raise IoFailure(path, "checkpoint has trailing or missing bytes")
    return AutoencoderModel(tuple(sizes), weights, biases, tag)


def save_records(records, path):
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=1) + "\n")
