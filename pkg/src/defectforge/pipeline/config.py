"""Experiment configuration: one JSON document with sections
``images``, ``rulegen``, ``genclient``, ``filter``, ``detector``, ``strategies``."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

DEFAULT_CONFIG = {
    "seed": 7,
    "images": {
        "size": 64,
        "train_normals": 200,
        "eval_normals": 100,
        "eval_anomalies": 100,
        "textures": 30,
    },
    "rulegen": {
        "n": 2000,
        "perlin": {"cell_size": 16, "octaves": 3, "persistence": 0.5, "threshold": 0.2,
                   "beta": None, "beta_range": [0.2, 0.8]},
        "weights": {"perlin": 1.0, "cutpaste": 0.0, "gaussian": 0.0, "poisson": 0.0},
        "patch_frac": 0.25,
        "sigma_range": [15.0, 40.0],
        "poisson_tol": 1e-3,
        "workers": 1,
    },
    "genclient": {
        "endpoint": None,
        "mock_mode": "local-edit",
        "n_accept": 60,
        "attempts_per_accept": 4,
        "concurrency": 4,
        "defect_types": ["scratch", "dent", "stain"],
        "prompts": {},
        "guidance": {},
        "retry": {"max_retries": 3, "backoff_s": 0.05, "backoff_factor": 2.0, "timeout_s": 30.0},
    },
    "filter": {
        "tau_low": 0.05,
        "tau_high": 0.90,
        "min_keypoints": 8,
        "pattern_seed": 0,
        "harris": {"k": 0.04, "window": 7, "sigma": 1.5, "nms_radius": 5, "max_kp": 512,
                   "threshold": 1e-4},
        "match": {"ratio": 0.8, "max_dist": 64},
    },
    "detector": {
        "patch": 16,
        "stride": 8,
        "score_stride": 8,
        "hidden": [128, 32, 128],
    },
    "strategies": {
        "epochs": 30,
        "batch_size": 64,
        "learning_rate": 0.2,
        "lr_decay": 0.95,
        "momentum": 0.9,
        "finetune": {"lr_factor": 0.1, "epoch_frac": 0.2, "batch_size": 4},
    },
}


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=None):
    cfg = DEFAULT_CONFIG
    if path:
        cfg = deep_merge(cfg, json.loads(Path(path).read_text()))
    return deep_merge(cfg, overrides or {})


def config_hash(section):
    blob = json.dumps(section, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
