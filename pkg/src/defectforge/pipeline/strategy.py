"""The five training strategies: which datasets feed which stage, and in what order.

  a  sim-only       one stage on the rule-based set
  b  gen-only       one stage on the generative set
  c  mixed          one stage on both sets concatenated
  d  gen -> sim     pretrain on generative, fine-tune on rule-based
  e  sim -> gen     pretrain on rule-based, fine-tune on generative
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..detector import (TrainSchedule, anomaly_score, compute_auroc, init_model, pair_arrays,
                        save_model, save_records, train_arrays)
from ..imgcore import derive_seed
from .manifest import Manifest

log = logging.getLogger(__name__)

STRATEGIES = ("a", "b", "c", "d", "e")
DESCRIPTIONS = {
    "a": "sim-only",
    "b": "gen-only",
    "c": "mixed",
    "d": "gen->sim",
    "e": "sim->gen",
}
RESULT_NAME = "result.json"
TIMINGS_NAME = "timings.json"


@dataclass
class StageSpec:
    datasets: tuple
    schedule: TrainSchedule

    def to_dict(self):
        return {"datasets": list(self.datasets), "schedule": self.schedule.to_dict()}


@dataclass
class StrategyPlan:
    strategy: str
    stages: list
    datasets: dict
    eval_ref: str
    seed: int
    detector: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        want = 2 if self.strategy in ("d", "e") else 1
        if len(self.stages) != want:
            raise ValueError(f"strategy {self.strategy} needs {want} stage(s), got {len(self.stages)}")

    def to_dict(self):
        return {"strategy": self.strategy, "description": DESCRIPTIONS[self.strategy],
                "seed": self.seed, "datasets": dict(self.datasets), "eval": self.eval_ref,
                "detector": dict(self.detector), "stages": [s.to_dict() for s in self.stages]}


@dataclass
class StrategyResult:
    plan: dict
    stage_losses: list
    auroc: float
    auroc_by_category: dict
    dataset_sizes: list
    eval_size: dict
    timings: dict = field(default_factory=dict, compare=False)

    @property
    def strategy(self):
        return self.plan["strategy"]

    @property
    def n_stages(self):
        return len(self.stage_losses)

    def to_dict(self):
        d = asdict(self)
        d.pop("timings")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d, timings=None):
        return cls(d["plan"], d["stage_losses"], d["auroc"], d["auroc_by_category"],
                   d["dataset_sizes"], d["eval_size"], timings or {})

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / RESULT_NAME).write_text(self.to_json())
        # wall-clock varies run to run, so it lives beside the result, not in it
        (out / TIMINGS_NAME).write_text(json.dumps(self.timings, indent=1) + "\n")
        return out / RESULT_NAME

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / RESULT_NAME
        timings_path = path.parent / TIMINGS_NAME
        timings = json.loads(timings_path.read_text()) if timings_path.is_file() else {}
        return cls.from_dict(json.loads(path.read_text()), timings)


def schedules(strategies_cfg, seed):
    """``(single, pretrain, finetune)`` schedules from the ``strategies`` config section."""
    s = strategies_cfg
    train_seed = derive_seed(seed, "train")
    common = dict(epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
                  lr_decay=s["lr_decay"], seed=train_seed, momentum=s["momentum"])
    single = TrainSchedule("single", **common)
    pretrain = TrainSchedule("pretrain", **common)
    ft = s.get("finetune", {})
    finetune = TrainSchedule(
        "finetune",
        epochs=max(1, round(ft.get("epoch_frac", 0.2) * s["epochs"])),
        batch_size=ft.get("batch_size", s["batch_size"]),
        learning_rate=s["learning_rate"] * ft.get("lr_factor", 0.1),
        lr_decay=s["lr_decay"], seed=train_seed, momentum=s["momentum"])
    return single, pretrain, finetune


def make_plan(strategy, rule_ref, gen_ref, eval_ref, cfg):
    """Build the plan for one strategy letter from the experiment config."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    single, pretrain, finetune = schedules(cfg["strategies"], cfg["seed"])
    stages = {
        "a": [StageSpec(("rule",), pretrain)],
        "b": [StageSpec(("gen",), single)],
        "c": [StageSpec(("rule", "gen"), single)],
        "d": [StageSpec(("gen",), pretrain), StageSpec(("rule",), finetune)],
        "e": [StageSpec(("rule",), pretrain), StageSpec(("gen",), finetune)],
    }[strategy]
    return StrategyPlan(strategy, stages, {"rule": str(rule_ref), "gen": str(gen_ref)},
                        str(eval_ref), cfg["seed"], dict(cfg["detector"]))


class PatchCache:
    """Patch matrices per dataset, plus trained models per stage prefix.

    Strategies a and e share an identical first stage; since training is
    deterministic, the second run can start from the first run's weights.
    """

    def __init__(self):
        self.arrays = {}
        self.stages = {}

    def pairs(self, ref, patch, stride):
        key = (str(Path(ref).resolve()), patch, stride)
        if key not in self.arrays:
            m = Manifest.load(ref).validate()
            pairs = [(m.image(e), m.image(e, "source_normal")) for e in m.entries]
            if not pairs:
                raise ValueError(f"{ref}: dataset is empty")
            x, y = pair_arrays(pairs, patch, stride)
            self.arrays[key] = (x, y, len(pairs))
        return self.arrays[key]


def _score_eval(model, eval_ref, stride):
    m = Manifest.load(eval_ref).validate()
    records, cats = [], []
    for e in m.entries:
        records.append(anomaly_score(model, m.image(e), e["sample_id"], e["label"], stride))
        cats.append(e.get("category", "all"))
    return records, cats


def evaluate(model, eval_ref, stride):
    records, cats = _score_eval(model, eval_ref, stride)
    by_cat = {}
    for c in sorted(set(cats)):
        sub = [r for r, k in zip(records, cats) if k == c]
        if len({r.label for r in sub}) == 2:
            by_cat[c] = compute_auroc(sub)
    return compute_auroc(records), by_cat, records


def run_strategy(plan, out_dir=None, cache=None, root=None):
    """Train one model through the plan's stages and score it on the eval set.

    Relative dataset refs in the plan are resolved against ``root``.
    """
    cache = cache if cache is not None else PatchCache()
    where = (lambda ref: Path(root) / ref) if root is not None else Path
    det = plan.detector
    patch, stride = det.get("patch", 16), det.get("stride", 8)
    hidden = tuple(det.get("hidden", (128, 32, 128)))
    init_seed = derive_seed(plan.seed, "model-init")

    model = init_model(patch, hidden, init_seed)
    losses, sizes, timings = [], [], {"stages": []}
    prefix = (patch, stride, hidden, init_seed)
    for stage in plan.stages:
        arrays = [cache.pairs(where(plan.datasets[name]), patch, stride) for name in stage.datasets]
        x = np.concatenate([a[0] for a in arrays])
        y = np.concatenate([a[1] for a in arrays])
        sizes.append({"datasets": list(stage.datasets), "samples": sum(a[2] for a in arrays),
                      "patches": int(len(x))})
        prefix = prefix + (tuple(plan.datasets[n] for n in stage.datasets),
                           json.dumps(stage.schedule.to_dict(), sort_keys=True))
        t0 = time.perf_counter()
        if prefix in cache.stages:
            trained, curve, secs = cache.stages[prefix]
            model = trained.copy()
            timings["stages"].append({"stage": stage.schedule.stage, "seconds": secs, "reused": True})
        else:
            model, curve = train_arrays(model, x, y, stage.schedule)
            secs = time.perf_counter() - t0
            cache.stages[prefix] = (model.copy(), list(curve), secs)
            timings["stages"].append({"stage": stage.schedule.stage, "seconds": secs, "reused": False})
        log.info("strategy %s: stage %s on %s, final loss %.6f", plan.strategy,
                 stage.schedule.stage, "+".join(stage.datasets), curve[-1] if curve else float("nan"))
        losses.append([float(v) for v in curve])

    t0 = time.perf_counter()
    auroc, by_cat, records = evaluate(model, where(plan.eval_ref), det.get("score_stride", stride))
    timings["eval_seconds"] = time.perf_counter() - t0
    n_anom = sum(r.label == "anomalous" for r in records)
    result = StrategyResult(plan.to_dict(), losses, auroc, by_cat, sizes,
                            {"normal": len(records) - n_anom, "anomalous": n_anom}, timings)
    if out_dir is not None:
        out = Path(out_dir)
        result.save(out)
        save_model(model, out / "model.dfae")
        save_records(records, out / "scores.json")
    return result
