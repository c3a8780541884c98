"""Dataset builders: the toy benchmark, rule-based synthesis and the
generate -> filter -> persist loop against the image-editing service."""
from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ..errors import (AcceptanceExhausted, DefectForgeError, DegenerateImage, DimensionMismatch,
                      EngineFailure, MalformedResponse)
from ..genclient import (GenerationRequest, RetryPolicy, TemplateRegistry, build_prompt,
                         request_generation)
from ..imgcore import DefectMask, derive_seed, save_image, substream
from ..matchfilter import DESIRED, FilterParams, MatchFilter
from ..mockedits import local_edit
from ..rulegen import RuleConfig, pick_engine, synthesize
from .config import config_hash
from .manifest import Manifest
from .toybench import KINDS, TEXTURE_KINDS, render_product, render_texture

log = logging.getLogger(__name__)


def _ordered_map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- toy benchmark ------------------------------------------------------------

def build_toy_benchmark(out_dir, seed=7, images=None):
    """Render train normals, textures and a labelled eval split under ``out_dir``.

    Every image draws from its own substream (``train``, ``eval-normal``,
    ``eval-source``), so the splits never share a rendering seed.
    """
    images = dict(images or {})
    n_train = images.get("train_normals", 200)
    n_eval_norm = images.get("eval_normals", 100)
    n_eval_anom = images.get("eval_anomalies", 100)
    n_tex = images.get("textures", 30)
    size = images.get("size", 64)
    out = Path(out_dir)
    chash = config_hash({"seed": seed, "images": images})

    normals = Manifest("toy-normals", "normals", chash, root=out / "normals")
    (normals.root / "images").mkdir(parents=True, exist_ok=True)
    for i in range(n_train):
        kind = KINDS[i % len(KINDS)]
        s = derive_seed(seed, "train", i)
        p = normals.root / "images" / f"train_{i:04d}.png"
        save_image(render_product(kind, s, size), p)
        normals.add(f"train_{i:04d}", p, category=kind, seed=s, label="normal")
    normals.save()

    textures = Manifest("toy-textures", "textures", chash, root=out / "textures")
    (textures.root / "images").mkdir(parents=True, exist_ok=True)
    for i in range(n_tex):
        kind = TEXTURE_KINDS[i % len(TEXTURE_KINDS)]
        s = derive_seed(seed, "texture", i)
        p = textures.root / "images" / f"tex_{i:04d}.png"
        save_image(render_texture(kind, s, size), p)
        textures.add(f"tex_{i:04d}", p, category=kind, seed=s)
    textures.save()

    ev = Manifest("toy-eval", "eval", chash, root=out / "eval")
    for sub in ("images", "sources", "masks"):
        (ev.root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(n_eval_norm):
        kind = KINDS[i % len(KINDS)]
        s = derive_seed(seed, "eval-normal", i)
        p = ev.root / "images" / f"eval_normal_{i:04d}.png"
        save_image(render_product(kind, s, size), p)
        ev.add(f"eval_normal_{i:04d}", p, category=kind, seed=s, label="normal")
    for i in range(n_eval_anom):
        kind = KINDS[i % len(KINDS)]
        s = derive_seed(seed, "eval-source", i)
        edit_seed = derive_seed(seed, "eval-edit", i)
        src = render_product(kind, s, size)
        anomalous, ell, amp = local_edit(src, edit_seed)
        sid = f"eval_anomaly_{i:04d}"
        p_img = ev.root / "images" / f"{sid}.png"
        p_src = ev.root / "sources" / f"{sid}.png"
        p_mask = ev.root / "masks" / f"{sid}.png"
        save_image(anomalous, p_img)
        save_image(src, p_src)
        save_image(DefectMask(ell.region(src.shape)).to_image(), p_mask)
        ev.add(sid, p_img, mask=p_mask, source_normal=p_src, category=kind, seed=s,
               edit_seed=edit_seed, label="anomalous", provenance="mock:local-edit",
               ellipse=ell.to_dict(), amplitude=amp)
    ev.save()
    return {"normals": normals, "textures": textures, "eval": ev}


# --- rule-based synthesis -------------------------------------------------------

def _load_all(manifest):
    return [manifest.image(e) for e in manifest.entries]


def mask_locality_violations(sample_image, mask, normal):
    """Number of pixels outside ``mask`` that differ from ``normal``."""
    diff = np.any(sample_image.pixels != normal.pixels, axis=2)
    return int(np.count_nonzero(diff & ~mask.bits))


def generate_rule_dataset(normals, out_dir, n, seed, rulegen=None, textures=None, workers=1):
    """Synthesize ``n`` rule-based samples from the normals manifest.

    Item ``i`` uses substream ``(seed, "rule", i)`` for its normal, engine,
    texture and parameters, so output is independent of ``workers``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(normals) == 0:
        raise ValueError("no normal images to synthesize from")
    rulegen = dict(rulegen or {})
    cfg = RuleConfig.from_dict({k: v for k, v in rulegen.items() if k not in ("n", "workers")})
    normal_imgs = _load_all(normals)
    tex_imgs = _load_all(textures) if textures is not None else []
    out = Manifest("rule", "rule", config_hash({"seed": seed, "n": n, "rulegen": cfg.to_dict()}),
                   root=Path(out_dir))
    (out.root / "images").mkdir(parents=True, exist_ok=True)
    (out.root / "masks").mkdir(parents=True, exist_ok=True)

    def make(i):
        sid = f"rule_{i:06d}"
        item_seed = derive_seed(seed, "rule", i)
        rng = substream(item_seed, "pick")
        ni = int(rng.integers(0, len(normal_imgs)))
        engine = pick_engine(cfg.weights, rng)
        tex = tex_imgs[int(rng.integers(0, len(tex_imgs)))] if tex_imgs else None
        di = int(rng.integers(0, len(normal_imgs)))
        try:
            sample = synthesize(engine, normal_imgs[ni], item_seed, cfg, texture=tex,
                                donor=normal_imgs[di])
        except (DefectForgeError, ValueError) as exc:
            return sid, ni, None, exc
        return sid, ni, sample, None

    results = _ordered_map(make, range(n), workers)
    failures = []
    for sid, ni, sample, err in results:
        if err is not None:
            failures.append((sid, err))
            continue
        bad = mask_locality_violations(sample.image, sample.mask, normal_imgs[ni])
        if bad:
            failures.append((sid, AssertionError(f"{bad} pixels changed outside the mask")))
            continue
        p_img = out.root / "images" / f"{sid}.png"
        p_mask = out.root / "masks" / f"{sid}.png"
        save_image(sample.image, p_img)
        save_image(sample.mask.to_image(), p_mask)
        src_entry = normals.entries[ni]
        out.add(sid, p_img, mask=p_mask, source_normal=normals.resolve(src_entry["image"]),
                provenance=sample.provenance, param_hash=sample.param_hash, seed=sample.seed,
                params=sample.params, category=src_entry.get("category"),
                mask_area=sample.mask.area)
    if failures:
        raise EngineFailure(failures)
    return Path(out.save()) and out


# --- generative synthesis ---------------------------------------------------------

def _prompt_id(prompt):
    return f"{prompt.template_id}/{prompt.category}/{prompt.defect_type}".replace(" ", "_")


def generate_gen_dataset(normals, out_dir, endpoint, n_accept, seed, filter_params=None,
                         max_attempts=None, genclient=None, policy=None, client=None):
    """Request candidates until ``n_accept`` pass the structural gate.

    Every attempt, accepted or not, is logged to ``attempts.jsonl`` with its
    FilterReport; rejected candidates are kept under ``rejected/``. Raises
    :class:`AcceptanceExhausted` if ``max_attempts`` runs out first (the
    manifest of what was accepted is still written).
    """
    gc = dict(genclient or {})
    if max_attempts is None:
        max_attempts = gc.get("attempts_per_accept", 4) * n_accept
    concurrency = max(1, int(gc.get("concurrency", 4)))
    defect_types = list(gc.get("defect_types", ["scratch", "dent", "stain"]))
    registry = TemplateRegistry.from_dict(gc.get("prompts"))
    guidance = dict(gc.get("guidance", {}))
    if policy is None:
        policy = RetryPolicy(**gc.get("retry", {}))
    fparams = filter_params if isinstance(filter_params, FilterParams) else FilterParams.from_dict(filter_params)
    gate = MatchFilter(fparams)
    normal_imgs = _load_all(normals)
    normal_desc = {}

    chash = config_hash({"seed": seed, "n_accept": n_accept, "max_attempts": max_attempts,
                         "filter": fparams.to_dict(), "defect_types": defect_types})
    out = Manifest("gen", "gen", chash, root=Path(out_dir))
    for sub in ("images", "rejected"):
        (out.root / sub).mkdir(parents=True, exist_ok=True)
    log_path = out.root / "attempts.jsonl"
    decisions = Counter()
    accepted = 0
    attempt = 0

    def plan(i):
        rng = substream(seed, "gen-attempt", i)
        ni = int(rng.integers(0, len(normal_imgs)))
        category = normals.entries[ni].get("category", "object")
        defect = defect_types[int(rng.integers(0, len(defect_types)))]
        prompt = build_prompt(category, defect, registry)
        return i, ni, prompt, f"gen-{seed}-{i:06d}"

    def call(job):
        i, ni, prompt, rid = job
        req = GenerationRequest(rid, normal_imgs[ni], prompt.rendered, guidance)
        try:
            return job, request_generation(endpoint, req, policy, client=client), None
        except (MalformedResponse, DimensionMismatch) as exc:
            return job, None, exc

    with log_path.open("w") as logf:
        while accepted < n_accept and attempt < max_attempts:
            batch = [plan(i) for i in range(attempt, min(attempt + concurrency, max_attempts))]
            results = _ordered_map(call, batch, concurrency if client is None else 1)
            for (i, ni, prompt, rid), resp, err in results:
                if accepted >= n_accept:
                    break
                attempt = i + 1
                normal_path = normals.resolve(normals.entries[ni]["image"])
                record = {"attempt": i, "request_id": rid, "normal": normals.entries[ni]["sample_id"],
                          "normal_image": out.relative(normal_path),
                          "prompt": prompt.rendered, "prompt_id": _prompt_id(prompt)}
                if err is not None:
                    record.update(decision="Error", error=str(err))
                    decisions["Error"] += 1
                    logf.write(json.dumps(record) + "\n")
                    continue
                record["service_meta"] = resp.meta
                if ni not in normal_desc:
                    normal_desc[ni] = gate.describe(normal_imgs[ni])
                try:
                    report = gate(normal_imgs[ni], resp.image, normal_desc[ni])
                except DegenerateImage as exc:
                    record.update(decision="Degenerate", error=str(exc))
                    decisions["Degenerate"] += 1
                    logf.write(json.dumps(record) + "\n")
                    continue
                record["filter_report"] = report.to_dict()
                record["decision"] = report.decision
                decisions[report.decision] += 1
                if report.decision == DESIRED:
                    sid = f"gen_{accepted:06d}"
                    p = out.root / "images" / f"{sid}.png"
                    save_image(resp.image, p)
                    record["sample_id"] = sid
                    record["candidate"] = out.relative(p)
                    out.add(sid, p, source_normal=normal_path,
                            provenance=f"gen:{_prompt_id(prompt)}", seed=derive_seed(seed, "gen", i),
                            request_id=rid, prompt=prompt.rendered, category=prompt.category,
                            filter_report=report.to_dict(), service_meta=resp.meta)
                    accepted += 1
                else:
                    p = out.root / "rejected" / f"attempt_{i:06d}.png"
                    save_image(resp.image, p)
                    record["candidate"] = out.relative(p)
                logf.write(json.dumps(record) + "\n")

    rate = accepted / attempt if attempt else 0.0
    summary = {"n_accept": n_accept, "accepted": accepted, "attempts": attempt,
               "acceptance_rate": rate, "decisions": dict(sorted(decisions.items()))}
    out.extra["summary"] = summary
    out.save()
    (out.root / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    log.info("generative dataset: %d/%d accepted (rate %.3f)", accepted, attempt, rate)
    if accepted < n_accept:
        raise AcceptanceExhausted(
            f"only {accepted}/{n_accept} candidates accepted in {attempt} attempts",
            accepted=accepted, attempts=attempt)
    return out
