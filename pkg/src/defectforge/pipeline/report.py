"""Strategy comparison tables, loss-curve dumps and filter-decision montages."""
from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..errors import IoFailure
from ..imgcore import ImageBuffer, load_image, to_grayscale
from .strategy import DESCRIPTIONS, STRATEGIES

PANEL_GAP = 2
CAPTION_H = 14


def _pct(v):
    return f"{100.0 * v:.1f}"


def comparison_rows(results):
    """Rows in strategy order; each row holds AUROC and per-category AUROC."""
    order = {s: i for i, s in enumerate(STRATEGIES)}
    rows = []
    for r in sorted(results, key=lambda r: order.get(r.strategy, len(order))):
        rows.append({"strategy": r.strategy, "description": DESCRIPTIONS.get(r.strategy, ""),
                     "auroc": r.auroc, **{f"auroc_{k}": v for k, v in r.auroc_by_category.items()}})
    return rows


def best_per_column(rows):
    cols = [k for k in rows[0] if k.startswith("auroc")] if rows else []
    best = {}
    for c in cols:
        vals = [r[c] for r in rows if c in r]
        best[c] = max(vals) if vals else None
    return best


def format_table(rows):
    """Plain-text table, AUROC x100 to one decimal; ``*`` marks each column's best."""
    cols = sorted({k for r in rows for k in r if k.startswith("auroc_")})
    cols = ["auroc"] + cols
    best = best_per_column(rows)
    head = ["strategy", "schedule"] + [("mean" if c == "auroc" else c[len("auroc_"):]) for c in cols]
    body = []
    for r in rows:
        cells = [r["strategy"], r["description"]]
        for c in cols:
            if c not in r:
                cells.append("-")
            else:
                cells.append(_pct(r[c]) + ("*" if r[c] == best[c] else " "))
        body.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(str(c).rjust(w) if i > 1 else str(c).ljust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line(head), "  ".join("-" * w for w in widths)] + [line(b) for b in body]
    return "\n".join(out) + "\n"


def _panel(img):
    g = to_grayscale(img).gray() if img.channels != 1 else img.gray()
    return Image.fromarray(np.ascontiguousarray(g), mode="L")


def render_montage(normal, candidate, caption, third=None):
    """Three panels: normal | candidate | mask (or |difference| when no mask), plus a caption strip."""
    if third is None:
        diff = np.abs(to_grayscale(normal).gray().astype(np.int16)
                      - to_grayscale(candidate).gray().astype(np.int16))
        third = ImageBuffer(np.clip(diff * 2, 0, 255).astype(np.uint8)[..., None])
    panels = [_panel(normal), _panel(candidate), _panel(third)]
    w, h = panels[0].size
    canvas = Image.new("L", (3 * w + 2 * PANEL_GAP, h + CAPTION_H), color=0)
    for i, p in enumerate(panels):
        canvas.paste(p, (i * (w + PANEL_GAP), 0))
    ImageDraw.Draw(canvas).text((2, h + 1), caption, fill=255)
    return canvas


def save_montage(canvas, path):
    path = Path(path)
    try:
        canvas.save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc
    return path


def montages_from_attempts(gen_dir, out_dir, per_decision=2):
    """Render montages for the first few attempts of each filter decision in a gen dataset."""
    gen_dir = Path(gen_dir)
    log_path = gen_dir / "attempts.jsonl"
    if not log_path.is_file():
        return []
    picked = defaultdict(list)
    for line in log_path.read_text().splitlines():
        rec = json.loads(line)
        if "filter_report" in rec and "candidate" in rec and len(picked[rec["decision"]]) < per_decision:
            picked[rec["decision"]].append(rec)
    out = []
    for decision in sorted(picked):
        for rec in picked[decision]:
            normal = load_image(gen_dir / rec["normal_image"])
            cand = load_image(gen_dir / rec["candidate"])
            rep = rec["filter_report"]
            caption = f"{decision} r={rep['ratio']:.2f} m={rep['m']}"
            p = Path(out_dir) / f"montage_{decision}_{rec['attempt']:06d}.png"
            out.append(save_montage(render_montage(normal, cand, caption), p))
    return out


def emit_report(results, out_dir, gen_dir=None, per_decision=2):
    """Write table.txt, table.json, curves.json and montage PNGs under ``out_dir``."""
    if not results:
        raise ValueError("no strategy results to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(out, str(exc)) from exc
    rows = comparison_rows(results)
    text = format_table(rows)
    best = best_per_column(rows)
    (out / "table.txt").write_text(text)
    table = {"rows": [{k: (round(100 * v, 1) if k.startswith("auroc") else v) for k, v in r.items()}
                      for r in rows],
             "best": {k: [r["strategy"] for r in rows if r.get(k) == v] for k, v in best.items()}}
    (out / "table.json").write_text(json.dumps(table, indent=1) + "\n")
    curves = {r.strategy: {"stages": [s["schedule"]["stage"] for s in r.plan["stages"]],
                           "losses": r.stage_losses} for r in results}
    (out / "curves.json").write_text(json.dumps(curves, indent=1) + "\n")
    montages = montages_from_attempts(gen_dir, out, per_decision) if gen_dir is not None else []
    return {"table": out / "table.txt", "json": out / "table.json", "curves": out / "curves.json",
            "montages": montages, "text": text}
