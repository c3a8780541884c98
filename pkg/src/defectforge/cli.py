"""Command-line entry point. Every subcommand exits 0 on success and prints a
JSON error object on stderr with a nonzero exit otherwise."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .detector import (TrainSchedule, init_model, load_model, save_model,
                       save_records, train_arrays)
from .errors import DefectForgeError
from .genclient import serve_mock
from .imgcore import load_image
from .matchfilter import FilterParams, MatchFilter
from .pipeline.config import load_config
from .pipeline.datasets import build_toy_benchmark, generate_gen_dataset, generate_rule_dataset
from .pipeline.experiment import endpoint_from, run_experiment
from .pipeline.manifest import Manifest
from .pipeline.report import emit_report, render_montage, save_montage
from .pipeline.strategy import STRATEGIES, PatchCache, StrategyResult, evaluate, make_plan, run_strategy

log = logging.getLogger("defectforge")


def _emit(obj):
    print(json.dumps(obj, indent=1, default=str))


def _cfg(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_toy_bench(args):
    cfg = _cfg(args)
    out = build_toy_benchmark(args.out, cfg["seed"], cfg["images"])
    _emit({k: {"manifest": str(m.path), "entries": len(m)} for k, m in out.items()})


def cmd_synth_rule(args):
    cfg = _cfg(args)
    rg = dict(cfg["rulegen"])
    n = args.n if args.n is not None else rg["n"]
    textures = Manifest.load(args.textures) if args.textures else None
    m = generate_rule_dataset(Manifest.load(args.normals), args.out, n, cfg["seed"], rulegen=rg,
                              textures=textures, workers=args.workers or rg.get("workers", 1))
    _emit({"manifest": str(m.path), "entries": len(m)})


def cmd_synth_gen(args):
    cfg = _cfg(args)
    gc = cfg["genclient"]
    n_accept = args.n_accept if args.n_accept is not None else gc["n_accept"]
    normals = Manifest.load(args.normals)
    endpoint = args.endpoint or endpoint_from(cfg)
    fparams = FilterParams.from_dict(cfg["filter"])
    kw = dict(max_attempts=args.max_attempts, genclient=gc)
    if endpoint:
        m = generate_gen_dataset(normals, args.out, endpoint, n_accept, cfg["seed"], fparams, **kw)
    else:
        with serve_mock(args.mock or gc.get("mock_mode", "local-edit"), cfg["seed"]) as server:
            m = generate_gen_dataset(normals, args.out, server.url, n_accept, cfg["seed"], fparams, **kw)
    _emit({"manifest": str(m.path), "entries": len(m), "summary": m.extra.get("summary")})


def cmd_filter(args):
    cfg = _cfg(args)
    normal, cand = load_image(args.normal), load_image(args.candidate)
    report = MatchFilter(FilterParams.from_dict(cfg["filter"]))(normal, cand)
    if args.montage:
        caption = f"{report.decision} r={report.ratio:.2f} m={report.m}"
        save_montage(render_montage(normal, cand, caption), args.montage)
    _emit(report.to_dict())


def cmd_train(args):
    cfg = _cfg(args)
    det = cfg["detector"]
    s = cfg["strategies"]
    cache = PatchCache()
    xs, ys = [], []
    for ref in args.dataset:
        x, y, _ = cache.pairs(ref, det["patch"], det["stride"])
        xs.append(x)
        ys.append(y)
    x, y = np.concatenate(xs), np.concatenate(ys)
    model = load_model(args.init) if args.init else init_model(det["patch"], tuple(det["hidden"]), cfg["seed"])
    sched = TrainSchedule(args.stage, args.epochs if args.epochs is not None else s["epochs"],
                          args.batch_size or s["batch_size"], args.lr or s["learning_rate"],
                          s["lr_decay"], cfg["seed"], s["momentum"])
    model, curve = train_arrays(model, x, y, sched)
    save_model(model, args.out)
    if args.curve:
        Path(args.curve).write_text(json.dumps({"schedule": sched.to_dict(), "losses": curve}, indent=1) + "\n")
    _emit({"model": args.out, "patches": len(x), "final_loss": curve[-1] if curve else None})


def cmd_eval(args):
    cfg = _cfg(args)
    model = load_model(args.model)
    auroc, by_cat, records = evaluate(model, args.eval, cfg["detector"]["score_stride"])
    if args.out:
        save_records(records, args.out)
    _emit({"auroc": auroc, "auroc_by_category": by_cat, "records": len(records)})


def cmd_strategy(args):
    cfg = _cfg(args)
    plan = make_plan(args.strategy, args.rule, args.gen, args.eval, cfg)
    res = run_strategy(plan, args.out)
    _emit({"strategy": res.strategy, "auroc": res.auroc, "result": str(Path(args.out) / "result.json")})


def cmd_report(args):
    results = [StrategyResult.load(p) for p in args.results]
    out = emit_report(results, args.out, gen_dir=args.gen)
    sys.stdout.write(out["text"])


def cmd_experiment(args):
    cfg = _cfg(args)
    strategies = tuple(args.strategies) if args.strategies else STRATEGIES
    t0 = time.perf_counter()
    results, report = run_experiment(cfg, args.out, args.endpoint, strategies)
    sys.stdout.write(report["text"])
    log.info("experiment finished in %.1f s", time.perf_counter() - t0)


def cmd_serve_mock(args):
    server = serve_mock(args.mode, args.seed or 0, args.port, args.host, args.fail_first)
    print(json.dumps({"url": server.url, "mode": args.mode}), flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


def build_parser():
    ap = argparse.ArgumentParser(prog="defectforge", description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="JSON config file (merged over defaults)")
    ap.add_argument("--seed", type=int, help="global seed override")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-bench", help="render the procedural toy benchmark")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy_bench)

    p = sub.add_parser("synth-rule", help="rule-based defect synthesis")
    p.add_argument("--normals", required=True, help="normals manifest")
    p.add_argument("--textures", help="texture manifest (needed by perlin/poisson)")
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_synth_rule)

    p = sub.add_parser("synth-gen", help="generate, gate and persist service candidates")
    p.add_argument("--normals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", help="service URL (else DEFECTFORGE_SERVICE_URL, else a local mock)")
    p.add_argument("--mock", choices=("identity", "local-edit", "scramble", "flaky", "mixed"))
    p.add_argument("--n-accept", type=int)
    p.add_argument("--max-attempts", type=int)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("filter", help="gate one candidate against its normal")
    p.add_argument("normal")
    p.add_argument("candidate")
    p.add_argument("--montage", help="write a three-panel PNG here")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="train (or fine-tune) an autoencoder on datasets")
    p.add_argument("--dataset", action="append", required=True, help="manifest; repeat to concatenate")
    p.add_argument("--stage", default="single", choices=("pretrain", "finetune", "single"))
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="write the loss curve JSON here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AUROC of a checkpoint on an eval manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--out", help="write ScoreRecords JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("strategy", help="run one training strategy end to end")
    p.add_argument("strategy", choices=STRATEGIES)
    p.add_argument("--rule", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_strategy)

    p = sub.add_parser("report", help="comparison table, curves and montages")
    p.add_argument("results", nargs="+", help="strategy result dirs or result.json files")
    p.add_argument("--out", required=True)
    p.add_argument("--gen", help="gen dataset dir, for filter montages")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", help="benchmark, datasets, all strategies and the report")
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint")
    p.add_argument("--strategies", nargs="*", choices=STRATEGIES)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("serve-mock", help="run the mock editing service in the foreground")
    p.add_argument("--mode", default="local-edit", choices=("identity", "local-edit", "scramble", "flaky", "mixed"))
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--fail-first", type=int, default=2)
    p.set_defaults(func=cmd_serve_mock)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("httpx").setLevel(max(level, logging.WARNING))
    try:
        args.func(args)
    except DefectForgeError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": "InvalidArgument", "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
