"""Command-line entry point: ``track``, ``train``, ``eval``, ``synth``, ``oracle``.

Failures print one JSON line ``{"error": ..., "kind": ...}`` on stderr and
exit with a nonzero status.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence


from . import io as mio
from . import metrics
from .config import RunConfig
from .engine import track_sequence
from .scorer import ScorerModel, load_checkpoint, save_checkpoint
from .scoring import IoUScorer, ModelScorer
from .training import TrainConfig, train

log = logging.getLogger("hypotrack")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    for flag, key in (("seed", "seed"), ("fps", "fps"), ("fast_cutoff", "fast_cutoff"),
                      ("selection", "selection"), ("pruning", "pruning")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if getattr(args, "autocontext", False):
        over["autocontext"] = True
    if getattr(args, "batch_seconds", None) is not None:
        over["batch_seconds_train" if args.command == "train" else "batch_seconds_infer"] = args.batch_seconds
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cfg.with_strings({k.strip(): v})
    return cfg.replace(**over)


def header(cfg: RunConfig, command: str) -> str:
    return f"hypotrack {command}\n" + cfg.dumps().rstrip("\n")


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(batch_frames=cfg.train_frames, minibatch=cfg.minibatch, hard_mining=cfg.hard_mining,
                       temperature_start=cfg.temperature_start, temperature_end=cfg.temperature_end,
                       anneal_iterations=cfg.anneal_iterations, growth_window=cfg.growth_window,
                       growth_threshold=cfg.growth_threshold, max_build_iterations=cfg.max_build_iterations,
                       final_epochs=cfg.final_epochs, val_fraction=cfg.val_fraction, lr=cfg.lr,
                       loss_norm=cfg.loss_norm, dataset=cfg.dataset, seed=cfg.seed,
                       min_bin_samples=cfg.min_bin_samples,
                       engine=cfg.engine(cfg.train_frames))


def _check_appearance(cfg: RunConfig, bundle) -> None:
    if cfg.use_appearance and bundle.embeddings is None:
        raise UsageError("use_appearance is set but no embeddings were given")


def run_track(bundle, cfg: RunConfig, model: Optional[ScorerModel]):
    """Track one sequence; returns ``(tracks, batch results, seconds)``."""
    _check_appearance(cfg, bundle)
    fc = cfg.features(bundle.image_width, bundle.image_height)
    if model is not None:
        if model.n_features != fc.dim:
            raise UsageError(f"model expects {model.n_features} features but the configuration gives {fc.dim}")

        def make(ctx):
            return ModelScorer(model, ctx, autocontext=cfg.autocontext)
    else:
        if cfg.autocontext:
            raise UsageError("autocontext needs a trained model")
        make = IoUScorer
    t0 = time.perf_counter()
    tracks, results = track_sequence(bundle.detections, bundle.n_frames, make, cfg.engine(), fc,
                                     embeddings=bundle.embeddings)
    return tracks, results, time.perf_counter() - t0


def write_plot_data(results, path) -> None:
    """Per-batch, per-round hypothesis counts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "start", "frames", "round", "candidates", "pool_size", "selected"])
        for k, r in enumerate(results):
            for n, cands, size in r.rounds:
                w.writerow([k, r.start, r.n_frames, n, cands, size, len(r.tracklets)])


def _load_bundle(args, need_gt: bool = False):
    if not args.detections:
        raise UsageError("--detections is required")
    if need_gt and not args.gt:
        raise UsageError("--gt is required")
    for p in [args.detections, args.gt, getattr(args, "embeddings", None)]:
        if p and not Path(p).exists():
            raise UsageError(f"input not found: {p}")
    return mio.parse_motchallenge(args.detections, args.gt, getattr(args, "embeddings", None),
                                  fps=getattr(args, "fps", None))


# ----------------------------------------------------------------- commands

def cmd_track(args) -> int:
    cfg = build_config(args)
    bundle = _load_bundle(args)
    model = load_checkpoint(args.model)[0] if args.model else None
    tracks, results, secs = run_track(bundle, cfg, model)
    out = Path(args.out)
    mio.write_results(metrics.tracks_to_mapping(tracks, bundle.n_frames), out, header(cfg, "track"))
    write_plot_data(results, out.with_suffix(".plot.csv"))
    hz = bundle.n_frames / secs if secs > 0 else float("inf")
    print(json.dumps({"tracks": len(tracks), "frames": bundle.n_frames, "hz": round(hz, 3)}))
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    if args.synth:
        from .synth import synth_suite
        scenes = synth_suite(args.synth, seed=cfg.seed)
    else:
        dets, gts = args.detections or [], args.gt or []
        if not dets or len(dets) != len(gts):
            raise UsageError("train needs matching --detections and --gt lists, or --synth N")
        scenes = []
        for d, g in zip(dets, gts):
            for p in (d, g):
                if not Path(p).exists():
                    raise UsageError(f"input not found: {p}")
            scenes.append(mio.parse_motchallenge(d, g, fps=args.fps))
    for b in scenes:
        _check_appearance(cfg, b)
    fc = [cfg.features(b.image_width, b.image_height) for b in scenes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ScorerModel(fc[0].dim, embed=cfg.embed, hidden=cfg.hidden, seed=cfg.seed, neighbors=cfg.neighbors)
    (out / "config.txt").write_text(cfg.dumps())
    res = train(model, scenes, train_config(cfg), feature_cfgs=fc, log_path=out / "train_log.csv",
                checkpoint_dir=out, autocontext=cfg.autocontext)
    save_checkpoint(out / "model.ckpt", res.model)
    print(json.dumps({"dataset": len(res.dataset), "iterations": res.iterations,
                      "checkpoint": str(out / "model.ckpt")}))
    return 0


def cmd_eval(args) -> int:
    if not args.results or not args.gt:
        raise UsageError("eval needs --results and --gt")
    for p in (args.results, args.gt):
        if not Path(p).exists():
            raise UsageError(f"input not found: {p}")
    gts = mio.read_trajectories(args.gt)
    n = max((len(g) for g in gts), default=0)
    res = mio.read_results(args.results)
    n = max([n] + [len(v) for v in res.values()])
    rep = metrics.report(res, metrics.gts_to_mapping(gts), n)
    print(rep.table())
    if args.out:
        Path(args.out).write_text(rep.csv_header() + "\n" + rep.csv_row() + "\n")
    return 0


def cmd_synth(args) -> int:
    from .synth import SceneSpec, synth_scene
    spec = SceneSpec(n_people=args.people, pattern=args.pattern, noise=args.noise, miss_rate=args.miss_rate,
                     fp_rate=args.fp_rate, n_frames=args.frames, seed=args.seed or 0)
    b = synth_scene(spec)
    out = Path(args.out)
    (out / "det").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    head = "hypotrack synth\n" + "\n".join(f"{k} = {v}" for k, v in spec.__dict__.items())
    mio.write_detections(b.detections, out / "det" / "det.txt", head)
    mio.write_ground_truth(b.gts, out / "gt" / "gt.txt", head)
    mio.write_seqinfo(b, out / "seqinfo.ini")
    print(json.dumps({"detections": len(b.detections), "people": len(b.gts), "frames": b.n_frames}))
    return 0


def cmd_oracle(args) -> int:
    from . import oracles
    seed = args.seed if args.seed is not None else int(time.time())
    ok = True
    g = [oracles.gradient_check(seed + k, n_frames=6) for k in range(args.instances)]
    worst = max(c.worst for c in g)
    ok &= _report("gradient", all(c.passed for c in g), f"worst relative error {worst:.2e}")
    c = oracles.score_metric_consistency(args.pairs, seed)
    ok &= _report("score-metric", c.passed, f"max abs diff {c.max_abs_diff:.2e} over {c.count} pairs")
    s = oracles.selection_check(args.pools, seed)
    ok &= _report("selection", s.passed, f"worst greedy gap {s.worst_gap:.3%}, exact mismatches {s.exact_mismatches}")
    print(f"seed {seed}")
    return 0 if ok else 1


def _report(name: str, passed: bool, detail: str) -> bool:
    print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return passed


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypotrack", description="Hypothesis-growing multi-object tracker")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("-v", "--verbose", action="store_true")

    def engine_flags(sp):
        sp.add_argument("--fps", type=float)
        sp.add_argument("--batch-seconds", type=float)
        sp.add_argument("--fast-cutoff", type=float)
        sp.add_argument("--selection", choices=["greedy", "exact"])
        sp.add_argument("--pruning", choices=["paper", "score", "count"])
        sp.add_argument("--autocontext", action="store_true")

    t = sub.add_parser("track", help="track one sequence")
    common(t)
    engine_flags(t)
    t.add_argument("--detections")
    t.add_argument("--gt", help="unused by tracking; accepted for symmetry")
    t.add_argument("--embeddings")
    t.add_argument("--model", help="checkpoint; without one the IoU baseline scorer is used")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_track)

    tr = sub.add_parser("train", help="train the scorer")
    common(tr)
    engine_flags(tr)
    tr.add_argument("--detections", nargs="+")
    tr.add_argument("--gt", nargs="+")
    tr.add_argument("--embeddings")
    tr.add_argument("--synth", type=int, metavar="N", help="train on N synthetic scenes")
    tr.add_argument("--out", required=True, help="output directory")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score results against ground truth")
    common(e)
    e.add_argument("--results")
    e.add_argument("--gt")
    e.add_argument("--out", help="CSV report path")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic sequence")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--people", type=int, default=6)
    s.add_argument("--pattern", choices=["crossing", "linear"], default="crossing")
    s.add_argument("--noise", type=float, default=2.0)
    s.add_argument("--miss-rate", type=float, default=0.1)
    s.add_argument("--fp-rate", type=float, default=0.05)
    s.add_argument("--frames", type=int, default=36)
    s.set_defaults(func=cmd_synth)

    o = sub.add_parser("oracle", help="run the brute-force verifiers")
    common(o)
    o.add_argument("--instances", type=int, default=10)
    o.add_argument("--pairs", type=int, default=1000)
    o.add_argument("--pools", type=int, default=20)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError, FileNotFoundError) as e:
        kind = "usage" if isinstance(e, UsageError) else type(e).__name__
        print(json.dumps({"error": str(e), "kind": kind}), file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001  - still report machine-readably
        print(json.dumps({"error": str(e), "kind": type(e).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
