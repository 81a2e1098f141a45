"""Command-line entry point: ``regiontok <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, bad config, dimension
mismatch, failed gate), 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .encoder import RegionToken, make_grid
from .evaluation import (
    accuracy,
    localization_queries,
    localization_recall,
    miou,
    oracle_image_tokens,
    oracle_point_tokens,
    oracle_tracks,
    ovss,
    ovss_from_text_tokens,
    parse_miou,
    planted_haystack,
    random_video,
    run_haystack,
)
from .merging import merge_tokens
from .pipeline import VARIANTS, Pipeline
from .store import (
    FormatError,
    load_features,
    load_tokens,
    load_weights,
    merged_from_store,
    save_features,
    save_tokens,
    sniff,
    store_from_merged,
    store_from_regions,
    store_from_tracks,
)
from .synth import ingest_features
from .sweep import SWEEP_PARAMS, SWEEP_TASKS, format_table, sweep
from .tracker import finalize, track_video
from .training.gradcheck import GRAD_TOL, run_suite
from .training.trainer import Trainer, load_checkpoint, make_world, save_checkpoint, train_scene

log = logging.getLogger("regiontok")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

# held-out seed bases, disjoint from the hashed training stream
OVSS_SEED = 1_000_000
HAYSTACK_SEED = 5_000_000
VIDEO_SEED = 6_000_000
DATA_SEED = 7_000_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_values(text: str) -> list[float]:
    """Comma list; ``a,b,...,z`` expands arithmetically with step b - a."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if "..." in parts:
        i = parts.index("...")
        if i < 2 or i != len(parts) - 2:
            raise UsageError("ellipsis needs two leading values and one final value")
        a, b, z = float(parts[i - 2]), float(parts[i - 1]), float(parts[-1])
        step = b - a
        if step == 0 or (z - a) / step < 0:
            raise UsageError(f"cannot expand {text!r}")
        n = int(round((z - a) / step))
        return [float(v) for v in parts[: i - 2]] + [round(a + j * step, 10) for j in range(n + 1)]
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"bad --values: {exc}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="key=value run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="torch intra-op threads (1 = bit-reproducible)")
    p.add_argument("--out", metavar="PATH", help="output file or directory")
    p.add_argument("--plot-data", action="store_true", help="also dump (x, y) series")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    return p


def _model_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--weights", metavar="PATH", help="trained checkpoint (RENW)")
    g.add_argument("--oracle", action="store_true", help="substitute ground-truth tokens")
    p.add_argument("--count", type=int, default=None, help="number of evaluation items")
    p.add_argument("--no-merging", action="store_true", help="disable in-frame merging")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="regiontok", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic scenes or videos")
    p.add_argument("--kind", choices=("scene", "video"), default="scene")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--frames", type=int, default=8)

    p = sub.add_parser("train", parents=[common], help="train the region encoder")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--variant", default="full")
    p.add_argument("--log", metavar="PATH", help="line-delimited loss records")

    p = sub.add_parser("encode", parents=[common], help="features -> region tokens")
    p.add_argument("--weights", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--frame", type=int, default=1)
    p.add_argument("--prompt-grid", type=int, default=0)

    p = sub.add_parser("merge", parents=[common], help="region tokens -> merged tokens")
    p.add_argument("--tokens", nargs="+", required=True)

    p = sub.add_parser("track", parents=[common], help="merged tokens over frames -> tracks")
    p.add_argument("--tokens", nargs="+", required=True)

    for name in ("eval-ovss", "eval-haystack", "eval-localize", "eval-parse"):
        p = sub.add_parser(name, parents=[common], help=f"{name[5:]} protocol")
        _model_flags(p)
        if name in ("eval-localize", "eval-parse"):
            p.add_argument("--frames", type=int, default=8)
        if name == "eval-ovss":
            p.add_argument("--features", help="score one FEAT file instead of synthetic scenes (labels printed)")

    p = sub.add_parser("sweep", parents=[common], help="threshold / grid / k sweep")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True)
    p.add_argument("--task", required=True, choices=SWEEP_TASKS)
    p.add_argument("--weights")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--frames", type=int, default=6)

    p = sub.add_parser("ablate", parents=[common], help="train and score one ablation variant")
    p.add_argument("--variant", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--no-merging", action="store_true")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--batches", type=int, default=20)

    p = sub.add_parser("inspect", parents=[common], help="summarize a FEAT/RTOK/RENW file")
    p.add_argument("path")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.set:
        text = cfg.to_text() + "".join(s + "\n" for s in args.set)
        cfg = RunConfig.from_text(text)
    return cfg.replace(**changes) if changes else cfg


def _emit(record: dict, out: str | None = None) -> None:
    line = json.dumps(record, sort_keys=True)
    if out:
        Path(out).write_text(line + "\n")
    print(line)


def _plot(xs, ys) -> None:
    for x, y in zip(xs, ys):
        print(f"{x:g} {y:.6g}")


def _normalize_variant(v: str) -> str:
    v = {"k=1": "k1"}.get(v, v)
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {v!r}; choose from {VARIANTS}")
    return v


def _pipeline(args, cfg, world):
    if args.weights:
        model, wcfg, _ = load_checkpoint(args.weights)
        model.set_text_map(world.align)
        if wcfg.d != cfg.d:
            raise ConfigError(f"checkpoint d={wcfg.d} but config d={cfg.d}")
    else:
        from .training.trainer import build_model

        model = build_model(cfg, world)
        model.eval()
        log.warning("no --weights given; evaluating an untrained encoder")
    return Pipeline(model, cfg.merge(), cfg.track(), merging_enabled=not getattr(args, "no_merging", False),
                    prompt_grid=cfg.ovss_grid)


# ---- subcommands ----

def cmd_gen_data(args, cfg):
    world = make_world(cfg)
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    vocab = [{"id": c.id, "cluster": c.cluster_id, "encoding": c.text_encoding.tolist()}
             for c in world.vocab.categories]
    (out / "vocab.json").write_text(json.dumps({"d": world.d, "categories": vocab}, sort_keys=True) + "\n")
    written = []
    for i in range(args.count):
        seed = DATA_SEED + cfg.seed * 10_000 + i
        if args.kind == "scene":
            scene = train_scene(cfg, world, seed)
            save_features(out / f"scene_{i:03d}.feat", scene.grid)
            desc = _describe(scene.regions, scene.labels, scene.h, scene.w)
            desc["layout"] = [_spec(s) for s in scene.layout]
            (out / f"scene_{i:03d}.json").write_text(json.dumps(desc, sort_keys=True) + "\n")
            written.append(f"scene_{i:03d}")
        else:
            video = random_video(world, seed, T=args.frames, grid=cfg.train_grid,
                                 num_regions=cfg.min_regions, noise_std=cfg.noise_std)
            vdir = out / f"video_{i:03d}"
            vdir.mkdir(exist_ok=True)
            frames = []
            for t, f in enumerate(video.frames, 1):
                save_features(vdir / f"frame_{t:03d}.feat", f.grid)
                frames.append(_describe(f.regions, f.labels, f.grid.h, f.grid.w))
            desc = {"frames": frames, "events": video.events, "layout": [_spec(s) for s in video.scene.layout],
                    "windows": {str(k): v for k, v in video.windows().items()}}
            (out / f"video_{i:03d}.json").write_text(json.dumps(desc, sort_keys=True) + "\n")
            written.append(f"video_{i:03d}")
    _emit({"command": "gen-data", "kind": args.kind, "written": written, "dir": str(out)})


def _describe(regions, labels, h, w) -> dict:
    return {
        "h": h, "w": w,
        "labels": np.asarray(labels).tolist(),
        "regions": [{"region_id": r.region_id, "category_id": r.category_id, "cluster_id": r.category_cluster_id,
                     "patches": np.flatnonzero(r.mask).tolist()} for r in regions],
    }


def _spec(s) -> dict:
    return {"id": s.id, "category_id": s.category_id, "kind": s.kind, "rect": list(s.rect), "parent": s.parent}


def cmd_train(args, cfg):
    variant = _normalize_variant(args.variant)
    steps = cfg.total_steps if args.steps is None else args.steps
    trainer = Trainer(cfg, variant=variant)
    log_file = open(args.log, "w") if args.log else None
    try:
        history = trainer.fit(steps, log_file)
    finally:
        if log_file:
            log_file.close()
    out = args.out or "model.renw"
    save_checkpoint(out, trainer.model, cfg, variant)
    if args.plot_data:
        _plot([h["step"] for h in history], [h["total"] for h in history])
    last = history[-1] if history else {}
    _emit({"command": "train", "variant": variant, "steps": steps, "checkpoint": out,
           **{k: v for k, v in last.items() if k != "step"}})


def cmd_encode(args, cfg):
    model, _, _ = load_checkpoint(args.weights)
    grid = ingest_features(args.features, expected_d=model.cfg.d)
    n = args.prompt_grid
    prompts = make_grid(n, n) if n else make_grid(grid.h, grid.w)
    tokens = model.encode(grid, prompts)
    out = args.out or "region.rtok"
    save_tokens(out, store_from_regions(tokens, grid.num_patches, args.frame, cfg.binarize_level))
    _emit({"command": "encode", "tokens": len(tokens), "frame": args.frame, "out": out})


def cmd_merge(args, cfg):
    sets, n_patches = [], None
    for path in args.tokens:
        store = load_tokens(path)
        if store.kind != "region":
            raise ConfigError(f"{path}: expected a region-token store, got {store.kind!r}")
        frames = {}
        for rec in store.records:
            fid = rec.frame_span[0]
            x, y, q = rec.members[0] if rec.members else (0.0, 0.0, 0)
            mask = rec.footprints.get(fid, np.zeros(store.n_patches, bool)).astype(np.float64)
            frames.setdefault(fid, []).append(RegionToken(rec.vector, mask, (x, y), q))
        for fid, toks in sorted(frames.items()):
            sets.append(merge_tokens(toks, cfg.merge(), fid))
        n_patches = store.n_patches
    out = args.out or "merged.rtok"
    save_tokens(out, store_from_merged(sets, n_patches))
    _emit({"command": "merge", "frames": [s.frame_id for s in sets], "tokens": [len(s) for s in sets], "out": out})


def cmd_track(args, cfg):
    sets, n_patches = [], None
    for path in args.tokens:
        store = load_tokens(path)
        if store.kind != "merged":
            raise ConfigError(f"{path}: expected a merged-token store, got {store.kind!r}")
        sets.extend(merged_from_store(store))
        n_patches = store.n_patches
    sets.sort(key=lambda s: s.frame_id)
    tracks = finalize(track_video(sets, cfg.track()))
    out = args.out or "tracks.rtok"
    save_tokens(out, store_from_tracks(tracks, n_patches))
    total = sum(len(s) for s in sets)
    _emit({"command": "track", "frames": len(sets), "merged_tokens": total, "tracks": len(tracks),
           "compression": n_patches * len(sets) / max(len(tracks), 1), "out": out})


def cmd_eval_ovss(args, cfg):
    world = make_world(cfg)
    enc = world.vocab.encodings()
    if args.features:
        pipe = _pipeline(args, cfg, world)
        grid = ingest_features(args.features, expected_d=cfg.d)
        labels, m = ovss(pipe, grid, enc, None, None, cfg.eval())
        _emit({"command": "eval-ovss", "labels": labels.tolist(), "compression": m.compression}, args.out)
        return
    n = args.count or 50
    pipe = None if args.oracle else _pipeline(args, cfg, world)
    mious, accs = [], []
    for i in range(n):
        scene = train_scene(cfg, world, OVSS_SEED + i, noise_std=0.0)
        if args.oracle:
            labels = ovss_from_text_tokens(oracle_point_tokens(scene), enc, scene.h, scene.w)
        else:
            labels, _ = ovss(pipe, scene.grid, enc, None, None, cfg.eval())
        mious.append(miou(labels, scene.labels))
        accs.append(accuracy(labels, scene.labels))
    if args.plot_data:
        _plot(range(n), accs)
    _emit({"command": "eval-ovss", "scenes": n, "oracle": bool(args.oracle),
           "miou": float(np.mean(mious)), "accuracy": float(np.mean(accs))}, args.out)


def cmd_eval_haystack(args, cfg):
    world = make_world(cfg)
    n = args.count or 50
    cases = [planted_haystack(world, HAYSTACK_SEED + i, cfg.haystack_db, cfg.train_grid) for i in range(n)]
    token_fn = oracle_image_tokens if args.oracle else _pipeline(args, cfg, world).image_text_tokens
    m = run_haystack(cases, token_fn, cfg.tau_sim_haystack)
    _emit({"command": "eval-haystack", "queries": n, "oracle": bool(args.oracle), "accuracy": m.accuracy,
           "recall_at_1": m.recall_at_1, "compression": m.compression, **m.extra}, args.out)


def _video_eval(args, cfg, scorer, name, metric):
    world = make_world(cfg)
    n = args.count or 20
    pipe = None if args.oracle else _pipeline(args, cfg, world)
    scores, n_tracks, patches = [], 0, 0
    for i in range(n):
        video = random_video(world, VIDEO_SEED + i, T=args.frames, grid=cfg.train_grid)
        if args.oracle:
            tracks = oracle_tracks(video, cfg.track())
        else:
            tracks = pipe.video_tracks([f.grid for f in video.frames])
        n_tracks += len(tracks)
        patches += video.scene.grid.num_patches * video.T
        scores.append(scorer(tracks, video))
    valid = [s for s in scores if not np.isnan(s)]
    if args.plot_data:
        _plot(range(n), scores)
    _emit({"command": name, "videos": n, "oracle": bool(args.oracle),
           metric: float(np.mean(valid)) if valid else None,
           "tracks": n_tracks, "compression": patches / max(n_tracks, 1)}, args.out)


def cmd_eval_localize(args, cfg):
    _video_eval(args, cfg, lambda tr, v: localization_recall(tr, localization_queries(v), cfg.tau_sim_video),
                "eval-localize", "recall")


def cmd_eval_parse(args, cfg):
    _video_eval(args, cfg, parse_miou, "eval-parse", "miou")


def cmd_sweep(args, cfg):
    values = parse_values(args.values)
    if args.param in ("grid_size", "k"):
        values = [int(v) for v in values]
    world = make_world(cfg)
    model = None
    if args.weights:
        model, _, _ = load_checkpoint(args.weights)
        model.set_text_map(world.align)
    rows = sweep(args.param, values, args.task, cfg, model, world, items=args.count, T=args.frames)
    table = format_table(args.param, args.task, rows)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    if args.plot_data:
        _plot([r.value for r in rows], [r.metric for r in rows])


def cmd_ablate(args, cfg):
    variant = _normalize_variant(args.variant)
    world = make_world(cfg)
    trainer = Trainer(cfg, world, variant=variant)
    trainer.fit(cfg.total_steps if args.steps is None else args.steps)
    pipe = Pipeline(trainer.model, cfg.merge(), cfg.track(), merging_enabled=not args.no_merging,
                    prompt_grid=cfg.ovss_grid)
    enc = world.vocab.encodings()
    accs = []
    for i in range(args.count):
        scene = train_scene(cfg, world, OVSS_SEED + i, noise_std=0.0)
        labels, _ = ovss(pipe, scene.grid, enc, None, None, cfg.eval())
        accs.append(accuracy(labels, scene.labels))
    cases = [planted_haystack(world, HAYSTACK_SEED + i, cfg.haystack_db, cfg.train_grid) for i in range(args.count)]
    hay = run_haystack(cases, pipe.image_text_tokens, cfg.tau_sim_haystack)
    if args.out:
        save_checkpoint(args.out, trainer.model, cfg, variant)
    _emit({"command": "ablate", "variant": variant, "merging": not args.no_merging,
           "ovss_accuracy": float(np.mean(accs)), "haystack_accuracy": hay.accuracy,
           "tokens_per_image": hay.extra["tokens_per_image"]})


def cmd_grad_check(args, cfg):
    worst = run_suite(cfg.seed, args.batches)
    for name, err in worst.items():
        print(f"{name}\t{err:.3e}")
    ok = all(e < GRAD_TOL for e in worst.values())
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_inspect(args, cfg):
    kind = sniff(args.path)
    info: dict = {"path": args.path, "format": kind}
    if kind == "FEAT":
        g = load_features(args.path)
        info.update(h=g.h, w=g.w, d=g.d)
    elif kind == "RTOK":
        s = load_tokens(args.path)
        frames = sorted({f for r in s.records for f in range(r.frame_span[0], r.frame_span[1] + 1)})
        info.update(kind=s.kind, d=s.d, n_patches=s.n_patches, records=len(s.records), frames=len(frames))
    elif kind == "RENW":
        tensors, text = load_weights(args.path)
        info.update(tensors={k: list(v.shape) for k, v in tensors.items()},
                    parameters=int(sum(v.size for v in tensors.values())),
                    config=[line for line in text.splitlines() if line.startswith("#")])
    else:
        raise FormatError(f"{args.path}: unrecognized magic")
    _emit(info)


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "encode": cmd_encode, "merge": cmd_merge, "track": cmd_track,
    "eval-ovss": cmd_eval_ovss, "eval-haystack": cmd_eval_haystack, "eval-localize": cmd_eval_localize,
    "eval-parse": cmd_eval_parse, "sweep": cmd_sweep, "ablate": cmd_ablate, "grad-check": cmd_grad_check,
    "inspect": cmd_inspect,
}


def _setup_logging() -> None:
    level = os.environ.get("REN_LOG", "error").lower()
    logging.basicConfig(level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(cfg.threads)
        code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
