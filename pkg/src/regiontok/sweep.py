"""Threshold / grid / k sweeps over the evaluation protocols."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .evaluation import (
    localization_queries,
    localization_recall,
    ovss,
    parse_miou,
    planted_haystack,
    random_video,
    run_haystack,
)
from .pipeline import Pipeline
from .tracker import finalize, track_video
from .training.trainer import build_model, make_world, train_scene

SWEEP_PARAMS = ("tau_mask", "tau_token", "tau_track", "grid_size", "k")
SWEEP_TASKS = ("ovss", "haystack", "localize", "parse")


class UnknownSweepParameter(ValueError):
    pass


@dataclass
class SweepRow:
    value: float
    metric: float
    tokens: float
    extra: dict = field(default_factory=dict)


def _pipeline_for(parameter, value, cfg: RunConfig, model, world):
    if parameter in ("tau_mask", "tau_token", "tau_track"):
        cfg = cfg.replace(**{parameter: float(value)})
    elif parameter == "k":
        cfg = cfg.replace(k=int(value))
        if model is None or model.cfg.k != cfg.k:
            model = build_model(cfg, world)
            model.eval()
    elif parameter == "grid_size":
        cfg = cfg.replace(ovss_grid=int(value))
    if model is None:
        model = build_model(cfg, world)
        model.eval()
    return Pipeline(model, cfg.merge(), cfg.track(), prompt_grid=cfg.ovss_grid), cfg


def sweep(parameter: str, values, task: str, cfg: RunConfig | None = None, model=None, world=None,
          items: int = 4, T: int = 6) -> list[SweepRow]:
    """Re-run ``task`` once per value of ``parameter``.

    Without a trained ``model`` a freshly initialized one is used; a ``k``
    sweep builds a fresh model whenever the checkpoint's k differs.
    """
    if parameter not in SWEEP_PARAMS:
        raise UnknownSweepParameter(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMS}")
    if task not in SWEEP_TASKS:
        raise UnknownSweepParameter(f"unknown sweep task {task!r}; choose from {SWEEP_TASKS}")
    cfg = cfg or RunConfig()
    world = world or make_world(cfg)
    g = cfg.train_grid
    rows = []
    for value in values:
        pipe, vcfg = _pipeline_for(parameter, value, cfg, model, world)
        if task == "ovss":
            enc = world.vocab.encodings()
            scores, tokens = [], []
            for i in range(items):
                scene = train_scene(vcfg, world, 2_000_000 + cfg.seed * 1000 + i, noise_std=0.0)
                _, m = ovss(pipe, scene.grid, enc, None, scene.labels, vcfg.eval())
                scores.append(m.miou)
                tokens.append(scene.grid.num_patches / m.compression)
            rows.append(SweepRow(value, float(np.mean(scores)), float(np.mean(tokens))))
        elif task == "haystack":
            cases = [planted_haystack(world, 3_000_000 + cfg.seed * 1000 + i, cfg.haystack_db, g) for i in range(items)]
            m = run_haystack(cases, pipe.image_text_tokens, vcfg.tau_sim_haystack)
            rows.append(SweepRow(value, m.accuracy, m.extra["tokens_per_image"]))
        else:
            scores, per_frame, n_tracks = [], [], 0
            for i in range(items):
                video = random_video(world, 4_000_000 + cfg.seed * 1000 + i, T=T, grid=g)
                frames = [pipe.merged(f.grid, t + 1) for t, f in enumerate(video.frames)]
                per_frame.extend(len(f) for f in frames)
                tracks = finalize(track_video(frames, vcfg.track()), pipe.text)
                n_tracks += len(tracks)
                if task == "parse":
                    scores.append(parse_miou(tracks, video))
                else:
                    scores.append(localization_recall(tracks, localization_queries(video), vcfg.tau_sim_video))
            metric = float(np.nanmean(scores)) if not np.all(np.isnan(scores)) else float("nan")
            rows.append(SweepRow(value, metric, float(np.mean(per_frame)), {"tracks": n_tracks}))
    return rows


def format_table(parameter: str, task: str, rows: list[SweepRow]) -> str:
    head = [parameter, task, "tokens"] + sorted({k for r in rows for k in r.extra})
    lines = ["\t".join(head)]
    for r in rows:
        extra = [str(r.extra.get(k, "")) for k in head[3:]]
        lines.append("\t".join([f"{r.value:g}", f"{r.metric:.4f}", f"{r.tokens:.2f}", *extra]))
    return "\n".join(lines) + "\n"
