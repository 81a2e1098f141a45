"""Inference protocols and metrics: OVSS, haystack retrieval, video query
localization, video scene parsing, compression accounting and sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import FeatureGrid, make_grid
from .merging import MergedToken, MergedTokenSet
from .numerics import cosine_matrix
from .synth import GroundTruthRegion, SynthScene, SynthWorld, gen_scene, gen_video
from .tracker import FinalTrack, finalize, track_video

log = logging.getLogger(__name__)

VOID = -1


@dataclass
class EvalConfig:
    tau_sim_haystack: float = 0.23
    tau_sim_video: float = 0.18
    ovss_grid: int = 0
    merging_enabled: bool = True
    k_override: int | None = None

    def __post_init__(self):
        for name in ("tau_sim_haystack", "tau_sim_video"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} outside (0, 1)")


@dataclass
class Metrics:
    miou: float | None = None
    recall_at_1: float | None = None
    tiou: float | None = None
    compression: float | None = None
    accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "extra" and v is not None}
        return {**out, **self.extra}


# ---- metrics ----

def miou(pred, gt, void: int = VOID) -> float:
    """Mean IoU over classes present in prediction or ground truth; void patches ignored."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = (gt != void) & (pred != void)
    pred, gt = pred[keep], gt[keep]
    classes = np.union1d(np.unique(pred), np.unique(gt))
    if len(classes) == 0:
        return float("nan")
    ious = [np.count_nonzero((pred == c) & (gt == c)) / np.count_nonzero((pred == c) | (gt == c)) for c in classes]
    return float(np.mean(ious))


def accuracy(pred, gt, void: int = VOID) -> float:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt != void
    return float(np.mean(pred[keep] == gt[keep]))


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """IoU of two intervals given as (start, end) with start <= end."""
    if a[0] > a[1] or b[0] > b[1]:
        raise ValueError("interval start after end")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union == 0:
        return 1.0 if tuple(a) == tuple(b) else 0.0
    return inter / union


def frame_tiou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """tIoU of inclusive frame spans, each frame covering one unit of time."""
    return tiou((a[0], a[1] + 1), (b[0], b[1] + 1))


def compression_ratio(baseline_tokens: int, actual_tokens: int) -> float:
    if actual_tokens <= 0:
        raise ValueError("actual token count must be positive")
    return baseline_tokens / actual_tokens


# ---- OVSS ----

def upsample_logits(logits: np.ndarray, h: int, w: int) -> np.ndarray:
    """(rows, cols, C) -> (h, w, C): nearest when the grid divides evenly, bilinear otherwise."""
    rows, cols, _ = logits.shape
    if h % rows == 0 and w % cols == 0:
        return np.repeat(np.repeat(logits, h // rows, axis=0), w // cols, axis=1)
    ys = np.clip((np.arange(h) + 0.5) * rows / h - 0.5, 0, rows - 1)
    xs = np.clip((np.arange(w) + 0.5) * cols / w - 0.5, 0, cols - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, rows - 1), np.minimum(x0 + 1, cols - 1)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    top = logits[y0][:, x0] * (1 - fx) + logits[y0][:, x1] * fx
    bot = logits[y1][:, x0] * (1 - fx) + logits[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def ovss_from_text_tokens(point_tokens: np.ndarray, class_encodings: np.ndarray, h: int, w: int) -> np.ndarray:
    """point_tokens (rows, cols, d) -> class index per patch, row-major (h*w,)."""
    if len(class_encodings) == 0:
        raise ValueError("empty class set")
    rows, cols, d = point_tokens.shape
    logits = cosine_matrix(point_tokens.reshape(-1, d), class_encodings).reshape(rows, cols, -1)
    return upsample_logits(logits, h, w).argmax(axis=-1).reshape(-1)


def ovss(pipeline, grid: FeatureGrid, class_encodings, class_ids=None, gt_labels=None,
         cfg: EvalConfig | None = None) -> tuple[np.ndarray, Metrics]:
    """Per-patch labels from the k-averaged text tokens at each prompt (no merging)."""
    cfg = cfg or EvalConfig()
    class_encodings = np.asarray(class_encodings, dtype=np.float64)
    class_ids = np.arange(len(class_encodings)) if class_ids is None else np.asarray(class_ids)
    rows = cols = cfg.ovss_grid
    if not rows:
        rows, cols = grid.h, grid.w
    tokens = pipeline.model.encode(grid, make_grid(rows, cols))
    text = pipeline.text(np.stack([t.vector for t in tokens]))
    k = len(tokens) // (rows * cols)
    point_tokens = text.reshape(rows, cols, k, -1).mean(axis=2)
    labels = class_ids[ovss_from_text_tokens(point_tokens, class_encodings, grid.h, grid.w)]
    m = Metrics(compression=compression_ratio(grid.num_patches, len(tokens)))
    if gt_labels is not None:
        m.miou = miou(labels, gt_labels)
        m.accuracy = accuracy(labels, gt_labels)
    return labels, m


def oracle_point_tokens(scene: SynthScene) -> np.ndarray:
    """(h, w, d) text-space target of the innermost region under each patch."""
    world = scene.world
    out = np.zeros((scene.grid.num_patches, world.d))
    size = np.full(scene.grid.num_patches, np.inf)
    for r in scene.regions:
        n = r.mask.sum()
        sel = r.mask & (n < size)
        out[sel] = world.to_text(scene.grid.tokens[r.mask].astype(np.float64).mean(axis=0))
        size[sel] = n
    return out.reshape(scene.h, scene.w, -1)


# ---- haystack ----

def haystack_query(db: list[np.ndarray], anchor_enc, target_enc, tau: float = 0.23) -> tuple[int, bool]:
    """Retrieve the image holding the best anchor match, then threshold the target match there."""
    if not db:
        raise ValueError("empty database")
    best = []
    for toks in db:
        toks = np.asarray(toks)
        best.append(cosine_matrix(toks, anchor_enc).max() if len(toks) else -np.inf)
    image = int(np.argmax(best))  # first maximum = lowest image id on ties
    toks = np.asarray(db[image])
    score = cosine_matrix(toks, target_enc).max() if len(toks) else -np.inf
    return image, bool(score > tau)


@dataclass
class HaystackCase:
    scenes: list[SynthScene]
    anchor_category: int
    target_category: int
    answer_image: int
    answer_yes: bool


def planted_haystack(world: SynthWorld, seed: int, D: int = 10, grid: int = 8, min_regions: int = 2,
                     max_regions: int = 4, noise_std: float = 0.0, present: bool | None = None) -> HaystackCase:
    """D scenes; the anchor's cluster appears only in one of them, the target may or may not."""
    rng = np.random.default_rng(seed)
    vocab = world.vocab
    nc = vocab.num_clusters
    if nc < 3:
        raise ValueError("haystack construction needs at least 3 clusters")
    by_cluster: dict[int, list[int]] = {}
    for c in vocab.categories:
        by_cluster.setdefault(c.cluster_id, []).append(c.id)
    anchor_cl, target_cl = (int(x) for x in rng.choice(nc, size=2, replace=False))
    anchor = int(rng.choice(by_cluster[anchor_cl]))
    target = int(rng.choice(by_cluster[target_cl]))
    yes = bool(rng.integers(2)) if present is None else present
    answer = int(rng.integers(D))
    scenes = []
    for i in range(D):
        n = int(rng.integers(min_regions, max_regions + 1))
        if i == answer:
            must = [anchor] + ([target] if yes else [])
            banned = {anchor_cl} | ({target_cl} if not yes else set())
            banned |= {vocab.cluster_of(c) for c in must}
        else:
            must, banned = [], {anchor_cl}
        pool = [c for c in range(nc) if c not in banned]
        fill = [int(rng.choice(by_cluster[int(rng.choice(pool))])) for _ in range(max(0, n - len(must)))]
        cats = fill + must if fill else must
        if len(cats) < 2:
            cats = [int(rng.choice(by_cluster[int(rng.choice(pool))]))] + cats
        scenes.append(gen_scene(grid, grid, len(cats), 0, world.d, noise_std, int(rng.integers(2**31)), world, cats))
    return HaystackCase(scenes, anchor, target, answer, yes)


def oracle_image_tokens(scene: SynthScene) -> np.ndarray:
    return np.stack([scene.world.to_text(scene.grid.tokens[r.mask].astype(np.float64).mean(axis=0))
                     for r in scene.regions])


def run_haystack(cases: list[HaystackCase], token_fn, tau: float = 0.23) -> Metrics:
    """``token_fn(scene) -> (M, d)`` text tokens. A query counts only if image and answer are right."""
    correct = retrieved = tokens = images = 0
    for case in cases:
        db = [token_fn(s) for s in case.scenes]
        enc = case.scenes[0].world.vocab.encodings()
        image, yes = haystack_query(db, enc[case.anchor_category], enc[case.target_category], tau)
        retrieved += image == case.answer_image
        correct += image == case.answer_image and yes == case.answer_yes
        tokens += sum(len(t) for t in db)
        images += len(db)
    n = len(cases)
    patches = cases[0].scenes[0].grid.num_patches
    return Metrics(recall_at_1=retrieved / n, accuracy=correct / n,
                   compression=compression_ratio(patches * images, max(tokens, 1)),
                   extra={"tokens_per_image": tokens / images})


# ---- video ----

def localize_query(tracks: list[FinalTrack], visual_query, text_query, tau: float = 0.18) -> tuple[int, int] | None:
    """Span of the last-ending track whose visual x textual similarity exceeds ``tau``."""
    if not tracks:
        return None
    vis = cosine_matrix(np.stack([t.track_token for t in tracks]), visual_query)[:, 0]
    txt = cosine_matrix(np.stack([t.text_token for t in tracks]), text_query)[:, 0]
    keep = [t for t, s in zip(tracks, vis * txt) if s > tau]
    if not keep:
        return None
    best = min(keep, key=lambda t: (-t.frame_span[1], -t.frame_span[0], t.id))
    return best.frame_span


def scene_parse(tracks: list[FinalTrack], class_encodings, class_ids=None, n_frames: int | None = None,
                n_patches: int | None = None) -> np.ndarray:
    """(T, N) labels; each track's best class is written over its footprints, lower id first."""
    class_encodings = np.asarray(class_encodings, dtype=np.float64)
    class_ids = np.arange(len(class_encodings)) if class_ids is None else np.asarray(class_ids)
    if n_frames is None:
        n_frames = max((t.frame_span[1] for t in tracks), default=0)
    if n_patches is None:
        n_patches = next(len(m) for t in tracks for m in t.footprints.values() if m is not None)
    labels = np.full((n_frames, n_patches), VOID, dtype=int)
    for t in sorted(tracks, key=lambda t: t.id):
        cls = class_ids[int(np.argmax(cosine_matrix(t.text_token, class_encodings)[0]))]
        for frame, fp in t.footprints.items():
            if fp is None:
                continue
            row = labels[frame - 1]
            row[(row == VOID) & fp] = cls
    return labels


def oracle_merged(regions: list[GroundTruthRegion], grid: FeatureGrid, frame_id: int) -> MergedTokenSet:
    """One merged token per visible region (innermost first), vectors mask-pooled from the grid."""
    toks = []
    for r in sorted(regions, key=lambda r: (r.mask.sum(), r.region_id)):
        toks.append(MergedToken(grid.tokens[r.mask].astype(np.float64).mean(axis=0), [], [], r.mask.copy()))
    return MergedTokenSet(toks, frame_id)


@dataclass
class SynthVideo:
    scene: SynthScene
    frames: list
    events: list[dict]

    @property
    def T(self) -> int:
        return len(self.frames)

    def windows(self) -> dict[int, list[tuple[int, int]]]:
        """Per region id, maximal 1-based frame windows in which it is actually rendered.

        Usually identical to the event schedule; differs only where a region is
        occluded or pushed off the grid while scheduled visible.
        """
        out: dict[int, list[tuple[int, int]]] = {}
        for s in self.scene.layout:
            shown = [any(r.region_id == s.id for r in f.regions) for f in self.frames]
            wins, start = [], None
            for t, v in enumerate(shown + [False], 1):
                if v and start is None:
                    start = t
                elif not v and start is not None:
                    wins.append((start, t - 1))
                    start = None
            out[s.id] = wins
        return out


def random_video(world: SynthWorld, seed: int, T: int = 8, grid: int = 8, num_regions: int = 4,
                 noise_std: float = 0.0, parts_per_region: int = 0) -> SynthVideo:
    """A scene whose objects randomly appear late, leave early, or shift."""
    rng = np.random.default_rng(seed)
    scene = gen_scene(grid, grid, num_regions, parts_per_region, world.d, noise_std, int(rng.integers(2**31)), world)
    events = []
    for s in scene.layout:
        if s.kind != "object" or T < 3:
            continue
        kind = rng.choice(["static", "appear", "disappear", "shift"])
        if kind == "appear":
            events.append({"kind": "appear", "region": s.id, "frame": int(rng.integers(2, T + 1))})
        elif kind == "disappear":
            events.append({"kind": "disappear", "region": s.id, "frame": int(rng.integers(2, T + 1))})
        elif kind == "shift":
            frame = int(rng.integers(2, T + 1))
            dx = int(rng.choice([-1, 1]))
            _, c0, _, c1 = s.rect

            def on_grid(dx):
                return c0 + dx >= 0 and c1 + dx <= grid

            if not on_grid(dx):
                dx = -dx
            if on_grid(dx):
                events.append({"kind": "shift", "region": s.id, "frame": frame, "dx": dx, "dy": 0})
    return SynthVideo(scene, gen_video(scene, T, events), events)


def oracle_tracks(video: SynthVideo, track_cfg=None) -> list[FinalTrack]:
    frames = [oracle_merged(f.regions, f.grid, t + 1) for t, f in enumerate(video.frames)]
    return finalize(track_video(frames, track_cfg), video.scene.world.to_text)


def localization_queries(video: SynthVideo) -> list[tuple[np.ndarray, np.ndarray, tuple[int, int]]]:
    """(visual query, text query, last visibility window) for each object region seen in the video."""
    world = video.scene.world
    out = []
    wins = video.windows()
    cats_in_video = [s.category_id for s in video.scene.layout]
    for s in video.scene.layout:
        if s.kind != "object" or not wins.get(s.id):
            continue
        if cats_in_video.count(s.category_id) > 1:
            continue  # ambiguous query
        vis = [f for f in video.frames if any(r.region_id == s.id for r in f.regions)]
        if not vis:
            continue
        out.append((world.prototype(s.category_id), world.vocab.encodings()[s.category_id], wins[s.id][-1]))
    return out


def localization_recall(tracks: list[FinalTrack], queries, tau: float = 0.18, min_tiou: float = 0.25) -> float:
    """Fraction of queries whose predicted window has tIoU strictly above ``min_tiou``."""
    if not queries:
        return float("nan")
    hits = 0
    for vq, tq, window in queries:
        span = localize_query(tracks, vq, tq, tau)
        hits += span is not None and frame_tiou(span, window) > min_tiou
    return hits / len(queries)


def video_gt_labels(video: SynthVideo) -> np.ndarray:
    return np.stack([f.labels for f in video.frames])


def parse_miou(tracks: list[FinalTrack], video: SynthVideo) -> float:
    enc = video.scene.world.vocab.encodings()
    pred = scene_parse(tracks, enc, None, video.T, video.scene.grid.num_patches)
    return miou(pred, video_gt_labels(video))
