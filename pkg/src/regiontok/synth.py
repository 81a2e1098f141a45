"""Deterministic synthetic scenes, videos and vocabularies.

Stands in for a frozen vision-language backbone: each category has a text
encoding ``t_c``; its visual prototype is ``scale * A.T @ t_c`` where ``A`` is
a frozen orthogonal "alignment" map, so ``A`` sends a clean region's pooled
feature back onto its text encoding.

Layout: region 0 is a background that fills every patch not covered by an
object; objects are non-overlapping rectangles; parts are rectangles strictly
inside an object and carry ``prototype(object) + prototype(part category)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .encoder import FeatureGrid
from .numerics import cosine_matrix

INTRA_CLUSTER_MIN = 0.725
INTER_CLUSTER_MAX = 0.5


class GenerationError(ValueError):
    pass


@dataclass
class GroundTruthRegion:
    mask: np.ndarray  # bool over patches
    category_id: int
    category_cluster_id: int
    region_id: int = -1  # persistent identity within a scene/video


@dataclass
class Category:
    id: int
    cluster_id: int
    text_encoding: np.ndarray


@dataclass
class SynthVocab:
    categories: list[Category]

    def encodings(self) -> np.ndarray:
        return np.stack([c.text_encoding for c in self.categories])

    def cluster_of(self, category_id: int) -> int:
        return self.categories[category_id].cluster_id

    @property
    def num_clusters(self) -> int:
        return len({c.cluster_id for c in self.categories})

    def check(self, intra_min: float = INTRA_CLUSTER_MIN, inter_max: float = INTER_CLUSTER_MAX) -> None:
        enc = self.encodings()
        cl = np.array([c.cluster_id for c in self.categories])
        sim = cosine_matrix(enc, enc)
        same = cl[:, None] == cl[None, :]
        off = ~np.eye(len(cl), dtype=bool)
        if (sim[same & off] <= intra_min).any():
            raise GenerationError("intra-cluster similarity below bound")
        if (sim[~same] >= inter_max).any():
            raise GenerationError("inter-cluster similarity above bound")


def gen_vocab(num_clusters: int = 6, synonyms_per_cluster: int = 2, d: int = 32, seed: int = 0,
              spread: float = 0.05) -> SynthVocab:
    """Orthogonal cluster prototypes plus small per-synonym perturbations."""
    if num_clusters < 1 or synonyms_per_cluster < 1:
        raise GenerationError("need at least one cluster and one synonym")
    if num_clusters > d:
        raise GenerationError(f"{num_clusters} clusters cannot be separated in d={d}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, num_clusters)))
    cats = []
    for c in range(num_clusters):
        for _ in range(synonyms_per_cluster):
            noise = rng.normal(scale=spread, size=d) if synonyms_per_cluster > 1 else np.zeros(d)
            # keep perturbations off the cluster subspace so clusters stay orthogonal
            noise -= q @ (q.T @ noise)
            v = q[:, c] + noise
            cats.append(Category(len(cats), c, v / np.linalg.norm(v)))
    vocab = SynthVocab(cats)
    vocab.check()
    return vocab


def alignment_map(d: int, seed: int = 0) -> np.ndarray:
    """Frozen random orthogonal map from visual to text space."""
    rng = np.random.default_rng(seed + 7919)
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


@dataclass
class SynthWorld:
    vocab: SynthVocab
    align: np.ndarray
    feature_scale: float = 4.0

    @classmethod
    def create(cls, d: int = 32, num_clusters: int = 6, synonyms_per_cluster: int = 2,
               seed: int = 0, feature_scale: float = 4.0) -> "SynthWorld":
        return cls(gen_vocab(num_clusters, synonyms_per_cluster, d, seed), alignment_map(d, seed), feature_scale)

    @property
    def d(self) -> int:
        return self.align.shape[0]

    def prototype(self, category_id: int) -> np.ndarray:
        return self.feature_scale * self.align.T @ self.vocab.categories[category_id].text_encoding

    def to_text(self, visual) -> np.ndarray:
        return np.asarray(visual, dtype=np.float64) @ self.align.T


@dataclass
class RegionSpec:
    id: int
    category_id: int
    kind: str  # background | object | part
    rect: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive ends)
    parent: int | None = None


@dataclass
class SynthScene:
    grid: FeatureGrid
    regions: list[GroundTruthRegion]
    prototypes: dict[int, np.ndarray]
    noise_std: float
    seed: int
    world: SynthWorld = field(repr=False)
    layout: list[RegionSpec] = field(default_factory=list, repr=False)
    labels: np.ndarray | None = None  # innermost category per patch

    @property
    def h(self) -> int:
        return self.grid.h

    @property
    def w(self) -> int:
        return self.grid.w


def _pick_categories(world: SynthWorld, n: int, rng, avoid_clusters=()) -> list[int]:
    vocab = world.vocab
    clusters = [c for c in range(vocab.num_clusters) if c not in avoid_clusters]
    rng.shuffle(clusters)
    by_cluster: dict[int, list[int]] = {}
    for cat in vocab.categories:
        by_cluster.setdefault(cat.cluster_id, []).append(cat.id)
    out = []
    for i in range(n):
        cl = clusters[i] if i < len(clusters) else int(rng.choice(clusters))
        out.append(int(rng.choice(by_cluster[cl])))
    return out


def _random_rect(rng, h, w, min_size, max_h, max_w):
    rh = int(rng.integers(min_size, max(min_size, max_h) + 1))
    rw = int(rng.integers(min_size, max(min_size, max_w) + 1))
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    return r0, c0, r0 + rh, c0 + rw


def _overlaps(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _layout(rng, h, w, num_regions, parts_per_region, world, categories=None) -> list[RegionSpec]:
    n_obj = num_regions - 1
    min_size = 2 if parts_per_region else 1
    if h < min_size or w < min_size or n_obj * min_size * min_size >= h * w:
        raise GenerationError(f"{h}x{w} grid too small for {num_regions} regions")
    cats = categories or _pick_categories(world, num_regions, rng)
    specs = [RegionSpec(0, cats[0], "background", (0, 0, h, w))]
    placed = []
    for i in range(n_obj):
        for _ in range(2000):
            rect = _random_rect(rng, h, w, min_size, max(min_size, h // 2), max(min_size, w // 2))
            if not any(_overlaps(rect, p) for p in placed):
                break
        else:
            raise GenerationError(f"could not place {n_obj} objects on a {h}x{w} grid")
        placed.append(rect)
        specs.append(RegionSpec(i + 1, cats[i + 1], "object", rect))
    if sum((r[2] - r[0]) * (r[3] - r[1]) for r in placed) >= h * w:
        raise GenerationError("objects cover the whole grid; background would be empty")
    hosts = [s for s in specs if s.kind == "object"] or specs[:1]
    for host in list(hosts):
        r0, c0, r1, c1 = host.rect
        taken = []
        for _ in range(parts_per_region):
            for _ in range(2000):
                ph = int(rng.integers(1, r1 - r0 + 1))
                pw = int(rng.integers(1, c1 - c0 + 1))
                if ph == r1 - r0 and pw == c1 - c0:
                    continue
                pr = int(rng.integers(r0, r1 - ph + 1))
                pc = int(rng.integers(c0, c1 - pw + 1))
                rect = (pr, pc, pr + ph, pc + pw)
                if not any(_overlaps(rect, t) for t in taken):
                    break
            else:
                raise GenerationError(f"could not place {parts_per_region} parts in region {host.id}")
            taken.append(rect)
            cat = _pick_categories(world, 1, rng, avoid_clusters=(world.vocab.cluster_of(host.category_id),))[0]
            specs.append(RegionSpec(len(specs), cat, "part", rect, parent=host.id))
    return specs


def _render(specs: list[RegionSpec], h: int, w: int, visible: dict[int, bool], offsets: dict[int, tuple[int, int]],
            world: SynthWorld, noise_std: float, rng) -> tuple[FeatureGrid, list[GroundTruthRegion], np.ndarray]:
    """Paint background, objects, then parts; derive features, masks and labels."""
    by_id = {s.id: s for s in specs}
    owner = np.full((h, w), -1, dtype=int)

    def root(s):
        return s if s.parent is None else root(by_id[s.parent])

    def shown(s):
        return visible.get(s.id, True) and (s.parent is None or shown(by_id[s.parent]))

    for kind in ("background", "object", "part"):
        for s in specs:
            if s.kind != kind or not shown(s):
                continue
            dy, dx = offsets.get(root(s).id, (0, 0))
            if s.kind == "background":
                dy = dx = 0
            r0, c0, r1, c1 = s.rect
            rs, re_ = max(r0 + dy, 0), min(r1 + dy, h)
            cs, ce = max(c0 + dx, 0), min(c1 + dx, w)
            if rs < re_ and cs < ce:
                owner[rs:re_, cs:ce] = s.id
    owner = owner.reshape(-1)
    d = world.d
    feats = np.zeros((h * w, d))
    labels = np.full(h * w, -1, dtype=int)
    for s in specs:
        sel = owner == s.id
        if not sel.any():
            continue
        proto = world.prototype(s.category_id)
        if s.kind == "part":
            proto = world.prototype(by_id[s.parent].category_id) + proto
        feats[sel] = proto
        labels[sel] = s.category_id
    if noise_std > 0:
        feats = feats + rng.normal(scale=noise_std, size=feats.shape)
    regions = []
    for s in specs:
        covered = {t.id for t in specs if t.id == s.id or t.parent == s.id}
        mask = np.isin(owner, list(covered))
        if mask.any():
            regions.append(GroundTruthRegion(mask, s.category_id, world.vocab.cluster_of(s.category_id), s.id))
    return FeatureGrid(h, w, feats), regions, labels


def gen_scene(h: int = 8, w: int = 8, num_regions: int = 6, parts_per_region: int = 0, d: int = 32,
              noise_std: float = 0.05, seed: int = 0, world: SynthWorld | None = None,
              categories: list[int] | None = None) -> SynthScene:
    """One synthetic frame. ``categories`` optionally fixes background/object categories."""
    if num_regions < 1:
        raise GenerationError("num_regions must be >= 1")
    world = world or SynthWorld.create(d=d)
    if world.d != d:
        raise GenerationError(f"world dimension {world.d} != d={d}")
    rng = np.random.default_rng(seed)
    specs = _layout(rng, h, w, num_regions, parts_per_region, world, categories)
    grid, regions, labels = _render(specs, h, w, {}, {}, world, noise_std, rng)
    protos = {s.category_id: world.prototype(s.category_id) for s in specs}
    return SynthScene(grid, regions, protos, noise_std, seed, world, specs, labels)


class VideoFrame(NamedTuple):
    grid: FeatureGrid
    regions: list[GroundTruthRegion]
    labels: np.ndarray


EVENT_KINDS = ("appear", "disappear", "shift")


def _validate_events(scene: SynthScene, T: int, events: list[dict]) -> list[dict]:
    ids = {s.id for s in scene.layout}
    out = []
    for ev in events:
        kind, region, frame = ev.get("kind"), ev.get("region"), ev.get("frame")
        if kind not in EVENT_KINDS:
            raise GenerationError(f"unknown event kind {kind!r}")
        if region not in ids or region == 0:
            raise GenerationError(f"event references invalid region {region!r}")
        if not isinstance(frame, int) or not 1 <= frame <= T:
            raise GenerationError(f"event frame {frame!r} outside 1..{T}")
        out.append({"dx": 0, "dy": 0, **ev})
    return sorted(out, key=lambda e: e["frame"])


def visibility_windows(scene: SynthScene, T: int, events: list[dict]) -> dict[int, list[tuple[int, int]]]:
    """Per region id, the maximal frame windows (1-based, inclusive) in which it is scheduled visible."""
    events = _validate_events(scene, T, events)
    vis = _visibility_table(scene, T, events)
    out = {}
    for rid, flags in vis.items():
        wins, start = [], None
        for t in range(1, T + 1):
            if flags[t] and start is None:
                start = t
            if not flags[t] and start is not None:
                wins.append((start, t - 1))
                start = None
        if start is not None:
            wins.append((start, T))
        out[rid] = wins
    return out


def _visibility_table(scene, T, events):
    vis = {}
    for s in scene.layout:
        own = [e for e in events if e["region"] == s.id and e["kind"] != "shift"]
        state = not (own and own[0]["kind"] == "appear")
        flags = [False] * (T + 1)
        for t in range(1, T + 1):
            for e in own:
                if e["frame"] == t:
                    state = e["kind"] == "appear"
            flags[t] = state
        vis[s.id] = flags
    return vis


def gen_video(scene: SynthScene, T: int, events: list[dict] | None = None, seed: int | None = None) -> list[VideoFrame]:
    """Frames 1..T of a scene whose regions appear, disappear or shift per ``events``.

    Event: ``{"kind": "appear"|"disappear"|"shift", "region": id, "frame": t,
    "dx": int, "dy": int}``. ``appear`` at t means hidden before t; ``disappear``
    at t means hidden from t on; ``shift`` translates the region (and its parts)
    from t on. The background cannot be scheduled.
    """
    if T < 1:
        raise GenerationError("T must be >= 1")
    events = _validate_events(scene, T, events or [])
    vis = _visibility_table(scene, T, events)
    rng = np.random.default_rng(scene.seed + 1 if seed is None else seed)
    offsets: dict[int, tuple[int, int]] = {}
    frames = []
    for t in range(1, T + 1):
        for e in events:
            if e["frame"] == t and e["kind"] == "shift":
                dy, dx = offsets.get(e["region"], (0, 0))
                offsets[e["region"]] = (dy + e["dy"], dx + e["dx"])
        visible = {rid: flags[t] for rid, flags in vis.items()}
        grid, regions, labels = _render(scene.layout, scene.h, scene.w, visible, offsets, scene.world,
                                        scene.noise_std, rng)
        frames.append(VideoFrame(grid, regions, labels))
    return frames


def ingest_features(path, expected_d: int | None = None) -> FeatureGrid:
    """Load an externally computed FEAT file (real-backbone escape hatch)."""
    from .store import DimensionError, load_features

    grid = load_features(path)
    if expected_d is not None and grid.d != expected_d:
        raise DimensionError(f"features have d={grid.d}, model expects d={expected_d}")
    return grid
