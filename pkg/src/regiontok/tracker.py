"""Streaming temporal aggregation of merged tokens into tracks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .merging import MergedTokenSet
from .numerics import cosine_matrix


class SequencingError(ValueError):
    pass


@dataclass
class TrackConfig:
    tau_track: float = 0.65

    def __post_init__(self):
        if not 0.0 <= self.tau_track <= 1.0:
            raise ValueError(f"tau_track={self.tau_track} outside [0, 1]")


@dataclass
class Constituent:
    frame_id: int
    token_index: int
    vector: np.ndarray
    footprint: np.ndarray | None


@dataclass
class Track:
    id: int
    constituents: list[Constituent] = field(default_factory=list)
    running_vector: np.ndarray | None = None
    active: bool = True

    @property
    def frame_span(self) -> tuple[int, int]:
        return self.constituents[0].frame_id, self.constituents[-1].frame_id

    def append(self, c: Constituent) -> None:
        self.constituents.append(c)
        # exact mean of all constituents, not an EMA
        self.running_vector = np.mean([x.vector for x in self.constituents], axis=0)


@dataclass
class TrackerState:
    tracks: list[Track] = field(default_factory=list)
    current_frame: int = 0
    next_id: int = 0

    def active_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.active]


def greedy_assign(sim: np.ndarray, track_ids, tau: float) -> list[tuple[int, int]]:
    """Greedy one-to-one matching over pairs with sim > tau.

    ``sim`` is (tracks, tokens). Pairs are taken by similarity descending, then
    lower track id, then lower token index. Returns (track_row, token_col).
    """
    rows, cols = np.nonzero(sim > tau)
    order = sorted(zip(rows, cols), key=lambda rc: (-sim[rc], track_ids[rc[0]], rc[1]))
    used_r, used_c, out = set(), set(), []
    for r, c in order:
        if r not in used_r and c not in used_c:
            used_r.add(r)
            used_c.add(c)
            out.append((int(r), int(c)))
    return out


def update(state: TrackerState, frame_tokens: MergedTokenSet, cfg: TrackConfig | None = None) -> TrackerState:
    cfg = cfg or TrackConfig()
    if frame_tokens.frame_id != state.current_frame + 1:
        raise SequencingError(
            f"expected frame {state.current_frame + 1}, got {frame_tokens.frame_id}"
        )
    fid = frame_tokens.frame_id
    active = state.active_tracks()
    vectors = [np.asarray(t.vector, dtype=np.float64) for t in frame_tokens.tokens]
    matched_tokens = set()
    matched_tracks = set()
    if active and vectors:
        sim = cosine_matrix(np.stack([t.running_vector for t in active]), np.stack(vectors))
        for r, c in greedy_assign(sim, [t.id for t in active], cfg.tau_track):
            tok = frame_tokens.tokens[c]
            active[r].append(Constituent(fid, c, vectors[c], tok.union_mask))
            matched_tokens.add(c)
            matched_tracks.add(active[r].id)
    for t in active:
        if t.id not in matched_tracks:
            t.active = False
    for c, tok in enumerate(frame_tokens.tokens):
        if c in matched_tokens:
            continue
        track = Track(id=state.next_id)
        track.append(Constituent(fid, c, vectors[c], tok.union_mask))
        state.tracks.append(track)
        state.next_id += 1
    state.current_frame = fid
    return state


@dataclass
class FinalTrack:
    id: int
    track_token: np.ndarray
    text_token: np.ndarray | None
    frame_span: tuple[int, int]
    footprints: dict[int, np.ndarray]

    @property
    def num_constituents(self) -> int:
        return len(self.footprints)


def finalize(state: TrackerState, project: Callable[[np.ndarray], np.ndarray] | None = None) -> list[FinalTrack]:
    """Average-pool each track's constituents; optionally project to text space."""
    out = []
    for t in state.tracks:
        token = np.mean([c.vector for c in t.constituents], axis=0)
        out.append(
            FinalTrack(
                id=t.id,
                track_token=token,
                text_token=None if project is None else np.asarray(project(token)),
                frame_span=t.frame_span,
                footprints={c.frame_id: c.footprint for c in t.constituents},
            )
        )
    return out


def track_video(frames: list[MergedTokenSet], cfg: TrackConfig | None = None) -> TrackerState:
    state = TrackerState()
    for f in frames:
        update(state, f, cfg)
    return state
