"""Binary file formats: FEAT (feature grids), RTOK (token stores), RENW (checkpoints).

All formats are little-endian: 4-byte magic, u32 version, body, trailing
CRC32 of every preceding byte. Readers check magic, version, length and
finiteness before the checksum so each corruption class gets its own error.

FEAT v1 body:  u32 h, u32 w, u32 d, f32[h*w*d]
RTOK v1 body:  u32 d, u8 kind, u32 n_patches, u32 count, then per record:
               i32 id, i32 frame_start, i32 frame_end, f32[d] vector,
               u32 n_members, (f32 x, f32 y, u16 query_index) * n_members,
               u32 n_footprints, (i32 frame, u8[ceil(n_patches/8)] bits) * n,
               u32 meta_len, utf-8 JSON meta
RENW v1 body:  u32 config_len, utf-8 key=value config, u32 n_tensors, then per
               tensor: u16 name_len, name, u8 ndim, u32[ndim] shape, f32 data
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import FeatureGrid

VERSION = 1
MAGIC_FEAT = b"FEAT"
MAGIC_TOKENS = b"RTOK"
MAGIC_WEIGHTS = b"RENW"
TOKEN_KINDS = ("region", "merged", "track")


class FormatError(Exception):
    """Unreadable or corrupt file (CLI exit code 2)."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class NaNPayloadError(FormatError):
    pass


class DimensionError(ValueError):
    """Well-formed data whose dimensions do not fit the consumer (exit code 1)."""


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        if len(data) < 4:
            raise TruncationError("file shorter than its magic")
        if data[:4] != magic:
            raise MagicError(f"bad magic {data[:4]!r}, expected {magic!r}")
        self.data = data
        self.end = len(data) - 4  # trailing CRC
        self.pos = 4
        version = self.unpack("<I")[0]
        if version != VERSION:
            raise VersionError(f"unsupported format version {version}")

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncationError("unexpected end of data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    def finish(self) -> None:
        if self.pos != self.end:
            raise FormatError(f"{self.end - self.pos} unexpected trailing bytes")
        (crc,) = struct.unpack("<I", self.data[self.end:])
        if zlib.crc32(self.data[: self.end]) != crc:
            raise ChecksumError("CRC32 mismatch")


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NaNPayloadError(f"non-finite values in {what}")


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


# ---- FEAT ----

def dumps_features(grid: FeatureGrid) -> bytes:
    _check_finite(grid.tokens, "feature grid")
    return _seal(MAGIC_FEAT + struct.pack("<IIII", VERSION, grid.h, grid.w, grid.d) + _f32(grid.tokens))


def loads_features(data: bytes) -> FeatureGrid:
    r = _Reader(data, MAGIC_FEAT)
    h, w, d = r.unpack("<III")
    tokens = r.floats(h * w * d).reshape(h * w, d)
    _check_finite(tokens, "feature grid")
    r.finish()
    return FeatureGrid(h, w, tokens)


# ---- RTOK ----

@dataclass
class TokenRecord:
    id: int
    vector: np.ndarray
    frame_span: tuple[int, int] = (0, 0)
    members: list[tuple[float, float, int]] = field(default_factory=list)
    footprints: dict[int, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


@dataclass
class TokenStore:
    d: int
    kind: str
    n_patches: int
    records: list[TokenRecord] = field(default_factory=list)

    def vectors(self) -> np.ndarray:
        return np.stack([r.vector for r in self.records]) if self.records else np.zeros((0, self.d), np.float32)


def dumps_tokens(store: TokenStore) -> bytes:
    if store.kind not in TOKEN_KINDS:
        raise ValueError(f"unknown token kind {store.kind!r}")
    nbytes = (store.n_patches + 7) // 8
    parts = [MAGIC_TOKENS, struct.pack("<IIBII", VERSION, store.d, TOKEN_KINDS.index(store.kind),
                                       store.n_patches, len(store.records))]
    for rec in store.records:
        vec = np.asarray(rec.vector, dtype=np.float32)
        if vec.shape != (store.d,):
            raise DimensionError(f"record {rec.id} has shape {vec.shape}, store d={store.d}")
        _check_finite(vec, f"record {rec.id}")
        parts.append(struct.pack("<iii", rec.id, *rec.frame_span))
        parts.append(_f32(vec))
        parts.append(struct.pack("<I", len(rec.members)))
        for x, y, q in rec.members:
            parts.append(struct.pack("<ffH", x, y, q))
        parts.append(struct.pack("<I", len(rec.footprints)))
        for frame, mask in sorted(rec.footprints.items()):
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (store.n_patches,):
                raise DimensionError("footprint length does not match n_patches")
            bits = np.packbits(mask, bitorder="little")
            parts.append(struct.pack("<i", frame) + bits.tobytes().ljust(nbytes, b"\0"))
        meta = json.dumps(rec.meta, sort_keys=True).encode()
        parts.append(struct.pack("<I", len(meta)) + meta)
    return _seal(b"".join(parts))


def loads_tokens(data: bytes) -> TokenStore:
    r = _Reader(data, MAGIC_TOKENS)
    d, kind, n_patches, count = r.unpack("<IBII")
    if kind >= len(TOKEN_KINDS):
        raise FormatError(f"unknown token kind code {kind}")
    nbytes = (n_patches + 7) // 8
    store = TokenStore(d, TOKEN_KINDS[kind], n_patches)
    for _ in range(count):
        rid, fs, fe = r.unpack("<iii")
        vec = r.floats(d)
        _check_finite(vec, f"record {rid}")
        (nm,) = r.unpack("<I")
        members = []
        for _ in range(nm):
            x, y, q = r.unpack("<ffH")
            members.append((x, y, q))
        (nf,) = r.unpack("<I")
        footprints = {}
        for _ in range(nf):
            (frame,) = r.unpack("<i")
            bits = np.frombuffer(r.take(nbytes), dtype=np.uint8)
            footprints[frame] = np.unpackbits(bits, count=n_patches, bitorder="little").astype(bool)
        (ml,) = r.unpack("<I")
        try:
            meta = json.loads(r.take(ml).decode()) if ml else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad record metadata: {exc}") from exc
        store.records.append(TokenRecord(rid, vec, (fs, fe), members, footprints, meta))
    r.finish()
    return store


# ---- RENW ----

def dumps_weights(tensors: dict[str, np.ndarray], config_text: str = "") -> bytes:
    cfg = config_text.encode()
    parts = [MAGIC_WEIGHTS, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float32)
        _check_finite(arr, name)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_f32(arr))
    return _seal(b"".join(parts))


def loads_weights(data: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(data, MAGIC_WEIGHTS)
    (cl,) = r.unpack("<I")
    try:
        config_text = r.take(cl).decode()
    except UnicodeDecodeError as exc:
        raise FormatError("config echo is not utf-8") from exc
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode(errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        arr = r.floats(int(np.prod(shape, dtype=np.int64))).reshape(shape)
        _check_finite(arr, name)
        tensors[name] = arr
    r.finish()
    return tensors, config_text


# ---- path helpers ----

def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _write(path, data: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)


def save_features(path, grid: FeatureGrid) -> None:
    _write(path, dumps_features(grid))


def load_features(path) -> FeatureGrid:
    return loads_features(_read(path))


def save_tokens(path, store: TokenStore) -> None:
    _write(path, dumps_tokens(store))


def load_tokens(path) -> TokenStore:
    return loads_tokens(_read(path))


def save_weights(path, tensors: dict[str, np.ndarray], config_text: str = "") -> None:
    _write(path, dumps_weights(tensors, config_text))


def load_weights(path) -> tuple[dict[str, np.ndarray], str]:
    return loads_weights(_read(path))


def sniff(path) -> str:
    """Name of the format stored at ``path`` judged by its magic."""
    head = _read(path)[:4]
    return {MAGIC_FEAT: "FEAT", MAGIC_TOKENS: "RTOK", MAGIC_WEIGHTS: "RENW"}.get(head, "unknown")


# ---- conversions ----

def store_from_regions(tokens, n_patches: int, frame_id: int = 0, level: float = 0.5) -> TokenStore:
    from .merging import binarize_mask

    d = len(tokens[0].vector) if tokens else 0
    recs = [
        TokenRecord(i, np.asarray(t.vector, np.float32), (frame_id, frame_id),
                    [(t.source_prompt[0], t.source_prompt[1], t.query_index)],
                    {frame_id: binarize_mask(t.attn_mask, level)})
        for i, t in enumerate(tokens)
    ]
    return TokenStore(d, "region", n_patches, recs)


def store_from_merged(sets, n_patches: int) -> TokenStore:
    """One store holding the merged tokens of one or more frames."""
    recs, d = [], 0
    for s in sets:
        for t in s.tokens:
            d = len(t.vector)
            members = [(x, y, q) for (x, y), q in zip(t.member_prompts, t.member_query_indices)]
            recs.append(TokenRecord(len(recs), np.asarray(t.vector, np.float32), (s.frame_id, s.frame_id),
                                    members, {s.frame_id: t.union_mask}))
    return TokenStore(d, "merged", n_patches, recs)


def merged_from_store(store: TokenStore):
    """Split a merged-token store back into per-frame MergedTokenSets, ordered by frame."""
    from .merging import MergedToken, MergedTokenSet

    frames: dict[int, list] = {}
    for rec in store.records:
        fid = rec.frame_span[0]
        mask = rec.footprints.get(fid, np.zeros(store.n_patches, bool))
        frames.setdefault(fid, []).append(
            MergedToken(rec.vector.copy(), [(x, y) for x, y, _ in rec.members],
                        [q for _, _, q in rec.members], mask)
        )
    return [MergedTokenSet(tokens, fid) for fid, tokens in sorted(frames.items())]


def store_from_tracks(tracks, n_patches: int) -> TokenStore:
    d = len(tracks[0].track_token) if tracks else 0
    recs = [
        TokenRecord(t.id, np.asarray(t.track_token, np.float32), t.frame_span, [],
                    {f: m for f, m in t.footprints.items() if m is not None})
        for t in tracks
    ]
    return TokenStore(d, "track", n_patches, recs)


def tracks_from_store(store: TokenStore, project=None):
    from .tracker import FinalTrack

    return [
        FinalTrack(rec.id, rec.vector.astype(np.float64),
                   None if project is None else np.asarray(project(rec.vector)),
                   rec.frame_span, dict(rec.footprints))
        for rec in store.records
    ]
