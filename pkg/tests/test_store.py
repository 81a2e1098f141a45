import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regiontok.config import ConfigError, RunConfig
from regiontok.encoder import FeatureGrid
from regiontok.merging import MergedToken, MergedTokenSet
from regiontok.store import (
    ChecksumError,
    DimensionError,
    FormatError,
    MagicError,
    NaNPayloadError,
    TokenRecord,
    TokenStore,
    TruncationError,
    VersionError,
    dumps_features,
    dumps_tokens,
    dumps_weights,
    loads_features,
    loads_tokens,
    loads_weights,
    merged_from_store,
    store_from_merged,
)


def random_store(rng, kind="merged"):
    d, n_patches = int(rng.integers(1, 9)), int(rng.integers(1, 40))
    recs = []
    for i in range(int(rng.integers(0, 6))):
        members = [(float(np.float32(rng.random())), float(np.float32(rng.random())), int(rng.integers(0, 4)))
                   for _ in range(int(rng.integers(0, 3)))]
        fps = {int(f): rng.random(n_patches) < 0.5 for f in rng.choice(10, size=int(rng.integers(0, 3)), replace=False)}
        recs.append(TokenRecord(i, rng.normal(size=d).astype(np.float32), (1, int(rng.integers(1, 5))),
                                members, fps, {"src": int(rng.integers(100))}))
    return TokenStore(d, kind, n_patches, recs)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_token_store_roundtrip_bitwise(seed):
    rng = np.random.default_rng(seed)
    store = random_store(rng, ["region", "merged", "track"][seed % 3])
    data = dumps_tokens(store)
    back = loads_tokens(data)
    assert dumps_tokens(back) == data
    for a, b in zip(store.records, back.records):
        assert a.vector.tobytes() == b.vector.tobytes()
        assert a.members == b.members and a.meta == b.meta
        assert a.footprints.keys() == b.footprints.keys()
        assert all(np.array_equal(a.footprints[k], b.footprints[k]) for k in a.footprints)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_features_and_weights_roundtrip(seed):
    rng = np.random.default_rng(seed)
    h, w, d = rng.integers(1, 6, size=3)
    grid = FeatureGrid(int(h), int(w), rng.normal(size=(h * w, d)).astype(np.float32))
    back = loads_features(dumps_features(grid))
    assert back.tokens.tobytes() == grid.tokens.tobytes()
    tensors = {f"t{i}": rng.normal(size=tuple(rng.integers(1, 4, size=i))).astype(np.float32) for i in range(4)}
    t2, text = loads_weights(dumps_weights(tensors, "k=3\n"))
    assert text == "k=3\n"
    assert all(t2[k].tobytes() == tensors[k].tobytes() and t2[k].shape == tensors[k].shape for k in tensors)


def test_twelve_token_merged_set_resaves_identically():
    rng = np.random.default_rng(0)
    toks = [MergedToken(rng.normal(size=8).astype(np.float32), [(0.5, 0.5)], [0], rng.random(16) < 0.5)
            for _ in range(12)]
    data = dumps_tokens(store_from_merged([MergedTokenSet(toks, 1)], 16))
    again = dumps_tokens(store_from_merged(merged_from_store(loads_tokens(data)), 16))
    assert again == data


def _reseal(body: bytes) -> bytes:
    import zlib

    return body + struct.pack("<I", zlib.crc32(body))


def test_corruption_classes():
    data = dumps_features(FeatureGrid(2, 2, np.ones((4, 3), np.float32)))
    with pytest.raises(MagicError):
        loads_features(b"X" + data[1:])
    with pytest.raises(VersionError):
        loads_features(_reseal(data[:4] + struct.pack("<I", 99) + data[8:-4]))
    with pytest.raises(TruncationError):
        loads_features(data[:20])
    nan = bytearray(data[:-4])
    nan[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(NaNPayloadError):
        loads_features(_reseal(bytes(nan)))
    flipped = bytearray(data)
    flipped[-8] ^= 1
    with pytest.raises(ChecksumError):
        loads_features(bytes(flipped))
    with pytest.raises(MagicError):
        loads_tokens(data)


def test_refuses_to_write_nan_and_bad_dims():
    with pytest.raises(NaNPayloadError):
        dumps_features(FeatureGrid(1, 1, np.array([[np.inf]])))
    with pytest.raises(DimensionError):
        dumps_tokens(TokenStore(4, "merged", 3, [TokenRecord(0, np.zeros(5, np.float32))]))


def test_format_errors_are_not_value_errors():
    # the CLI maps FormatError to exit 2 and ValueError to exit 1
    assert not issubclass(FormatError, ValueError)
    assert issubclass(DimensionError, ValueError)


def test_d32_checkpoint_into_d64_model(tmp_path):
    from regiontok.training.trainer import build_model, load_state, state_tensors

    small = state_tensors(build_model(RunConfig(d=32)))
    with pytest.raises(DimensionError):
        load_state(build_model(RunConfig(d=64)), small)


def test_config_text_roundtrip_and_rejections():
    cfg = RunConfig(tau_mask=0.5, k=2)
    assert RunConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.from_text("tau_mask=0.5\nbogus=1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("tau_mask=1.5\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("k=three\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("warmup=10\ntotal_steps=5\n")
    assert RunConfig.from_text("# comment\n\nk=1  # trailing\n").k == 1
