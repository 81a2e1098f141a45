import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regiontok.encoder import FeatureGrid, ModelConfig, RegionEncoder, RegionToken, make_grid
from regiontok.merging import MergeConfig, binarize_mask, mask_iou, merge_tokens
from regiontok.numerics import cosine_sim


def tok(vec, mask, i=0):
    return RegionToken(np.asarray(vec, dtype=np.float64), np.asarray(mask, dtype=np.float64), (0.5, 0.5), i)


def brute_partition(tokens, cfg):
    """BFS over the explicit pair predicate."""
    n = len(tokens)
    masks = [binarize_mask(t.attn_mask, cfg.binarize_level) for t in tokens]

    def linked(i, j):
        if cfg.tau_mask == 0:
            return True
        return cosine_sim(tokens[i].vector, tokens[j].vector) > cfg.tau_token or mask_iou(masks[i], masks[j]) > cfg.tau_mask

    seen, parts = set(), []
    for s in range(n):
        if s in seen:
            continue
        comp, todo = {s}, [s]
        while todo:
            i = todo.pop()
            for j in range(n):
                if j not in comp and linked(i, j):
                    comp.add(j)
                    todo.append(j)
        seen |= comp
        parts.append(frozenset(comp))
    return set(parts)


def partition(merged):
    return {frozenset(t.members) for t in merged.tokens}


def random_tokens(rng, n, d=6, patches=12):
    # a few base directions so both merge criteria fire sometimes
    bases = rng.normal(size=(3, d))
    out = []
    for i in range(n):
        v = bases[rng.integers(3)] + rng.normal(scale=rng.choice([0.01, 0.3]), size=d)
        m = rng.random(patches) ** 3
        if rng.random() < 0.5:
            m = np.zeros(patches)
            m[rng.integers(0, patches, size=rng.integers(1, 4))] = 1.0
        out.append(tok(v, m, i))
    return out


def test_binarize_examples():
    np.testing.assert_array_equal(binarize_mask([0.5, 0.25, 0.25], 0.5), [True, False, False])
    np.testing.assert_array_equal(binarize_mask([0.25] * 4, 0.5), [True] * 4)
    np.testing.assert_array_equal(binarize_mask([0, 1.0, 0], 0.5), [False, True, False])


def test_binarize_all_zero_warns(caplog):
    with caplog.at_level("WARNING"):
        assert not binarize_mask(np.zeros(5)).any()
    assert "all-zero" in caplog.text
    with pytest.raises(ValueError):
        binarize_mask([-0.1, 1.0])


def test_iou_examples():
    a = np.zeros(6, bool)
    b = np.zeros(6, bool)
    a[[1, 2, 3]] = True
    b[[2, 3, 4]] = True
    assert mask_iou(a, b) == 0.5
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0


def test_config_range():
    with pytest.raises(ValueError):
        MergeConfig(tau_token=1.5)
    MergeConfig(tau_mask=0.0)


def test_two_similar_tokens_merge_to_mean():
    a = tok([1.0, 0.0], [1, 0, 0, 0])
    b = tok([1.0, 0.15], [0, 0, 0, 1])
    assert cosine_sim(a.vector, b.vector) > 0.975
    out = merge_tokens([a, b])
    assert len(out) == 1
    np.testing.assert_allclose(out.tokens[0].vector, [1.0, 0.075], atol=1e-7)
    np.testing.assert_array_equal(out.tokens[0].union_mask, [1, 0, 0, 1])


def test_transitive_closure():
    # a-b and b-c at 0.98, a-c at about 0.92: one component
    th = np.arccos(0.98)
    a = tok([1, 0], [1, 0, 0])
    b = tok([np.cos(th), np.sin(th)], [0, 1, 0])
    c = tok([np.cos(2 * th), np.sin(2 * th)], [0, 0, 1])
    assert cosine_sim(a.vector, c.vector) < 0.975
    assert len(merge_tokens([a, b, c])) == 1


def test_dissimilar_tokens_stay_apart():
    rng = np.random.default_rng(0)
    vecs = np.linalg.qr(rng.normal(size=(12, 12)))[0]
    toks = [tok(vecs[i], np.eye(12)[i], i) for i in range(12)]
    out = merge_tokens(toks)
    assert len(out) == 12
    for i, m in enumerate(out.tokens):
        np.testing.assert_allclose(m.vector, vecs[i].astype(np.float32))
        assert m.members == [i]


def test_tau_mask_zero_merges_everything():
    rng = np.random.default_rng(1)
    toks = random_tokens(rng, 10)
    assert len(merge_tokens(toks, MergeConfig(tau_mask=0.0))) == 1


def test_single_value_grid_gives_one_token():
    enc = RegionEncoder(ModelConfig(d=16, k=3, heads=4))
    grid = FeatureGrid(4, 4, np.tile(np.arange(16.0), (16, 1)))
    out = merge_tokens(enc.encode(grid, make_grid(4, 4)))
    assert len(out) == 1
    assert sorted(out.tokens[0].members) == list(range(48))


def test_empty_input():
    assert len(merge_tokens([])) == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 30),
       tau_token=st.sampled_from([0.5, 0.9, 0.975]), tau_mask=st.sampled_from([0.0, 0.3, 0.8]))
def test_partition_matches_bfs(seed, n, tau_token, tau_mask):
    rng = np.random.default_rng(seed)
    toks = random_tokens(rng, n)
    cfg = MergeConfig(tau_token=tau_token, tau_mask=tau_mask)
    out = merge_tokens(toks, cfg)
    assert partition(out) == brute_partition(toks, cfg)
    # every input lands in exactly one merged token
    members = sorted(i for t in out.tokens for i in t.members)
    assert members == list(range(n))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    toks = random_tokens(rng, 16)
    perm = rng.permutation(16)
    a = merge_tokens(toks)
    b = merge_tokens([toks[i] for i in perm])
    relabel = {frozenset(int(perm[i]) for i in t.members): t for t in b.tokens}
    assert set(relabel) == partition(a)
    for t in a.tokens:
        other = relabel[frozenset(t.members)]
        np.testing.assert_allclose(other.vector, t.vector, atol=1e-6)
        np.testing.assert_array_equal(other.union_mask, t.union_mask)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_token_count_monotone_in_tau_mask(seed):
    toks = random_tokens(np.random.default_rng(seed), 20)
    counts = [len(merge_tokens(toks, MergeConfig(tau_mask=t))) for t in np.linspace(0, 1, 11)]
    assert counts[0] == 1
    assert all(a <= b for a, b in zip(counts, counts[1:]))


def test_idempotent_when_result_is_separated():
    rng = np.random.default_rng(5)
    toks = random_tokens(rng, 20)
    cfg = MergeConfig()
    once = merge_tokens(toks, cfg)
    again = merge_tokens([tok(t.vector, t.union_mask.astype(float), i) for i, t in enumerate(once.tokens)], cfg)
    assert len(again) <= len(once)
    vecs = once.vectors()
    sims = [cosine_sim(vecs[i], vecs[j]) for i in range(len(vecs)) for j in range(i + 1, len(vecs))]
    ious = [mask_iou(once.tokens[i].union_mask, once.tokens[j].union_mask)
            for i in range(len(vecs)) for j in range(i + 1, len(vecs))]
    if all(s <= cfg.tau_token for s in sims) and all(u <= cfg.tau_mask for u in ious):
        assert len(again) == len(once)
