import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from smartmim.errors import ShapeError, ValidationError
from smartmim.masking import (MaskingConfig, MaskStrategy, MaskVector, TokenGrid, apply_mask,
                              attention_guided_mask, attention_ranking, blockwise_mask, broadcast_mask,
                              ceil_count, from_blocks, patch_dropout, patchify, pack_mask, pool_mask,
                              random_mask, to_blocks, unpack_mask, unpatchify)

RATIOS = (0.0, 0.1, 0.5, 0.7, 1.0)


def exact_ceil(ratio, n):
    # decimal ratio read as an exact fraction, so 0.7 * 30 is exactly 21
    return math.ceil(Fraction(str(ratio)) * n)


def oracle_attention(satt, r, s, exclude=()):
    order = sorted(range(len(satt)), key=lambda i: (-satt[i], i))
    order = [i for i in order if i not in set(exclude)]
    cand = order[:exact_ceil(r, len(satt))]
    hints = order[:exact_ceil(s, len(satt))]
    return sorted(set(cand) - set(hints)), sorted(hints)


def test_ceil_count_matches_exact_fraction():
    for n in range(1, 200):
        for r in (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
            assert ceil_count(r, n) == exact_ceil(r, n)


def test_attention_mask_examples():
    cfg = MaskingConfig(r=0.5, s=0.0)
    m = attention_guided_mask(np.array([0.1, 0.4, 0.2, 0.3]), cfg)
    assert list(m.masked_idx) == [1, 3]
    # ties go to the lower index
    m = attention_guided_mask(np.full(4, 0.25), cfg)
    assert list(m.masked_idx) == [0, 1]
    m = attention_guided_mask(np.array([0.1, 0.4, 0.2, 0.3]), MaskingConfig(r=0.75, s=0.25))
    assert list(m.hint_idx) == [1]
    assert list(m.masked_idx) == [2, 3]


def test_attention_mask_matches_oracle():
    rng = np.random.default_rng(0)
    for n in range(1, 65):
        for r in RATIOS:
            for s in {0.0, 0.1, 0.25} if r > 0.25 else {0.0}:
                satt = rng.random(n)
                satt[rng.integers(n)] = satt[0]  # force a tie
                m = attention_guided_mask(satt, MaskingConfig(r=r, s=s))
                masked, hints = oracle_attention(list(satt), r, s)
                assert list(m.masked_idx) == masked
                assert list(m.hint_idx) == hints
                assert m.n - m.visible.sum() == exact_ceil(r, n) - exact_ceil(s, n)


def test_attention_mask_exclude():
    rng = np.random.default_rng(1)
    for n in (8, 27, 64):
        satt = rng.random(n)
        exclude = rng.choice(n, size=n // 3, replace=False)
        m = attention_guided_mask(satt, MaskingConfig(r=0.7, s=0.1), exclude)
        masked, hints = oracle_attention(list(satt), 0.7, 0.1, list(exclude))
        assert list(m.masked_idx) == masked
        assert not set(m.masked_idx) & set(exclude)
        assert not set(m.hint_idx) & set(exclude)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=64),
       st.sampled_from(["cube", "sqrt", "affine"]))
@settings(max_examples=200, deadline=None)
def test_attention_mask_monotone_invariance(vals, kind):
    satt = np.array(vals)
    f = {"cube": lambda x: x ** 3, "sqrt": np.sqrt, "affine": lambda x: 0.5 * x + 0.25}[kind]
    cfg = MaskingConfig(r=0.7, s=0.1)
    a = attention_guided_mask(satt, cfg)
    b = attention_guided_mask(f(satt), cfg)
    # cube can merge distinct subnormal floats into ties; skip those
    if len(np.unique(f(satt))) == len(np.unique(satt)):
        assert np.array_equal(a.visible, b.visible)
        assert np.array_equal(a.hint_idx, b.hint_idx)


def test_attention_mask_invert_and_errors():
    satt = np.array([0.1, 0.4, 0.2, 0.3])
    m = attention_guided_mask(satt, MaskingConfig(r=0.5, s=0.0, invert=True))
    assert list(m.masked_idx) == [0, 2]
    with pytest.raises(ValidationError):
        attention_guided_mask(np.array([0.1, np.nan]), MaskingConfig())
    with pytest.raises(ValidationError):
        attention_guided_mask(np.array([0.1, 1.5]), MaskingConfig())
    with pytest.raises(ValidationError):
        MaskingConfig(r=0.7, s=0.8)
    assert list(attention_ranking(np.array([0.2, 0.5, 0.5]))) == [1, 2, 0]


def test_random_mask_matches_oracle():
    for n in range(1, 65):
        for r in RATIOS:
            m = random_mask(n, r, np.random.default_rng(n))
            k = exact_ceil(r, n)
            # oracle: the same seeded draw without replacement, done by hand
            rng = np.random.default_rng(n)
            expect = sorted(rng.choice(n, size=k, replace=False).tolist()) if k else []
            assert list(m.masked_idx) == expect
            assert len(set(m.masked_idx)) == k
            assert m.visible.sum() == n - k


def test_random_mask_uniform_coverage():
    # every index should be masked about r of the time
    n, r, trials = 20, 0.5, 4000
    rng = np.random.default_rng(3)
    counts = np.zeros(n)
    for _ in range(trials):
        counts[random_mask(n, r, rng).masked_idx] += 1
    freq = counts / trials
    assert np.all(np.abs(freq - 0.5) < 0.05)


def oracle_blockwise(grid, r, edge, seed):
    rng = np.random.default_rng(seed)
    d, h, w = grid
    target = exact_ceil(r, d * h * w)
    masked = set()
    while len(masked) < target:
        o = [int(rng.integers(0, g - edge + 1)) for g in grid]
        for a in range(edge):
            for b in range(edge):
                for c in range(edge):
                    masked.add(((o[0] + a) * h + (o[1] + b)) * w + (o[2] + c))
    return sorted(masked)


def test_blockwise_mask_matches_oracle():
    grids = [(1, 1, n) for n in range(1, 65)] + [(2, 2, 2), (4, 4, 4), (2, 3, 4), (3, 3, 3)]
    for grid in grids:
        n = int(np.prod(grid))
        edge = 2 if min(grid) >= 2 else 1
        for r in RATIOS:
            m = blockwise_mask(grid, r, edge, np.random.default_rng(n))
            assert list(m.masked_idx) == oracle_blockwise(grid, r, edge, n)
            assert len(m.masked_idx) >= exact_ceil(r, n)


def test_blockwise_rejects_oversized_block():
    with pytest.raises(ShapeError):
        blockwise_mask((2, 2, 2), 0.5, 3, np.random.default_rng(0))


def test_patchify_roundtrip_and_order():
    x = np.arange(4 * 6 * 8, dtype=np.float32).reshape(4, 6, 8)
    tg = patchify(x, 2)
    assert tg.grid_dims == (2, 3, 4)
    assert tg.tokens.shape == (24, 8)
    # token 1 is the block at (0, 0, 1): voxels x[0:2, 0:2, 2:4]
    assert np.array_equal(tg.tokens[1], x[0:2, 0:2, 2:4].ravel())
    assert np.array_equal(unpatchify(tg), x)
    with pytest.raises(ShapeError):
        patchify(np.zeros((5, 4, 4)), 2)


def test_patchify_embed_keeps_blocks():
    x = torch.randn(2, 4, 4, 4)
    lin = torch.nn.Linear(8, 5)
    tg = patchify(x, 2, embed=lin)
    assert tg.tokens.shape == (2, 8, 5)
    assert torch.equal(from_blocks(tg.blocks, tg.grid_dims, 2), x)


def test_apply_mask_numpy_and_torch():
    tg = TokenGrid(np.arange(12.0).reshape(4, 3), (1, 2, 2), 2)
    m = MaskVector.from_masked(4, [1, 3], MaskStrategy.RANDOM)
    out = apply_mask(tg, m, np.full(3, -1.0))
    assert np.array_equal(out.tokens[[0, 2]], tg.tokens[[0, 2]])
    assert np.all(out.tokens[[1, 3]] == -1)
    tt = TokenGrid(torch.arange(12.0).reshape(4, 3), (1, 2, 2), 2)
    out = apply_mask(tt, m, torch.zeros(3))
    assert torch.equal(out.tokens[0], tt.tokens[0]) and out.tokens[1].abs().sum() == 0
    with pytest.raises(ShapeError):
        apply_mask(tg, MaskVector.from_masked(5, [0], MaskStrategy.RANDOM), np.zeros(3))


def test_patch_dropout_zero_ratio_is_identity():
    tg = TokenGrid(np.random.default_rng(0).random((8, 3)), (2, 2, 2), 2)
    out, m = patch_dropout(tg, 0.0, np.random.default_rng(0), np.zeros(3))
    assert m.visible.all() and m.strategy == MaskStrategy.PATCH_DROPOUT
    assert np.array_equal(out.tokens, tg.tokens)


def test_broadcast_and_pool():
    coarse = MaskVector.from_masked(8, [0, 7], MaskStrategy.ATTENTION, hints=[3])
    fine = broadcast_mask(coarse, (2, 2, 2), (4, 4, 4))
    assert fine.n == 64 and (~fine.visible).sum() == 16 and fine.hint_idx.size == 8
    back = pool_mask(fine, (4, 4, 4), (2, 2, 2))
    assert list(back.masked_idx) == [0, 7]
    # a cell with one visible fine token is not masked under the all-rule
    vis = fine.visible.copy()
    vis[0] = True
    partial = MaskVector.from_masked(64, np.flatnonzero(~vis), MaskStrategy.RANDOM)
    assert list(pool_mask(partial, (4, 4, 4), (2, 2, 2)).masked_idx) == [7]
    with pytest.raises(ShapeError):
        broadcast_mask(coarse, (2, 2, 2), (5, 4, 4))


@given(st.integers(1, 200), st.data())
@settings(max_examples=100, deadline=None)
def test_pack_roundtrip(n, data):
    vis = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    masked = np.flatnonzero(~vis)
    hints = [i for i in np.flatnonzero(vis)[:3]]
    m = MaskVector.from_masked(n, masked, MaskStrategy.ATTENTION, hints=hints, ratio=0.7, hint_ratio=0.1)
    buf = pack_mask(m)
    assert len(buf) == 16 + 2 * ((n + 7) // 8)
    back = unpack_mask(buf)
    assert np.array_equal(back.visible, m.visible)
    assert np.array_equal(back.hint_idx, m.hint_idx)
    assert back.strategy == m.strategy and back.ratio == 0.7 and back.hint_ratio == 0.1


def test_unpack_rejects_bad_length():
    m = MaskVector.from_masked(10, [1], MaskStrategy.RANDOM)
    with pytest.raises(ShapeError):
        unpack_mask(pack_mask(m)[:-1])
    with pytest.raises(ValidationError):
        MaskVector.from_masked(4, [1], MaskStrategy.RANDOM, hints=[1])


def test_documented_examples():
    satt = np.array([.19, .17, .15, .13, .11, .09, .07, .05, .03, .01])
    m = attention_guided_mask(satt, MaskingConfig(r=0.5, s=0.1))
    assert list(m.hint_idx) == [0] and list(m.masked_idx) == [1, 2, 3, 4]
    m = attention_guided_mask(np.full(10, 0.1), MaskingConfig(r=0.3, s=0.1))
    assert list(m.hint_idx) == [0] and list(m.masked_idx) == [1, 2]
    assert attention_guided_mask(satt, MaskingConfig(r=0.0, s=0.0)).masked_idx.size == 0
    assert len(random_mask(10, 0.7, np.random.default_rng(0)).masked_idx) == 7
    assert random_mask(10, 0.0, np.random.default_rng(0)).visible.all()
    # one block of edge 4 covers the whole (4,4,4) grid and the loop stops
    b = blockwise_mask((4, 4, 4), 0.5, 4, np.random.default_rng(0))
    assert len(b.blocks) == 1 and (~b.visible).all()
    tg = TokenGrid(np.zeros((100, 2)), (4, 5, 5), 2)
    _, d = patch_dropout(tg, 0.7, np.random.default_rng(0), np.ones(2))
    assert (~d.visible).sum() == 70
    _, d2 = patch_dropout(tg, 0.7, np.random.default_rng(0), np.ones(2))
    assert np.array_equal(d.visible, d2.visible)
    x = np.zeros((32, 32, 32))
    tg = patchify(x, 2)
    assert tg.n_tokens == 4096 and tg.grid_dims == (16, 16, 16)
    with pytest.raises(ShapeError):
        patchify(np.zeros((33, 33, 33)), 2)


def test_broadcast_counts():
    one = MaskVector.from_masked(64, [5], MaskStrategy.ATTENTION)
    fine = broadcast_mask(one, (4, 4, 4), (16, 16, 16))
    assert (~fine.visible).sum() == 64
    rng = np.random.default_rng(0)
    for k in range(0, 65, 7):
        m = MaskVector.from_masked(64, rng.choice(64, k, replace=False), MaskStrategy.RANDOM)
        f = broadcast_mask(m, (4, 4, 4), (16, 16, 16))
        assert (~f.visible).mean() == (~m.visible).mean()
        # every masked fine token sits inside a masked coarse cell
        z, y, x = np.unravel_index(f.masked_idx, (16, 16, 16))
        cells = np.ravel_multi_index((z // 4, y // 4, x // 4), (4, 4, 4))
        assert set(cells) <= set(m.masked_idx)
