import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from permprune.linalg import ShapeError
from permprune.sparsity import (
    ConfigError,
    NMPattern,
    SaliencyKind,
    SaliencySpec,
    check_nm,
    nm_mask,
    retained_saliency,
    saliency,
)

P24 = NMPattern(2, 4)


def test_pattern_parse_and_bounds():
    assert NMPattern.parse("2:4") == P24
    assert str(NMPattern(1, 8)) == "1:8"
    for bad in ("2", "a:b", "5:4", "0:4"):
        with pytest.raises(ConfigError):
            NMPattern.parse(bad)


def test_saliency_examples():
    mag = SaliencySpec(SaliencyKind.MAGNITUDE)
    assert saliency([[-3, 2]], mag).tolist() == [[3, 2]]
    assert saliency([[1, 2]], SaliencySpec(SaliencyKind.WANDA, [2, 1])).tolist() == [[2, 2]]
    w = np.random.default_rng(0).standard_normal((3, 8))
    assert np.array_equal(saliency(w, SaliencySpec(SaliencyKind.WANDA, np.ones(8))), saliency(w, mag))


def test_wanda_requires_norms():
    with pytest.raises(ConfigError):
        saliency([[1.0, 2.0]], SaliencySpec(SaliencyKind.WANDA))
    with pytest.raises(ShapeError):
        saliency([[1.0, 2.0]], SaliencySpec(SaliencyKind.WANDA, [1.0, 1.0, 1.0]))
    with pytest.raises(ConfigError):
        SaliencySpec(SaliencyKind.WANDA, [-1.0])


def test_mask_examples():
    assert nm_mask([[1, 5, 2, 8]], P24).tolist() == [[False, True, False, True]]
    assert nm_mask([[3, 3, 3, 3]], P24).tolist() == [[True, True, False, False]]
    with pytest.raises(ShapeError):
        nm_mask(np.ones((2, 6)), P24)


def test_retained_examples():
    sal = np.array([[1.0, 5, 2, 8]])
    assert retained_saliency(sal, np.ones_like(sal, dtype=bool)) == 16
    assert retained_saliency(sal, nm_mask(sal, P24)) == 13


def test_mask_is_groupwise_optimal(rng):
    sal = rng.random((4, 16))
    mask = nm_mask(sal, P24)
    assert (mask.reshape(4, 4, 4).sum(-1) == 2).all()
    best = 0.0
    for r in range(4):
        for g in range(4):
            chunk = sal[r, 4 * g : 4 * g + 4]
            best += max(chunk[list(c)].sum() for c in itertools.combinations(range(4), 2))
    assert retained_saliency(sal, mask) == pytest.approx(best, rel=1e-14)


def test_permuted_layout_beats_identity_on_clustered_row():
    row = np.array([[9.0, 8, 7, 6, 1, 1, 1, 1]])
    ident = retained_saliency(row, nm_mask(row, P24))
    assert ident == 19
    best = max(retained_saliency(row[:, list(p)], nm_mask(row[:, list(p)], P24))
               for p in itertools.permutations(range(8)))
    assert best == 30 and best >= ident


def test_spec_permuted_moves_norms():
    spec = SaliencySpec(SaliencyKind.WANDA, [1.0, 2.0, 3.0])
    assert spec.permuted([2, 0, 1]).act_norms.tolist() == [3.0, 1.0, 2.0]


@st.composite
def saliency_and_pattern(draw):
    m = draw(st.sampled_from([1, 2, 4, 8]))
    n = draw(st.integers(1, m))
    rows = draw(st.integers(1, 4))
    groups = draw(st.integers(1, 4))
    sal = draw(arrays(np.float64, (rows, m * groups), elements=st.floats(0, 1e6)))
    return sal, NMPattern(n, m)


@given(saliency_and_pattern())
def test_mask_structure_always_exact(case):
    sal, pattern = case
    mask = nm_mask(sal, pattern)
    assert check_nm(mask, pattern) == []
    # no unkept entry beats a kept one inside its group
    g = sal.reshape(sal.shape[0], -1, pattern.m)
    k = mask.reshape(g.shape)
    kept_min = np.where(k, g, np.inf).min(-1)
    drop_max = np.where(~k, g, -np.inf).max(-1)
    assert (kept_min >= drop_max).all()


def test_check_nm_reports_location():
    mask = nm_mask(np.arange(8.0)[None], P24)
    mask[0, 0] = True
    assert check_nm(mask, P24) == [(0, 0, 3)]
