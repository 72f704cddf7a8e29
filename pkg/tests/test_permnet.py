import numpy as np
import pytest
from hypothesis import given, strategies as st

from permprune.linalg import ShapeError, perm_invert
from permprune.permnet import (
    GroupedPerm,
    LinearLayer,
    ToyBlock,
    assemble_grouped,
    inverse_permuted_mask,
    permute_attention_internal,
    permute_ffn_internal,
    permute_linear_input,
    permute_residual,
    propagate_to_prev_output,
)
from permprune.sparsity import NMPattern, SaliencyKind, SaliencySpec, check_nm, nm_mask, retained_saliency, saliency
from permprune.toymodel import block_forward
from permprune.verify import random_block

P24 = NMPattern(2, 4)
MAG = SaliencySpec(SaliencyKind.MAGNITUDE)


def rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_linear_input_examples(rng):
    layer = LinearLayer(rng.standard_normal((3, 5)), rng.standard_normal(3))
    same = permute_linear_input(layer, np.arange(5))
    assert np.array_equal(same.weight, layer.weight) and np.array_equal(same.bias, layer.bias)
    assert permute_linear_input(LinearLayer([[1.0, 2.0]]), [1, 0]).weight.tolist() == [[2.0, 1.0]]
    p = rng.permutation(5)
    x = rng.standard_normal((7, 5))
    assert rel(permute_linear_input(layer, p)(x[:, p]), layer(x)) <= 1e-12
    with pytest.raises((ShapeError, ValueError)):
        permute_linear_input(layer, [0, 1])


def test_prev_output_identity(rng):
    layer = LinearLayer(rng.standard_normal((4, 3)), rng.standard_normal(4))
    same = propagate_to_prev_output(layer, np.arange(4))
    assert np.array_equal(same.weight, layer.weight) and np.array_equal(same.bias, layer.bias)


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_two_layer_chain_exact(seed, with_bias):
    rng = np.random.default_rng(seed)
    d_in, d_mid, d_out = rng.integers(1, 12, size=3)
    b1 = rng.standard_normal(d_mid) if with_bias else None
    b2 = rng.standard_normal(d_out) if with_bias else None
    l1 = LinearLayer(rng.standard_normal((d_mid, d_in)), b1)
    l2 = LinearLayer(rng.standard_normal((d_out, d_mid)), b2)
    p = rng.permutation(d_mid)
    x = rng.standard_normal((3, d_in))
    got = permute_linear_input(l2, p)(propagate_to_prev_output(l1, p)(x))
    ref = l2(l1(x))
    assert np.max(np.abs(got - ref)) <= 1e-12 * max(np.max(np.abs(ref)), 1.0)


def test_attention_internal(rng):
    blk = random_block(rng, 8, 16)
    assert permute_attention_internal(blk, np.arange(8)).equals(blk)
    p = rng.permutation(8)
    x = rng.standard_normal((4, 8))
    assert rel(block_forward(permute_attention_internal(blk, p), x)[0], block_forward(blk, x)[0]) <= 1e-10
    assert permute_attention_internal(permute_attention_internal(blk, p), perm_invert(p)).equals(blk)


def test_ffn_internal(rng):
    blk = random_block(rng, 8, 16)
    assert permute_ffn_internal(blk, np.arange(16)).equals(blk)
    p = rng.permutation(16)
    x = rng.standard_normal((4, 8))
    assert rel(block_forward(permute_ffn_internal(blk, p), x)[0], block_forward(blk, x)[0]) <= 1e-10


def test_zero_gate_annihilates_ffn(rng):
    blk = random_block(rng, 8, 16)
    zero = np.zeros((8, 8))
    blk = ToyBlock(zero, zero, zero, zero, blk.w_up, np.zeros((16, 8)), blk.w_down)
    x = rng.standard_normal((3, 8))
    p = rng.permutation(16)
    for b in (blk, permute_ffn_internal(blk, p)):
        assert np.array_equal(block_forward(b, x)[0], x)


@given(st.integers(0, 2**32 - 1), st.sampled_from([8, 16, 32]), st.integers(1, 6))
def test_block_internal_equivalence(seed, d, tokens):
    rng = np.random.default_rng(seed)
    blk = random_block(rng, d, 2 * d)
    x = rng.standard_normal((tokens, d))
    moved = permute_ffn_internal(permute_attention_internal(blk, rng.permutation(d)), rng.permutation(2 * d))
    ref = block_forward(blk, x)[0]
    assert rel(block_forward(moved, x)[0], ref) <= 1e-10


def test_residual_permutation(rng):
    blk = random_block(rng, 8, 16)
    p = rng.permutation(8)
    x = rng.standard_normal((4, 8))
    assert rel(block_forward(permute_residual(blk, p), x[:, p])[0], block_forward(blk, x)[0][:, p]) <= 1e-10


def test_assemble_grouped_examples(rng):
    assert assemble_grouped(GroupedPerm.identity(8, 4)).tolist() == list(range(8))
    assert assemble_grouped(GroupedPerm(2, (np.array([1, 0]), np.array([0, 1])))).tolist() == [1, 0, 2, 3]
    gp = GroupedPerm(4, tuple(rng.permutation(4) for _ in range(3)))
    glob = assemble_grouped(gp)
    assert (glob // 4 == np.arange(12) // 4).all()


def test_grouped_perm_validation():
    with pytest.raises((ShapeError, ValueError)):
        GroupedPerm(3, (np.array([0, 1]),))
    with pytest.raises((ShapeError, ValueError)):
        GroupedPerm(2, (np.array([0, 0]),))


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 6))
def test_grouped_composition_closed(seed, groups, size):
    rng = np.random.default_rng(seed)
    a = GroupedPerm(size, tuple(rng.permutation(size) for _ in range(groups)))
    b = GroupedPerm(size, tuple(rng.permutation(size) for _ in range(groups)))
    c = a.compose(b)
    assert isinstance(c, GroupedPerm) and c.group_size == size
    x = np.arange(size * groups)
    assert np.array_equal(x[assemble_grouped(a)][assemble_grouped(b)], x[assemble_grouped(c)])


def test_inverse_mask_identity(rng):
    w = rng.standard_normal((4, 16))
    spec = SaliencySpec(SaliencyKind.WANDA, rng.random(16))
    assert np.array_equal(inverse_permuted_mask(w, np.arange(16), spec, P24), nm_mask(saliency(w, spec), P24))


def test_inverse_mask_crafted_row():
    w = np.array([[9.0, 8, 7, 6, 1, 1, 1, 1]])
    ident = inverse_permuted_mask(w, np.arange(8), MAG, P24)
    inter = inverse_permuted_mask(w, [0, 1, 4, 5, 2, 3, 6, 7], MAG, P24)
    assert retained_saliency(np.abs(w), ident) == 19
    assert retained_saliency(np.abs(w), inter) == 30
    assert inter.tolist() == [[True, True, True, True, False, False, False, False]]
    # the original-layout mask breaks 2:4, the permuted one satisfies it
    assert check_nm(inter, P24)
    assert check_nm(inter[:, [0, 1, 4, 5, 2, 3, 6, 7]], P24) == []


@given(st.integers(0, 2**32 - 1))
def test_inverse_mask_consistency(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 16))
    spec = SaliencySpec(SaliencyKind.WANDA, rng.random(16))
    p = rng.permutation(16)
    mask = inverse_permuted_mask(w, p, spec, P24)
    assert check_nm(mask[:, p], P24) == []
    # masking the original equals masking the permuted copy and un-permuting it
    masked_perm = w[:, p] * nm_mask(saliency(w[:, p], spec.permuted(p)), P24)
    assert np.array_equal(w * mask, masked_perm[:, perm_invert(p)])
