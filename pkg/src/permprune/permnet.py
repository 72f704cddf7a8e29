"""Channel-permutation algebra for linear chains and Transformer blocks.

All permutations are gather vectors (see :mod:`permprune.linalg`). Permuting
the input channels of a layer gathers weight columns; the compensating move
on the producer gathers its output rows (and bias). Inside a block the
coupled sets are

* attention: output rows of ``wq``, ``wk``, ``wv`` with input columns of ``wo``
* FFN: output rows of ``w_up``, ``w_gate`` with input columns of ``w_down``

and each set shares one permutation.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .linalg import ShapeError, as_matrix, check_perm, perm_invert
from .sparsity import NMPattern, SaliencySpec, nm_mask, saliency


@dataclass(frozen=True)
class LinearLayer:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = as_matrix(self.weight, "weight")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if b.size != w.shape[0]:
                raise ShapeError(f"bias length {b.size} != d_out {w.shape[0]}")
            object.__setattr__(self, "bias", b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64) @ self.weight.T
        return out if self.bias is None else out + self.bias


WEIGHT_NAMES = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down")


@dataclass(frozen=True)
class ToyBlock:
    """Single-head attention plus gated FFN, no normalisation."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, as_matrix(getattr(self, f.name), f.name))
        d, ff = self.d_hidden, self.d_ff
        expect = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
                  "w_up": (ff, d), "w_gate": (ff, d), "w_down": (d, ff)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d_hidden(self) -> int:
        return self.wq.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w_up.shape[0]

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_NAMES}

    def equals(self, other: "ToyBlock") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in WEIGHT_NAMES)


@dataclass(frozen=True)
class GroupedPerm:
    group_size: int
    perms: tuple

    def __post_init__(self):
        perms = tuple(check_perm(p, self.group_size) for p in self.perms)
        if not perms:
            raise ValueError("GroupedPerm needs at least one group")
        object.__setattr__(self, "perms", perms)

    @property
    def size(self) -> int:
        return self.group_size * len(self.perms)

    @classmethod
    def identity(cls, dim: int, groups: int) -> "GroupedPerm":
        if groups < 1 or dim % groups:
            raise ShapeError(f"{groups} groups do not divide dimension {dim}")
        n = dim // groups
        return cls(n, tuple(np.arange(n) for _ in range(groups)))

    def compose(self, other: "GroupedPerm") -> "GroupedPerm":
        """Gather by ``self`` then by ``other``, group by group."""
        if other.group_size != self.group_size or len(other.perms) != len(self.perms):
            raise ShapeError("grouped permutations have different layouts")
        return GroupedPerm(self.group_size, tuple(a[b] for a, b in zip(self.perms, other.perms)))


def assemble_grouped(gp: GroupedPerm) -> np.ndarray:
    """Block-diagonal global gather vector from per-group permutations."""
    return np.concatenate([g * gp.group_size + p for g, p in enumerate(gp.perms)])


def permute_linear_input(layer: LinearLayer, perm) -> LinearLayer:
    p = check_perm(perm, layer.d_in)
    return LinearLayer(layer.weight[:, p], layer.bias)


def propagate_to_prev_output(prev: LinearLayer, perm) -> LinearLayer:
    p = check_perm(perm, prev.d_out)
    bias = None if prev.bias is None else prev.bias[p]
    return LinearLayer(prev.weight[p], bias)


def permute_attention_internal(block: ToyBlock, perm) -> ToyBlock:
    p = check_perm(perm, block.d_hidden)
    return replace(block, wq=block.wq[p], wk=block.wk[p], wv=block.wv[p], wo=block.wo[:, p])


def permute_ffn_internal(block: ToyBlock, perm) -> ToyBlock:
    p = check_perm(perm, block.d_ff)
    return replace(block, w_up=block.w_up[p], w_gate=block.w_gate[p], w_down=block.w_down[:, p])


def permute_residual(block: ToyBlock, perm) -> ToyBlock:
    """Permute the residual stream: ``f'(x[:, p]) == f(x)[:, p]``.

    Readers of the stream gather input columns, writers gather output rows.
    """
    p = check_perm(perm, block.d_hidden)
    return replace(
        block,
        wq=block.wq[:, p], wk=block.wk[:, p], wv=block.wv[:, p], wo=block.wo[p],
        w_up=block.w_up[:, p], w_gate=block.w_gate[:, p], w_down=block.w_down[p],
    )


def inverse_permuted_mask(w, perm, spec: SaliencySpec, pattern: NMPattern) -> np.ndarray:
    """N:M mask chosen in the input-permuted layout, mapped back to the original one."""
    w = as_matrix(w, "weight")
    p = check_perm(perm, w.shape[1])
    pattern.check_dim(w.shape[1])
    mask_perm = nm_mask(saliency(w[:, p], spec.permuted(p)), pattern)
    return mask_perm[:, perm_invert(p)]
