"""Saliency metrics and N:M mask generation.

Groups are contiguous runs of ``m`` entries along the input dimension of
each output row (columns of a ``(d_out, d_in)`` weight).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import ShapeError, as_matrix


class ConfigError(ValueError):
    """Invalid pruning configuration."""


@dataclass(frozen=True)
class NMPattern:
    n: int = 2
    m: int = 4

    def __post_init__(self):
        if not (1 <= self.n <= self.m):
            raise ConfigError(f"invalid N:M pattern {self.n}:{self.m}")

    def check_dim(self, d: int) -> None:
        if d % self.m:
            raise ShapeError(f"dimension {d} is not divisible by group size {self.m}")

    @classmethod
    def parse(cls, text: str) -> "NMPattern":
        try:
            n, m = (int(s) for s in text.strip().split(":"))
        except ValueError as err:
            raise ConfigError(f"cannot parse N:M pattern {text!r}") from err
        return cls(n, m)

    def __str__(self):
        return f"{self.n}:{self.m}"


class SaliencyKind(str, Enum):
    MAGNITUDE = "magnitude"
    WANDA = "wanda"


@dataclass(frozen=True)
class SaliencySpec:
    kind: SaliencyKind = SaliencyKind.WANDA
    act_norms: np.ndarray | None = None

    def __post_init__(self):
        if self.act_norms is not None:
            norms = np.asarray(self.act_norms, dtype=np.float64)
            if norms.ndim != 1 or np.any(norms < 0) or not np.all(np.isfinite(norms)):
                raise ConfigError("act_norms must be a finite nonnegative vector")
            object.__setattr__(self, "act_norms", norms)

    def permuted(self, perm) -> "SaliencySpec":
        """Statistics travel with their channels under an input permutation."""
        if self.act_norms is None:
            return self
        return SaliencySpec(self.kind, self.act_norms[np.asarray(perm)])


def saliency(w, spec: SaliencySpec) -> np.ndarray:
    """Magnitude ``|W|`` or Wanda ``|W_ij| * ||X_j||_2``."""
    w = as_matrix(w, "weight")
    kind = SaliencyKind(spec.kind)
    if kind is SaliencyKind.MAGNITUDE:
        return np.abs(w)
    if spec.act_norms is None:
        raise ConfigError("Wanda saliency requires act_norms")
    if spec.act_norms.size != w.shape[1]:
        raise ShapeError(f"act_norms length {spec.act_norms.size} != d_in {w.shape[1]}")
    return np.abs(w) * spec.act_norms[None, :]


def nm_mask(sal, pattern: NMPattern) -> np.ndarray:
    """Keep the ``n`` most salient entries in every group of ``m``.

    Ties go to the lowest index (stable sort on negated saliency).
    """
    sal = np.asarray(sal, dtype=np.float64)
    rows, cols = sal.shape
    pattern.check_dim(cols)
    groups = sal.reshape(rows, cols // pattern.m, pattern.m)
    order = np.argsort(-groups, axis=-1, kind="stable")[..., : pattern.n]
    mask = np.zeros(groups.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask.reshape(rows, cols)


def check_nm(mask, pattern: NMPattern) -> list[tuple[int, int, int]]:
    """Return ``(row, group, count)`` for every group violating the pattern."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    pattern.check_dim(cols)
    counts = mask.reshape(rows, cols // pattern.m, pattern.m).sum(-1)
    bad = np.argwhere(counts != pattern.n)
    return [(int(r), int(g), int(counts[r, g])) for r, g in bad]


def retained_saliency(sal, mask) -> float:
    sal = np.asarray(sal, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if sal.shape != mask.shape:
        raise ShapeError(f"saliency {sal.shape} and mask {mask.shape} differ")
    return float(sal[mask].sum())
