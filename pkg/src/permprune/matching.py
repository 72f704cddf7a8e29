"""Bipartite matching: entropic Sinkhorn relaxation and exact assignment.

Cost matrices are indexed ``C[source, destination]``. A soft permutation
``P`` uses the same indexing, so ``W @ P`` moves input column ``i`` of ``W``
towards position ``j`` with weight ``P[i, j]``. Hard results are returned as
gather vectors (``perm[j]`` is the source placed at destination ``j``).
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, as_matrix, check_perm, perm_invert


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1.0
    iterations: int = 50
    rescale_by_n: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def _square(c, name="cost") -> np.ndarray:
    c = as_matrix(c, name)
    if c.shape[0] != c.shape[1]:
        raise ShapeError(f"{name} must be square, got {c.shape}")
    return c


def logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    mx = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True)) + mx
    return np.squeeze(out, axis=axis)


def sinkhorn_potentials(c, cfg: SinkhornConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(log_k, log_u, log_v)`` after ``cfg.iterations`` log-domain sweeps."""
    c = _square(c)
    log_k = -c / cfg.epsilon
    log_u = np.zeros(c.shape[0])
    log_v = np.zeros(c.shape[1])
    for _ in range(cfg.iterations):
        log_u = -logsumexp(log_k + log_v[None, :], axis=1)
        log_v = -logsumexp(log_k.T + log_u[None, :], axis=1)
    return log_k, log_u, log_v


def sinkhorn_solve(c, cfg: SinkhornConfig = SinkhornConfig()) -> np.ndarray:
    """Soft permutation ``Diag(u) K Diag(v)`` with ``K = exp(-C / eps)``."""
    log_k, log_u, log_v = sinkhorn_potentials(c, cfg)
    p = np.exp(log_u[:, None] + log_k + log_v[None, :])
    if cfg.rescale_by_n:
        p = p * p.shape[0]
    if not np.all(np.isfinite(p)):
        raise FloatingPointError(
            f"Sinkhorn produced non-finite values (epsilon={cfg.epsilon} too small for the cost scale)"
        )
    return p


def anneal_schedule(step: int, total: int, eps_start: float, eps_end: float) -> float:
    """Geometric interpolation from ``eps_start`` (step 0) to ``eps_end`` (step ``total``)."""
    if not 0 < eps_end <= eps_start:
        raise ValueError("need eps_start >= eps_end > 0")
    if total <= 0:
        return float(eps_end) if step > 0 else float(eps_start)
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step == total:
        return float(eps_end)
    return float(eps_start * (eps_end / eps_start) ** (step / total))


def hungarian_solve(c) -> np.ndarray:
    """Minimum-cost assignment via shortest augmenting paths with potentials, O(N^3).

    Returns ``perm`` minimising ``sum_j C[perm[j], j]``. Scan order is fixed,
    so ties resolve deterministically (lowest column first).
    """
    c = _square(c)
    n = c.shape[0]
    # 1-based bookkeeping; column 0 is the virtual root of each augmenting tree
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return owner[1:] - 1


def assignment_cost(c, perm) -> float:
    c = np.asarray(c, dtype=np.float64)
    p = check_perm(perm, c.shape[1])
    return float(c[p, np.arange(p.size)].sum())


@functools.lru_cache(maxsize=16)
def _all_perms(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def brute_force_assign(c, max_n: int = 9) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over all N! assignments; lexicographically first on ties."""
    c = _square(c)
    n = c.shape[0]
    if n > max_n:
        raise ValueError(f"brute force refuses N={n} > {max_n}")
    perms = _all_perms(n)
    costs = c[perms, np.arange(n)].sum(axis=1)
    best = perms[int(np.argmin(costs))].copy()
    return best, assignment_cost(c, best)


def round_to_hard(p) -> np.ndarray:
    """Nearest hard permutation to a soft one.

    Row argmax when it already is a bijection, otherwise Hungarian on the
    clamped negative log of ``p``.
    """
    p = _square(p, "soft permutation")
    dest = np.argmax(p, axis=1)
    if np.unique(dest).size == dest.size:
        return perm_invert(dest)
    return hungarian_solve(-np.log(np.clip(p, 1e-300, None)))
