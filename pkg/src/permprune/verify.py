"""Self-check suites run by ``permprune verify``.

Each suite returns ``None`` on success or a JSON-serialisable counterexample
describing the first failure it found.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import relative_error, value_and_grad, numeric_grad
from .linalg import perm_to_matrix
from .matching import (
    SinkhornConfig,
    assignment_cost,
    brute_force_assign,
    hungarian_solve,
    sinkhorn_solve,
)
from .permnet import (
    LinearLayer,
    ToyBlock,
    permute_attention_internal,
    permute_ffn_internal,
    permute_linear_input,
    propagate_to_prev_output,
)
from .toymodel import SynthTask, block_forward, gen_task, planted_model
from .trainer import TrainConfig, calibrate_act_norms, inference_prune, init_costs, nm_violations, training_loss


@dataclass
class SuiteResult:
    name: str
    passed: bool
    seconds: float
    counterexample: dict | None = None


def random_block(rng, d: int, ff: int, scale: float = 0.5) -> ToyBlock:
    def mat(r, c):
        return rng.standard_normal((r, c)) * scale / np.sqrt(c)

    return ToyBlock(mat(d, d), mat(d, d), mat(d, d), mat(d, d), mat(ff, d), mat(ff, d), mat(d, ff))


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def suite_consistency(seeds: int = 100) -> dict | None:
    """Permuted-and-compensated models compute the same function."""
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        d_in, d_mid, d_out = 8, 16, 4
        l1 = LinearLayer(rng.standard_normal((d_mid, d_in)), rng.standard_normal(d_mid))
        l2 = LinearLayer(rng.standard_normal((d_out, d_mid)), rng.standard_normal(d_out))
        x = rng.standard_normal((5, d_in))
        p = rng.permutation(d_mid)
        ref = l2(l1(x))
        got = permute_linear_input(l2, p)(propagate_to_prev_output(l1, p)(x))
        if _rel(got, ref) > 1e-12:
            return {"suite": "linear_chain", "seed": seed, "perm": p.tolist(), "rel_err": _rel(got, ref)}
        d = int(rng.choice([8, 16, 32]))
        ff = 2 * d
        blk = random_block(rng, d, ff)
        x = rng.standard_normal((4, d))
        ref, _ = block_forward(blk, x)
        pa, pf = rng.permutation(d), rng.permutation(ff)
        got, _ = block_forward(permute_ffn_internal(permute_attention_internal(blk, pa), pf), x)
        if _rel(got, ref) > 1e-10:
            return {"suite": "block", "seed": seed, "d_hidden": d, "rel_err": _rel(got, ref)}
    return None


def suite_sinkhorn(count: int = 100) -> dict | None:
    """Marginals at T=50 where 50 sweeps suffice; the coldest temperature gets more sweeps.

    Column sums are exact after the last column update at any T; row sums
    converge at a rate governed by range(C) / epsilon.
    """
    rng = np.random.default_rng(1)
    for i in range(count):
        n = (8, 16, 32)[i % 3]
        eps = (0.05, 0.5, 5.0)[(i // 3) % 3]
        c = rng.random((n, n))
        p = sinkhorn_solve(c, SinkhornConfig(eps, 50 if eps >= 0.5 else 2000))
        worst = max(np.abs(p.sum(0) - 1).max(), np.abs(p.sum(1) - 1).max())
        if worst > 1e-6 or (p < 0).any():
            return {"instance": i, "n": n, "epsilon": eps, "marginal_err": float(worst)}
    return None


def suite_hungarian(per_n: int = 200) -> dict | None:
    rng = np.random.default_rng(2)
    for n in range(2, 8):
        for i in range(per_n):
            c = rng.random((n, n))
            perm = hungarian_solve(c)
            _, best = brute_force_assign(c)
            if assignment_cost(c, perm) != best:
                return {"n": n, "instance": i, "cost": c.tolist(), "hungarian": perm.tolist(), "optimum": best}
    return None


def suite_gradients() -> dict | None:
    spec = SynthTask(input_dim=8, d_ff=16, num_train=8, num_eval=4, perm_groups=2, seed=3)
    model = planted_model(spec)
    train, _ = gen_task(spec, model)
    cfg = TrainConfig(groups=2, sinkhorn_iters=10, alpha_distill=1e-2)
    specs = calibrate_act_norms(model, train.x)
    rng = np.random.default_rng(4)
    params = {k: rng.standard_normal(v.shape) for k, v in init_costs(model, 2).items()}
    hard = {}

    def program(tape, leaves):
        total, _, _, h = training_loss(tape, leaves, model, train.x, train.y, specs, cfg, 0.7, hard or None)
        hard.update(h)
        return total

    _, grads = value_and_grad(program, params)
    numeric = numeric_grad(program, params, 1e-5)
    for k in params:
        err = relative_error(grads[k], numeric[k])
        if err.max() > 1e-4:
            idx = np.unravel_index(int(err.argmax()), err.shape)
            return {"param": k, "index": list(map(int, idx)), "tape": float(grads[k][idx]),
                    "finite_diff": float(numeric[k][idx])}
    return None


def suite_nm_constraint(inject_fault: bool = False) -> dict | None:
    for seed in range(3):
        spec = SynthTask(num_train=32, num_eval=8, seed=seed)
        model = planted_model(spec)
        train, _ = gen_task(spec, model)
        cfg = TrainConfig(groups=2)
        rng = np.random.default_rng(seed)
        params = {k: rng.standard_normal(v.shape) for k, v in init_costs(model, 2).items()}
        result = inference_prune(params, model, cfg, calibrate_act_norms(model, train.x))
        if inject_fault:
            mask = result.permuted_masks[0]["w_down"]
            mask[0, 0] = not mask[0, 0]
        bad = nm_violations(result, cfg.pattern)
        if bad:
            b, name, what, row, group, count = bad[0]
            return {"seed": seed, "block": b, "layer": name, "what": what, "row": row, "group": group,
                    "nonzeros": count, "expected": cfg.pattern.n}
    return None


def suite_perm_matrix() -> dict | None:
    rng = np.random.default_rng(5)
    for n in (1, 2, 5, 16):
        p = rng.permutation(n)
        m = perm_to_matrix(p)
        if not np.array_equal(m @ m.T, np.eye(n)):
            return {"perm": p.tolist()}
    return None


SUITES: dict[str, Callable[..., dict | None]] = {
    "permutation_matrices": suite_perm_matrix,
    "output_consistency": suite_consistency,
    "sinkhorn_marginals": suite_sinkhorn,
    "hungarian_optimality": suite_hungarian,
    "gradient_check": suite_gradients,
    "nm_constraint": suite_nm_constraint,
}


def run_suites(inject_fault: bool = False, stop_on_failure: bool = False) -> list[SuiteResult]:
    results = []
    for name, fn in SUITES.items():
        start = time.perf_counter()
        counter = fn(inject_fault=inject_fault) if name == "nm_constraint" else fn()
        results.append(SuiteResult(name, counter is None, time.perf_counter() - start, counter))
        if counter is not None and stop_on_failure:
            break
    return results
