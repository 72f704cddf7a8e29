"""End-to-end learning of per-group permutation cost matrices.

Per coupled set (attention-internal or FFN-internal dimension of a block)
and per group of channels, a square cost matrix is trained. One step:

1. Sinkhorn turns each cost matrix into a soft permutation ``P`` (on tape).
2. The consumer weight ``W`` (``wo`` or ``w_down``) is soft-permuted to
   ``W P``.
3. The hard rounding of ``P`` fixes a layout; Wanda saliency and the N:M
   mask are computed there and enter the tape as a constant.
4. The masked permuted weight is mapped back with ``P^T`` and the model runs
   in its original layout. Coupled producer rows need no change in that
   layout, so the shared permutation is implied.
5. Loss = cross-entropy + alpha * layer-wise distillation to the dense model.

All model weights are frozen; only the cost matrices receive gradients.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .linalg import ShapeError, check_perm
from .matching import anneal_schedule, hungarian_solve, round_to_hard
from .permnet import (
    WEIGHT_NAMES,
    GroupedPerm,
    ToyBlock,
    assemble_grouped,
    inverse_permuted_mask,
    permute_attention_internal,
    permute_ffn_internal,
)
from .sparsity import NMPattern, SaliencyKind, SaliencySpec, check_nm, nm_mask, retained_saliency, saliency
from .toymodel import Dataset, ToyModel, const_weights, model_forward_tape

log = logging.getLogger(__name__)

DISTILL_FORMS = ("squared_l2", "smooth_l1")

# coupled set -> (consumer weight whose input dim is permuted, producers whose rows follow)
COUPLED = {
    "attn": ("wo", ("wq", "wk", "wv")),
    "ffn": ("w_down", ("w_up", "w_gate")),
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 64
    alpha_distill: float = 1e-5
    eps_start: float = 1.0
    eps_end: float = 0.03
    sinkhorn_iters: int = 50
    groups: int = 4
    pattern: NMPattern = field(default_factory=NMPattern)
    saliency: str = "wanda"
    seed: int = 0
    distill_form: str = "squared_l2"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.sinkhorn_iters < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and sinkhorn_iters >= 1 required")
        if not 0 < self.eps_end <= self.eps_start:
            raise ValueError("need eps_start >= eps_end > 0")
        if self.distill_form not in DISTILL_FORMS:
            raise ValueError(f"distill_form must be one of {DISTILL_FORMS}")
        SaliencyKind(self.saliency)


def set_names(model: ToyModel) -> list[tuple[str, int, str, int]]:
    """``(set_key, block_index, kind, dim)`` for every coupled set."""
    out = []
    for b, blk in enumerate(model.blocks):
        out.append((f"b{b}.attn", b, "attn", blk.d_hidden))
        out.append((f"b{b}.ffn", b, "ffn", blk.d_ff))
    return out


def cost_key(set_key: str, g: int) -> str:
    return f"{set_key}.g{g}"


def init_costs(model: ToyModel, groups: int) -> dict[str, np.ndarray]:
    """Zero costs: uniform soft permutations and identity hard ones."""
    params = {}
    for key, _, _, dim in set_names(model):
        if dim % groups:
            raise ShapeError(f"{groups} groups do not divide {key} dimension {dim}")
        n = dim // groups
        for g in range(groups):
            params[cost_key(key, g)] = np.zeros((n, n))
    return params


def group_costs(params: dict[str, np.ndarray], set_key: str) -> list[np.ndarray]:
    out, g = [], 0
    while cost_key(set_key, g) in params:
        out.append(params[cost_key(set_key, g)])
        g += 1
    if not out:
        raise KeyError(f"no cost matrices for {set_key}")
    return out


# -- calibration -----------------------------------------------------------


def calibrate_act_norms(model: ToyModel, x) -> list[dict[str, SaliencySpec]]:
    """Per pruned layer, the L2 norm of each input channel over the batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ValueError("calibration batch is empty")
    tape = Tape()
    _, _, inputs = model_forward_tape(tape, const_weights(tape, model), model, x)
    return [
        {n: SaliencySpec(SaliencyKind.WANDA, np.linalg.norm(ins[n].value, axis=0)) for n in WEIGHT_NAMES}
        for ins in inputs
    ]


def magnitude_specs(model: ToyModel) -> list[dict[str, SaliencySpec]]:
    return [{n: SaliencySpec(SaliencyKind.MAGNITUDE) for n in WEIGHT_NAMES} for _ in model.blocks]


# -- losses ----------------------------------------------------------------


def loss_task(tape: Tape, logits: Node, labels) -> Node:
    """Mean cross-entropy with a log-softmax (logsumexp) formulation."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.size != batch:
        raise ShapeError(f"{labels.size} labels for {batch} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    onehot = np.zeros((batch, classes))
    onehot[np.arange(batch), labels] = 1.0
    picked = tape.sum(tape.mul(logits, tape.const(onehot)), axis=1)
    per_row = tape.sub(tape.logsumexp(logits, axis=1), picked)
    return tape.scale(tape.sum(per_row), 1.0 / max(batch, 1))


def loss_distill(tape: Tape, h_orig: list, h_pruned: list[Node], form: str = "squared_l2", delta: float = 1.0) -> Node:
    """Sum over layers of squared Frobenius distance (or elementwise Huber)."""
    if len(h_orig) != len(h_pruned):
        raise ShapeError(f"{len(h_orig)} teacher features vs {len(h_pruned)} student features")
    if form not in DISTILL_FORMS:
        raise ValueError(f"unknown distillation form {form!r}")
    total = tape.const(np.zeros((1, 1)))
    for t, s in zip(h_orig, h_pruned):
        t = t if isinstance(t, Node) else tape.const(t)
        if t.shape != s.shape:
            raise ShapeError(f"feature shapes differ: {t.shape} vs {s.shape}")
        diff = tape.sub(t, s)
        term = tape.mul(diff, diff) if form == "squared_l2" else tape.smooth_terms(diff, delta)
        total = tape.add(total, tape.sum(term))
    return total


def loss_total(tape: Tape, task: Node, distill: Node, alpha: float) -> Node:
    return tape.add(task, tape.scale(distill, alpha))


# -- soft permutation on the tape -----------------------------------------


def sinkhorn_tape(tape: Tape, cost: Node, epsilon: float, iterations: int) -> Node:
    """Log-domain Sinkhorn unrolled on the tape; returns ``Diag(u) K Diag(v)``."""
    n = cost.shape[0]
    log_k = tape.scale(cost, -1.0 / epsilon)
    log_u = tape.const(np.zeros((n, 1)))
    log_v = tape.const(np.zeros((1, n)))
    for _ in range(iterations):
        log_u = tape.neg(tape.logsumexp(tape.add(log_k, log_v), axis=1))
        log_v = tape.neg(tape.logsumexp(tape.add(log_k, log_u), axis=0))
    return tape.exp(tape.add(tape.add(log_k, log_u), log_v))


def block_diag_tape(tape: Tape, blocks: list[Node]) -> Node:
    n = blocks[0].shape[0]
    dim = n * len(blocks)
    total = None
    for g, p in enumerate(blocks):
        sel = np.zeros((dim, n))
        sel[g * n : (g + 1) * n] = np.eye(n)
        term = tape.matmul(tape.matmul(tape.const(sel), p), tape.const(sel.T))
        total = term if total is None else tape.add(total, term)
    return total


# -- per-step pipeline -----------------------------------------------------


@dataclass
class StepLosses:
    total: float
    task: float
    distill: float


def _plain_masks(model: ToyModel, specs, pattern: NMPattern) -> list[dict[str, np.ndarray]]:
    return [{n: nm_mask(saliency(w, specs[b][n]), pattern) for n, w in blk.weights().items()}
            for b, blk in enumerate(model.blocks)]


def soft_perms(tape: Tape, leaves: dict[str, Node], model: ToyModel, epsilon: float, iterations: int):
    """Soft permutation nodes per group, keyed by set."""
    out = {}
    for key, *_ in set_names(model):
        g, nodes = 0, []
        while cost_key(key, g) in leaves:
            try:
                nodes.append(sinkhorn_tape(tape, leaves[cost_key(key, g)], epsilon, iterations))
            except FloatingPointError as err:
                raise TrainingError(f"Sinkhorn failed for layer {key} group {g}: {err}") from err
            g += 1
        out[key] = nodes
    return out


def hard_from_soft(soft: dict[str, list[Node]]) -> dict[str, np.ndarray]:
    return {key: assemble_grouped(GroupedPerm(nodes[0].shape[0], tuple(round_to_hard(p.value) for p in nodes)))
            for key, nodes in soft.items()}


def training_loss(tape: Tape, leaves: dict[str, Node], model: ToyModel, x, y, specs, cfg: TrainConfig,
                  epsilon: float, hard: dict[str, np.ndarray] | None = None, teacher_feats=None):
    """Build the composite loss on ``tape``; returns ``(total, task, distill, hard_perms)``."""
    soft = soft_perms(tape, leaves, model, epsilon, cfg.sinkhorn_iters)
    if hard is None:
        hard = hard_from_soft(soft)
    plain = _plain_masks(model, specs, cfg.pattern)
    block_weights = []
    for b, blk in enumerate(model.blocks):
        w = {n: tape.mask_const(tape.const(a), plain[b][n]) for n, a in blk.weights().items()}
        for kind, (consumer, _) in COUPLED.items():
            key = f"b{b}.{kind}"
            perm = hard[key]
            weight = getattr(blk, consumer)
            mask_perm = nm_mask(saliency(weight[:, perm], specs[b][consumer].permuted(perm)), cfg.pattern)
            p_full = block_diag_tape(tape, soft[key])
            wp = tape.matmul(tape.const(weight), p_full)
            w[consumer] = tape.matmul(tape.mask_const(wp, mask_perm), tape.transpose(p_full))
        block_weights.append(w)
    logits, feats, _ = model_forward_tape(tape, block_weights, model, x)
    if teacher_feats is None:
        teacher_feats = dense_features(model, x)
    task = loss_task(tape, logits, y)
    distill = loss_distill(tape, teacher_feats, feats, cfg.distill_form)
    total = loss_total(tape, task, distill, cfg.alpha_distill)
    return total, task, distill, hard


def dense_features(model: ToyModel, x) -> list[np.ndarray]:
    tape = Tape()
    _, feats, _ = model_forward_tape(tape, const_weights(tape, model), model, x)
    return [f.value for f in feats]


def train_step(params: dict[str, np.ndarray], model: ToyModel, batch: Dataset, cfg: TrainConfig,
               epsilon: float, specs, hard: dict[str, np.ndarray] | None = None):
    """Gradients of the composite loss with respect to every cost matrix."""
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    with np.errstate(over="raise", invalid="raise"):
        try:
            total, task, distill, _ = training_loss(tape, leaves, model, batch.x, batch.y, specs, cfg, epsilon, hard)
        except FloatingPointError as err:
            raise TrainingError(f"non-finite value in forward pass (epsilon={epsilon:.4g}): {err}") from err
        except TrainingError as err:
            raise TrainingError(f"{err} (epsilon={epsilon:.4g})") from err
    grads = tape.backward(total)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for cost matrix {k} (epsilon={epsilon:.4g})")
    losses = StepLosses(float(total.value[0, 0]), float(task.value[0, 0]), float(distill.value[0, 0]))
    return grads, losses


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    """Decoupled weight decay, then a bias-corrected Adam step."""
    t = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = cfg.beta1 * state.m.get(k, np.zeros_like(p)) + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(k, np.zeros_like(p)) + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        decayed = p * (1 - cfg.lr * cfg.weight_decay)
        new_params[k] = decayed - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        m_out[k], v_out[k] = m, v
    return new_params, AdamState(t, m_out, v_out)


# -- inference -------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PERMPRUNE_THREADS", "1")))
    except ValueError:
        return 1


def hard_perms(params: dict[str, np.ndarray], model: ToyModel) -> dict[str, np.ndarray]:
    """Hungarian on each group's cost matrix, assembled per coupled set."""
    keys = [key for key, *_ in set_names(model)]
    costs = {key: group_costs(params, key) for key in keys}
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        solved = {key: list(pool.map(hungarian_solve, cs)) for key, cs in costs.items()}
    return {key: assemble_grouped(GroupedPerm(costs[key][0].shape[0], tuple(ps))) for key, ps in solved.items()}


@dataclass(frozen=True)
class PruneResult:
    model: ToyModel  # masked weights, original layout
    permuted: ToyModel  # same function, deployed layout (masks are N:M here)
    perms: dict  # set key -> global gather vector
    masks: list  # per block: name -> mask in original layout
    permuted_masks: list  # per block: name -> mask in the deployed layout
    retained: float


def layer_perm(perms: dict[str, np.ndarray], b: int, name: str, d_in: int) -> np.ndarray:
    """Input-channel permutation seen by weight ``name`` of block ``b``."""
    for kind, (consumer, _) in COUPLED.items():
        if name == consumer:
            return perms[f"b{b}.{kind}"]
    return np.arange(d_in)


def inference_prune(params: dict[str, np.ndarray], model: ToyModel, cfg: TrainConfig, specs,
                    perms: dict[str, np.ndarray] | None = None) -> PruneResult:
    perms = hard_perms(params, model) if perms is None else perms
    for key, _, _, dim in set_names(model):
        check_perm(perms[key], dim)
    masked, deployed, masks, pmasks, retained = [], [], [], [], 0.0
    for b, blk in enumerate(model.blocks):
        mb, pb = {}, {}
        for name, w in blk.weights().items():
            p = layer_perm(perms, b, name, w.shape[1])
            mask = inverse_permuted_mask(w, p, specs[b][name], cfg.pattern)
            mb[name] = mask
            pb[name] = mask[:, p]
            retained += retained_saliency(saliency(w[:, p], specs[b][name].permuted(p)), pb[name])
        masks.append(mb)
        m_block = ToyBlock(**{n: w * mb[n] for n, w in blk.weights().items()})
        masked.append(m_block)
        deployed.append(permute_ffn_internal(permute_attention_internal(m_block, perms[f"b{b}.attn"]),
                                             perms[f"b{b}.ffn"]))
        # masks of the producers follow their rows
        pa, pf = perms[f"b{b}.attn"], perms[f"b{b}.ffn"]
        pb = dict(pb)
        for n in ("wq", "wk", "wv"):
            pb[n] = pb[n][pa]
        for n in ("w_up", "w_gate"):
            pb[n] = pb[n][pf]
        pmasks.append(pb)
    return PruneResult(model.with_blocks(masked), model.with_blocks(deployed), perms, masks, pmasks, retained)


def nm_violations(result: PruneResult, pattern: NMPattern) -> list:
    """Groups breaking the N:M rule in the deployed layout (weights and masks)."""
    bad = []
    for b, (blk, pm) in enumerate(zip(result.permuted.blocks, result.permuted_masks)):
        for name, w in blk.weights().items():
            for r, g, c in check_nm(pm[name], pattern):
                bad.append((b, name, "mask", r, g, c))
            for r, g, c in check_nm(w != 0, pattern):
                bad.append((b, name, "weight", r, g, c))
    return bad


def evaluate(model: ToyModel, data: Dataset) -> tuple[float, float]:
    """Held-out cross-entropy and accuracy of ``model`` (no pruning applied here)."""
    tape = Tape()
    logits, _, _ = model_forward_tape(tape, const_weights(tape, model), model, data.x)
    loss = loss_task(tape, logits, data.y)
    acc = float(np.mean(np.argmax(logits.value, axis=1) == data.y)) if len(data) else 0.0
    return float(loss.value[0, 0]), acc


# -- loop ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    eps: float
    loss_total: float
    loss_task: float
    loss_distill: float
    eval_loss: float
    eval_acc: float
    retained_saliency: float
    seconds: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)

    def as_rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    def eval_losses(self) -> list[float]:
        return [r.eval_loss for r in self.records]


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _full_loss(params, model, data, cfg, epsilon, specs) -> StepLosses:
    tape = Tape()
    leaves = {k: tape.leaf(v, requires_grad=False) for k, v in params.items()}
    total, task, distill, _ = training_loss(tape, leaves, model, data.x, data.y, specs, cfg, epsilon)
    return StepLosses(float(total.value[0, 0]), float(task.value[0, 0]), float(distill.value[0, 0]))


def train_loop(model: ToyModel, train: Dataset, evals: Dataset, cfg: TrainConfig, specs=None,
               params: dict[str, np.ndarray] | None = None, timed: bool = False):
    """Train cost matrices; epoch 0 of the report is the untrained (identity) baseline."""
    if specs is None:
        specs = calibrate_act_norms(model, train.x) if cfg.saliency == "wanda" else magnitude_specs(model)
    params = init_costs(model, cfg.groups) if params is None else dict(params)
    frozen = [b.weights() for b in model.blocks]
    frozen = [{n: a.copy() for n, a in w.items()} for w in frozen]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    steps_per_epoch = -(-len(train) // cfg.batch_size) if len(train) else 0
    total_steps = cfg.epochs * steps_per_epoch
    report = TrainReport()

    def record(epoch, eps, losses, started):
        pruned = inference_prune(params, model, cfg, specs)
        eval_loss, eval_acc = evaluate(pruned.model, evals)
        rec = EpochRecord(epoch, eps, losses.total, losses.task, losses.distill, eval_loss, eval_acc,
                          pruned.retained, time.perf_counter() - started if timed else 0.0)
        for k, v in asdict(rec).items():
            if not np.isfinite(v):
                raise TrainingError(f"non-finite {k} at epoch {epoch}")
        report.records.append(rec)
        log.info("epoch %d eps %.4g loss %.5f eval_loss %.5f eval_acc %.4f", epoch, eps, losses.total,
                 eval_loss, eval_acc)

    started = time.perf_counter()
    base = _full_loss(params, model, train, cfg, cfg.eps_start, specs) if len(train) else StepLosses(0.0, 0.0, 0.0)
    record(0, cfg.eps_start, base, started)

    state = AdamState()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        sums = np.zeros(3)
        count = 0
        eps = cfg.eps_start
        for idx in _batches(len(train), cfg.batch_size, rng):
            eps = anneal_schedule(step, total_steps - 1, cfg.eps_start, cfg.eps_end)
            try:
                grads, losses = train_step(params, model, train.subset(idx), cfg, eps, specs)
            except TrainingError as err:
                raise TrainingError(f"step {step} (epoch {epoch}): {err}") from err
            params, state = adamw_update(params, grads, state, cfg)
            sums += (losses.total * idx.size, losses.task * idx.size, losses.distill * idx.size)
            count += idx.size
            step += 1
        mean = sums / max(count, 1)
        record(epoch, eps, StepLosses(*mean), started)

    for b, w in zip(model.blocks, frozen):
        for n, a in w.items():
            if not np.array_equal(getattr(b, n), a):
                raise TrainingError(f"frozen weight {n} changed during training")
    return params, report
