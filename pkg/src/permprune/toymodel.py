"""Desk-scale Transformer classifier and a planted synthetic task.

A sample is a short sequence ``x`` of shape ``(tokens, d_hidden)``. The
model runs one or more :class:`~permprune.permnet.ToyBlock` (single-head
attention and a SiLU-gated FFN, both residual, no normalisation), mean-pools
the tokens and applies a dense linear head.

The same forward code runs on an :class:`~permprune.autodiff.Tape` for
training and, with constant leaves, for evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .linalg import ShapeError
from .permnet import WEIGHT_NAMES, ToyBlock

NEG_INF = -1e30


@dataclass(frozen=True)
class ToyModel:
    blocks: tuple
    head: np.ndarray
    head_bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "head", np.asarray(self.head, dtype=np.float64))
        object.__setattr__(self, "head_bias", np.asarray(self.head_bias, dtype=np.float64).reshape(-1))
        d = self.d_hidden
        for b in self.blocks:
            if b.d_hidden != d:
                raise ShapeError("all blocks must share d_hidden")
        if self.head.shape != (self.head_bias.size, d):
            raise ShapeError(f"head {self.head.shape} does not match bias {self.head_bias.shape} / d_hidden {d}")

    @property
    def d_hidden(self) -> int:
        return self.blocks[0].d_hidden

    @property
    def num_classes(self) -> int:
        return self.head.shape[0]

    def with_blocks(self, blocks) -> "ToyModel":
        return ToyModel(tuple(blocks), self.head, self.head_bias)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (samples, tokens, d_hidden)
    y: np.ndarray  # (samples,)

    def __len__(self):
        return int(self.y.size)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def attention_bias(batch: int, tokens: int) -> np.ndarray:
    """Additive mask keeping attention inside each sample of a flattened batch."""
    sample = np.repeat(np.arange(batch), tokens)
    return np.where(sample[:, None] == sample[None, :], 0.0, NEG_INF)


def block_forward_tape(tape: Tape, w: dict[str, Node], x: Node, bias: np.ndarray | None):
    """One block on flattened tokens ``x`` of shape ``(batch*tokens, d)``.

    Returns the block output and the seven linear-layer outputs in
    ``WEIGHT_NAMES`` order.
    """
    d = x.shape[1]
    q = tape.matmul(x, tape.transpose(w["wq"]))
    k = tape.matmul(x, tape.transpose(w["wk"]))
    v = tape.matmul(x, tape.transpose(w["wv"]))
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(d))
    if bias is not None:
        scores = tape.add(scores, tape.const(bias))
    ctx = tape.matmul(tape.softmax(scores, axis=1), v)
    o = tape.matmul(ctx, tape.transpose(w["wo"]))
    h1 = tape.add(x, o)
    gate = tape.matmul(h1, tape.transpose(w["w_gate"]))
    up = tape.matmul(h1, tape.transpose(w["w_up"]))
    act = tape.mul(tape.silu(gate), up)
    down = tape.matmul(act, tape.transpose(w["w_down"]))
    out = tape.add(h1, down)
    feats = {"wq": q, "wk": k, "wv": v, "wo": o, "w_up": up, "w_gate": gate, "w_down": down}
    inputs = {"wq": x, "wk": x, "wv": x, "wo": ctx, "w_up": h1, "w_gate": h1, "w_down": act}
    return out, [feats[n] for n in WEIGHT_NAMES], inputs


def model_forward_tape(tape: Tape, block_weights: list[dict[str, Node]], model: ToyModel, x: np.ndarray):
    """Logits ``(batch, classes)`` plus per-layer features and layer inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != model.d_hidden:
        raise ShapeError(f"expected input (batch, tokens, {model.d_hidden}), got {x.shape}")
    batch, tokens, d = x.shape
    bias = attention_bias(batch, tokens) if batch > 1 else None
    h = tape.const(x.reshape(batch * tokens, d))
    feats, inputs = [], []
    for w in block_weights:
        h, f, ins = block_forward_tape(tape, w, h, bias)
        feats.extend(f)
        inputs.append(ins)
    pool = np.kron(np.eye(batch), np.full((1, tokens), 1.0 / tokens))
    pooled = tape.matmul(tape.const(pool), h)
    logits = tape.add(tape.matmul(pooled, tape.const(model.head.T)), tape.const(model.head_bias[None, :]))
    return logits, feats, inputs


def const_weights(tape: Tape, model: ToyModel) -> list[dict[str, Node]]:
    return [{n: tape.const(a) for n, a in b.weights().items()} for b in model.blocks]


def block_forward(block: ToyBlock, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward one sample ``x`` of shape ``(tokens, d_hidden)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != block.d_hidden:
        raise ShapeError(f"expected (tokens, {block.d_hidden}) input, got {x.shape}")
    tape = Tape()
    w = {n: tape.const(a) for n, a in block.weights().items()}
    out, feats, _ = block_forward_tape(tape, w, tape.const(x), None)
    result = out.value, [f.value for f in feats]
    tape.clear()
    return result


def model_logits(model: ToyModel, x, chunk: int = 128) -> np.ndarray:
    """Logits in fixed-size chunks; flattened attention is quadratic in the batch."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for start in range(0, x.shape[0], chunk):
        tape = Tape()
        logits, _, _ = model_forward_tape(tape, const_weights(tape, model), model, x[start : start + chunk])
        out.append(logits.value)
        tape.clear()
    if not out:
        return np.zeros((0, model.num_classes))
    return np.concatenate(out)


def predict(model: ToyModel, x) -> np.ndarray:
    return np.argmax(model_logits(model, x), axis=1)


# -- synthetic task --------------------------------------------------------


@dataclass(frozen=True)
class SynthTask:
    input_dim: int = 16
    d_ff: int = 32
    num_classes: int = 4
    num_train: int = 256
    num_eval: int = 256
    tokens: int = 4
    n_blocks: int = 1
    seed: int = 0
    m_group: int = 4
    perm_groups: int = 2
    cold_scale: float = 0.1
    ffn_gain: float = 2.0
    attn_gain: float = 1.0

    def __post_init__(self):
        if self.input_dim % (self.m_group * self.perm_groups) or self.d_ff % (self.m_group * self.perm_groups):
            raise ShapeError("dimensions must be divisible by m_group * perm_groups")
        if self.num_classes < 2 or min(self.num_train, self.num_eval) < 0:
            raise ValueError("invalid task sizes")


def _friendly(rng, rows, cols, m, scale):
    """Rows already close to half-dense inside every group of ``m``."""
    w = rng.standard_normal((rows, cols))
    keep = np.argsort(rng.random((rows, cols // m, m)), axis=-1) < m // 2
    w = np.where(keep.reshape(rows, cols), w, 0.05 * w)
    return w * scale


def _clustered_columns(rng, rows, cols, m, groups, cold_scale, scale):
    """Columns come in hot/cold runs of ``m``; each permutation group is half hot."""
    w = rng.standard_normal((rows, cols))
    per_group = cols // groups // m
    hot = np.zeros(cols, dtype=bool)
    for g in range(groups):
        chosen = rng.permutation(per_group)[: per_group // 2]
        for c in chosen:
            start = (g * per_group + c) * m
            hot[start : start + m] = True
    col_scale = np.where(hot, 1.0, cold_scale)
    return w * col_scale[None, :] * scale, hot


def planted_model(spec: SynthTask) -> ToyModel:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    d, ff, m = spec.input_dim, spec.d_ff, spec.m_group
    blocks = []
    for _ in range(spec.n_blocks):
        wq = _friendly(rng, d, d, m, 1.5 / math.sqrt(d))
        wk = _friendly(rng, d, d, m, 1.5 / math.sqrt(d))
        wv = _friendly(rng, d, d, m, 1.0 / math.sqrt(d))
        wo, _ = _clustered_columns(rng, d, d, m, spec.perm_groups, spec.cold_scale, spec.attn_gain * 2 / math.sqrt(d))
        w_up = _friendly(rng, ff, d, m, 1.0 / math.sqrt(d))
        w_gate = _friendly(rng, ff, d, m, 1.0 / math.sqrt(d))
        w_down, _ = _clustered_columns(rng, d, ff, m, spec.perm_groups, spec.cold_scale, spec.ffn_gain * 2 / math.sqrt(ff))
        blocks.append(ToyBlock(wq, wk, wv, wo, w_up, w_gate, w_down))
    head = rng.standard_normal((spec.num_classes, d)) / math.sqrt(d)
    model = ToyModel(tuple(blocks), head, np.zeros(spec.num_classes))
    # centre the logits so classes come out roughly balanced
    probe = rng.standard_normal((512, spec.tokens, d))
    logits = model_logits(model, probe)
    return ToyModel(model.blocks, head, -logits.mean(axis=0))


def _balanced_sample(model: ToyModel, spec: SynthTask, count: int, rng) -> Dataset:
    d, k = spec.input_dim, spec.num_classes
    quota = np.full(k, count // k)
    quota[: count % k] += 1
    xs, ys = [], []
    have = np.zeros(k, dtype=int)
    for _ in range(1000):
        if (have >= quota).all():
            break
        x = rng.standard_normal((max(4 * count, 64), spec.tokens, d))
        y = predict(model, x)
        for xi, yi in zip(x, y):
            if have[yi] < quota[yi]:
                xs.append(xi)
                ys.append(yi)
                have[yi] += 1
    else:
        raise RuntimeError("could not draw a class-balanced sample")
    if not xs:
        return Dataset(np.zeros((0, spec.tokens, d)), np.zeros(0, dtype=np.int64))
    order = rng.permutation(len(ys))
    return Dataset(np.stack(xs)[order], np.asarray(ys, dtype=np.int64)[order])


def gen_task(spec: SynthTask, model: ToyModel | None = None) -> tuple[Dataset, Dataset]:
    """Deterministic train and eval sets labelled by the dense planted model."""
    model = planted_model(spec) if model is None else model
    train_seq, eval_seq = np.random.SeedSequence([spec.seed, 1]).spawn(2)
    train = _balanced_sample(model, spec, spec.num_train, np.random.default_rng(train_seq))
    evals = _balanced_sample(model, spec, spec.num_eval, np.random.default_rng(eval_seq))
    return train, evals
