"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every key is listed in :data:`FIELDS` with its type, default and meaning.
``seed`` has no default and must come from the file or ``--seed``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

from .sparsity import NMPattern
from .toymodel import SynthTask
from .trainer import DISTILL_FORMS, TrainConfig

REQUIRED = object()

# keys that say where results go, not what they are; kept out of digests and checkpoints
LOCATION_KEYS = ("out_dir",)


class ConfigError(ValueError):
    """Configuration problem; ``diagnostics`` holds one message per issue."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(self.diagnostics))


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _count(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError(f"expected a nonnegative integer, got {text!r}")
    return value


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise ValueError(f"expected an unsigned 64-bit integer, got {text!r}")
    return value


def _finite(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {text!r}")
    return value


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


# key -> (parser, default, description)
FIELDS: dict[str, tuple] = {
    "seed": (_u64, REQUIRED, "RNG seed for task generation, batching and everything else"),
    "epochs": (_count, 20, "training epochs; 0 writes only the identity baseline"),
    "batch_size": (_count, 64, "samples per optimiser step"),
    "lr": (_finite, 0.05, "AdamW learning rate for the cost matrices"),
    "weight_decay": (_finite, 0.01, "decoupled weight decay"),
    "beta1": (_finite, 0.9, "first-moment decay"),
    "beta2": (_finite, 0.999, "second-moment decay"),
    "adam_eps": (_finite, 1e-8, "AdamW denominator epsilon"),
    "alpha_distill": (_finite, 1e-5, "weight of the layer-wise distillation loss"),
    "distill_form": (_choice(*DISTILL_FORMS), "squared_l2", "distillation term"),
    "eps_start": (_finite, 1.0, "initial Sinkhorn temperature"),
    "eps_end": (_finite, 0.03, "final Sinkhorn temperature (geometric anneal per step)"),
    "sinkhorn_iters": (_count, 50, "Sinkhorn iterations unrolled per step"),
    "groups": (_count, 2, "permutation groups per permuted dimension"),
    "pattern": (NMPattern.parse, NMPattern(2, 4), "N:M sparsity pattern, e.g. 2:4"),
    "saliency": (_choice("wanda", "magnitude"), "wanda", "pruning metric"),
    "d_hidden": (_count, 16, "model width"),
    "d_ff": (_count, 32, "FFN width"),
    "n_blocks": (_count, 1, "Transformer blocks"),
    "tokens": (_count, 4, "tokens per sample"),
    "num_classes": (_count, 4, "classes of the synthetic task"),
    "num_train": (_count, 256, "training samples"),
    "num_eval": (_count, 256, "held-out samples"),
    "cold_scale": (_finite, 0.1, "relative scale of unimportant channels in the planted model"),
    "ffn_gain": (_finite, 2.0, "gain of the planted FFN output projection"),
    "attn_gain": (_finite, 1.0, "gain of the planted attention output projection"),
    "out_dir": (str, "runs/default", "output directory"),
    "report_format": (_choice("json", "csv"), "json", "training report format"),
    "report_wall_time": (_bool, False, "record wall-clock seconds (reports stop being byte-reproducible)"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v["lr"], weight_decay=v["weight_decay"], beta1=v["beta1"], beta2=v["beta2"],
            adam_eps=v["adam_eps"], epochs=v["epochs"], batch_size=v["batch_size"],
            alpha_distill=v["alpha_distill"], eps_start=v["eps_start"], eps_end=v["eps_end"],
            sinkhorn_iters=v["sinkhorn_iters"], groups=v["groups"], pattern=v["pattern"],
            saliency=v["saliency"], seed=v["seed"], distill_form=v["distill_form"],
        )

    def task(self) -> SynthTask:
        v = self.values
        return SynthTask(
            input_dim=v["d_hidden"], d_ff=v["d_ff"], num_classes=v["num_classes"],
            num_train=v["num_train"], num_eval=v["num_eval"], tokens=v["tokens"],
            n_blocks=v["n_blocks"], seed=v["seed"], m_group=v["pattern"].m, perm_groups=v["groups"],
            cold_scale=v["cold_scale"], ffn_gain=v["ffn_gain"], attn_gain=v["attn_gain"],
        )

    def to_text(self) -> str:
        """Canonical text form; parses back to an equal config."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in FIELDS)

    def to_dict(self) -> dict:
        """Result-determining keys only (no output location)."""
        return {k: _format(self.values[k]) for k in FIELDS if k not in LOCATION_KEYS}

    def digest(self) -> str:
        text = "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        values = dict(self.values)
        values.update({k: v for k, v in kw.items() if v is not None})
        return validate(values)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def validate(values: dict) -> ExperimentConfig:
    errors = []
    try:
        cfg = ExperimentConfig(values)
        cfg.train_config()
        task = cfg.task()
        if task.num_train < 1:
            errors.append("num_train must be at least 1")
        for key in ("d_hidden", "d_ff"):
            if values[key] % values["groups"]:
                errors.append(f"groups={values['groups']} does not divide {key}={values[key]}")
            elif (values[key] // values["groups"]) % values["pattern"].m:
                errors.append(f"group size {values[key] // values['groups']} of {key} is not a multiple of "
                              f"M={values['pattern'].m}")
        if values["tokens"] < 1 or values["n_blocks"] < 1:
            errors.append("tokens and n_blocks must be >= 1")
    except (ValueError, ArithmeticError) as err:
        errors.append(str(err))
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(data: bytes | str, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate; raises :class:`ConfigError` listing every problem."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as err:
            raise ConfigError([f"config is not valid UTF-8 (byte {err.start})"]) from None
    else:
        text = data
    errors: list[str] = []
    bad_keys: set[str] = set()
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in FIELDS:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in values:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        parser = FIELDS[key][0]
        try:
            values[key] = parser(value)
        except (ValueError, OverflowError) as err:
            errors.append(f"line {lineno}: bad value for {key!r}: {err}")
            bad_keys.add(key)
    if seed is not None:
        try:
            values["seed"] = _u64(str(seed))
        except ValueError as err:
            errors.append(f"--seed: {err}")
            bad_keys.add("seed")
    for key, (_, default, _) in FIELDS.items():
        if key not in values:
            if default is REQUIRED:
                if key not in bad_keys:
                    errors.append(f"missing required key {key!r}")
            else:
                values[key] = default
    if errors:
        raise ConfigError(errors)
    return validate(values)


def default_config(seed: int = 0, **overrides) -> ExperimentConfig:
    values = {k: (seed if d is REQUIRED else d) for k, (_, d, _) in FIELDS.items()}
    values.update(overrides)
    return validate(values)


def describe() -> str:
    """Commented default config, one documented line per key."""
    lines = []
    for key, (_, default, doc) in FIELDS.items():
        if default is REQUIRED:
            lines.append(f"# {doc} (required)\n# {key} =\n")
        else:
            lines.append(f"# {doc}\n{key} = {_format(default)}\n")
    return "".join(lines)
