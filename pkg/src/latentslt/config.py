"""Flat key=value run configuration covering every tunable in one place.

The file format is deliberately trivial: one `key = value` pair per line,
`#` starts a comment, unknown keys are rejected, booleans are true/false.
Every key has a default; paths never live in the config (they are CLI
arguments).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .data import SynthConfig
from .decoder import DecoderConfig, N_SPECIALS
from .encoder import EncoderConfig
from .model import ModelConfig
from .objectives import LossConfig
from .routing import RoutingConfig
from .segmentation import SegmentationConfig
from .thinking import ThinkConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # shared model dims (d=256 is the reference preset; 128 is the desk default)
    seed: int = 0
    d: int = 128
    d_x: int = 32
    n_enc: int = 2
    n_dec: int = 2
    heads: int = 4
    conv_kernel: int = 3
    dropout: float = 0.1
    # thought chain and routing
    k_thoughts: int = 8
    think_layers: int = 2
    m_segments: int = 16
    gamma: float = 1.0
    sinkhorn_iters: int = 10
    monotonic_bias_eta: float = 0.0
    lambda_p: float = 1.0
    lambda_w: float = 1.0
    use_prior: bool = True
    use_content_bias: bool = True
    use_log_prior_bias: bool = True
    eps_num: float = 1e-6
    # objective
    label_smoothing: float = 0.1
    delta: float = 1.0
    lambda_mono: float = 0.1
    lambda_cont: float = 0.2
    # synthetic task
    lexicon_size: int = 20
    seg_len_min: int = 4
    seg_len_max: int = 12
    segs_min: int = 3
    segs_max: int = 10
    noise_sigma: float = 0.1
    reorder_prob: float = 0.0
    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.998
    weight_decay: float = 3e-3
    batch_size: int = 32
    warmup_steps: int = 2000
    plateau_factor: float = 0.8
    plateau_patience: int = 3
    stop_lr: float = 1e-4
    max_epochs: int = 200
    eval_every: int = 0
    dev_metric: str = "acc"
    grad_clip: float = 0.0
    stop_at_dev_acc: float = 0.0
    max_steps: int = 0
    max_decode_len: int = 32

    @classmethod
    def paper_preset(cls) -> "RunConfig":
        """Reference-scale preset: full model dim and 1024-dim input features."""
        return cls(d=256, d_x=1024)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    default = _FIELDS[key].default
    kind = type(default)
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r} expects a boolean, got {raw!r}")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc
    return raw


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' comments; unknown keys are errors."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {body!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    if overrides:
        for k in overrides:
            if k not in _FIELDS:
                raise ConfigError(f"unknown config key {k!r}")
        values.update(overrides)
    return RunConfig(**values)


def model_config(rc: RunConfig) -> ModelConfig:
    return ModelConfig(
        vocab_size=rc.lexicon_size + N_SPECIALS,
        encoder=EncoderConfig(d=rc.d, d_x=rc.d_x, n_layers=rc.n_enc,
                              n_heads=rc.heads, conv_kernel=rc.conv_kernel,
                              dropout=rc.dropout),
        seg=SegmentationConfig(n_segments=rc.m_segments, gamma=rc.gamma,
                               eps_num=rc.eps_num),
        routing=RoutingConfig(sinkhorn_iters=rc.sinkhorn_iters,
                              monotonic_bias_eta=rc.monotonic_bias_eta,
                              eps_num=rc.eps_num),
        think=ThinkConfig(n_thoughts=rc.k_thoughts, n_layers=rc.think_layers,
                          n_heads=rc.heads, lambda_p=rc.lambda_p,
                          use_content_bias=rc.use_content_bias,
                          use_log_prior_bias=rc.use_log_prior_bias,
                          dropout=rc.dropout),
        dec=DecoderConfig(n_layers=rc.n_dec, n_heads=rc.heads,
                          lambda_w=rc.lambda_w, use_prior=rc.use_prior,
                          dropout=rc.dropout),
        loss=LossConfig(label_smoothing=rc.label_smoothing, delta=rc.delta,
                        lambda_mono=rc.lambda_mono, lambda_cont=rc.lambda_cont),
    )


def train_config(rc: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=rc.lr, beta1=rc.beta1, beta2=rc.beta2, weight_decay=rc.weight_decay,
        batch_size=rc.batch_size, warmup_steps=rc.warmup_steps,
        plateau_factor=rc.plateau_factor, plateau_patience=rc.plateau_patience,
        stop_lr=rc.stop_lr, max_epochs=rc.max_epochs, eval_every=rc.eval_every,
        dev_metric=rc.dev_metric, seed=rc.seed, grad_clip=rc.grad_clip,
        stop_at_dev_acc=rc.stop_at_dev_acc, max_steps=rc.max_steps,
    )


SPLIT_SEED_OFFSET = {"train": 0, "dev": 1, "test": 2}


def synth_config(rc: RunConfig, split: str = "train") -> SynthConfig:
    if split not in SPLIT_SEED_OFFSET:
        raise ConfigError(f"unknown split {split!r}")
    return SynthConfig(
        lexicon_size=rc.lexicon_size, d_x=rc.d_x,
        seg_len_range=(rc.seg_len_min, rc.seg_len_max),
        segs_per_clip_range=(rc.segs_min, rc.segs_max),
        noise_sigma=rc.noise_sigma, reorder_prob=rc.reorder_prob,
        seed=rc.seed + SPLIT_SEED_OFFSET[split],
    )


def run_config_from_dict(values: dict) -> RunConfig:
    known = {k: v for k, v in values.items() if k in _FIELDS}
    return RunConfig(**known)
