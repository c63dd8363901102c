"""Frame encoder: embedding, sinusoidal positions, conv-augmented blocks.

Maps a padded batch of frame features [B,T_s,d_x] to contextual evidence
[B,T_s,d]. Padded rows are forced to exactly zero after every sublayer so
that padding can never leak into valid frames, which makes the padding
invariance of the whole pipeline bitwise rather than approximate.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import attention as att
from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


@dataclass
class ClipBatch:
    """Padded frame features plus a {0,1} validity mask (padding trails)."""

    features: np.ndarray  # [B, T_s, d_x]
    mask: np.ndarray      # [B, T_s]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.features.ndim != 3 or self.mask.shape != self.features.shape[:2]:
            raise ValueError("features must be [B,T,d_x] with mask [B,T]")
        lengths = self.mask.sum(axis=1)
        if np.any(lengths < 1):
            raise ValueError("every sample needs at least one valid frame")
        # padding must trail: mask is a prefix of ones
        for b in range(self.mask.shape[0]):
            n = int(lengths[b])
            if not (np.all(self.mask[b, :n] == 1) and np.all(self.mask[b, n:] == 0)):
                raise ValueError("mask must be ones followed by zeros")

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass
class EncoderConfig:
    d: int = 256
    d_x: int = 32
    n_layers: int = 2
    n_heads: int = 4
    conv_kernel: int = 3
    dropout: float = 0.1

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError("model dim must be divisible by head count")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv kernel must be odd")


@lru_cache(maxsize=32)
def sinusoidal_table(max_len: int, d: int) -> np.ndarray:
    """Fixed positional encoding: pe[t,2i]=sin(t/10000^(2i/d)), pe[t,2i+1]=cos."""
    pe = np.zeros((max_len, d))
    pos = np.arange(max_len)[:, None].astype(np.float64)
    idx = np.arange(0, d, 2).astype(np.float64)
    angle = pos / np.power(10000.0, idx / d)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def _zero_padded(x: Tensor, mask: np.ndarray) -> Tensor:
    return x * mask[:, :, None]


def init_encoder_params(store: ParameterStore, cfg: EncoderConfig,
                        rng: np.random.Generator, prefix: str = "enc") -> None:
    att.init_linear(store, f"{prefix}.embed", cfg.d_x, cfg.d, rng)
    att.init_layer_norm(store, f"{prefix}.embed_ln", cfg.d)
    k = cfg.conv_kernel
    for i in range(cfg.n_layers):
        base = f"{prefix}.b{i}"
        att.init_layer_norm(store, f"{base}.attn_ln", cfg.d)
        att.init_mha(store, f"{base}.attn", cfg.d, rng)
        att.init_layer_norm(store, f"{base}.conv_ln", cfg.d)
        limit = np.sqrt(6.0 / (k + 1))
        store.add(f"{base}.conv.w", rng.uniform(-limit, limit, size=(k, cfg.d)))
        store.add(f"{base}.conv.b", np.zeros(cfg.d))
        att.init_layer_norm(store, f"{base}.ffn_ln", cfg.d)
        att.init_ffn(store, f"{base}.ffn", cfg.d, rng)


def embed_frames(clip: ClipBatch, cfg: EncoderConfig, store: ParameterStore,
                 prefix: str = "enc", rng: np.random.Generator | None = None) -> Tensor:
    """Dropout(LayerNorm(X W + b)) with padded rows zeroed."""
    if clip.features.shape[-1] != cfg.d_x:
        raise ValueError(f"feature dim {clip.features.shape[-1]} != configured d_x {cfg.d_x}")
    x = att.linear(Tensor(clip.features), store[f"{prefix}.embed.w"], store[f"{prefix}.embed.b"])
    x = att.apply_layer_norm(x, store, f"{prefix}.embed_ln")
    x = ad.dropout(x, cfg.dropout, rng)
    return _zero_padded(x, clip.mask)


def add_positional(e0: Tensor, mask: np.ndarray) -> Tensor:
    """Add the fixed sinusoidal table; padded rows re-zeroed."""
    _, t, d = e0.shape
    out = e0 + sinusoidal_table(t, d)
    return _zero_padded(out, mask)


def _depthwise_conv(x: Tensor, w: Tensor, b: Tensor, kernel: int) -> Tensor:
    """Per-channel temporal convolution with zero padding at the edges."""
    t = x.shape[1]
    half = kernel // 2
    xp = ad.pad_axis(x, 1, half, half)
    out = None
    for o in range(kernel):
        term = ad.narrow(xp, 1, o, t) * ad.narrow(w, 0, o, 1)
        out = term if out is None else out + term
    return out + b


def encoder_block(x: Tensor, mask: np.ndarray, cfg: EncoderConfig,
                  store: ParameterStore, base: str,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Masked self-attention, depthwise conv, position-wise FFN; all pre-norm."""
    add_mask = att.additive_mask_from_binary(mask)[:, None, None, :]

    h = att.apply_layer_norm(x, store, f"{base}.attn_ln")
    attn_out, _ = att.multi_head_attention(store, f"{base}.attn", h, h, cfg.n_heads,
                                           additive_mask=add_mask)
    x = _zero_padded(att.residual(x, attn_out, cfg.dropout, rng), mask)

    h = att.apply_layer_norm(x, store, f"{base}.conv_ln")
    h = _zero_padded(h, mask)  # conv must not read layer-norm output of padded rows
    conv_out = _depthwise_conv(h, store[f"{base}.conv.w"], store[f"{base}.conv.b"],
                               cfg.conv_kernel)
    x = _zero_padded(att.residual(x, conv_out, cfg.dropout, rng), mask)

    h = att.apply_layer_norm(x, store, f"{base}.ffn_ln")
    ffn_out = att.feed_forward(store, f"{base}.ffn", h)
    return _zero_padded(att.residual(x, ffn_out, cfg.dropout, rng), mask)


def encode(clip: ClipBatch, cfg: EncoderConfig, store: ParameterStore,
           prefix: str = "enc", rng: np.random.Generator | None = None) -> Tensor:
    """Full encoder stack; output is zero at padded frames."""
    x = embed_frames(clip, cfg, store, prefix, rng)
    x = add_positional(x, clip.mask)
    x = ad.dropout(x, cfg.dropout, rng)
    x = _zero_padded(x, clip.mask)
    for i in range(cfg.n_layers):
        x = encoder_block(x, clip.mask, cfg, store, f"{prefix}.b{i}", rng)
    return x
