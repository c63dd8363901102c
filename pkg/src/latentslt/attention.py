"""Shared building blocks: linear maps, multi-head attention, sublayers.

All blocks follow the pre-norm convention: x + Dropout(f(LayerNorm(x))).
Attention masks are additive numpy arrays with entries in {0, -inf}; they
never participate in differentiation.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

NEG_INF = -np.inf


def additive_mask_from_binary(mask: np.ndarray) -> np.ndarray:
    """{0,1} validity mask -> {0,-inf} additive attention mask."""
    return np.where(mask > 0, 0.0, NEG_INF)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else y + b


def init_linear(store: ParameterStore, name: str, d_in: int, d_out: int,
                rng: np.random.Generator, bias: bool = True) -> None:
    limit = np.sqrt(6.0 / (d_in + d_out))
    store.add(f"{name}.w", rng.uniform(-limit, limit, size=(d_in, d_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(d_out))


def init_layer_norm(store: ParameterStore, name: str, d: int) -> None:
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def apply_layer_norm(x: Tensor, store: ParameterStore, name: str) -> Tensor:
    return ad.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B,T,d] -> [B,H,T,d/H]."""
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose((0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B,H,T,dh] -> [B,T,H*dh]."""
    b, h, t, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(b, t, h * dh)


def init_mha(store: ParameterStore, name: str, d: int, rng: np.random.Generator) -> None:
    for part in ("wq", "wk", "wv", "wo"):
        init_linear(store, f"{name}.{part}", d, d, rng)


def multi_head_attention(
    store: ParameterStore,
    name: str,
    q_in: Tensor,
    kv_in: Tensor,
    n_heads: int,
    additive_mask: np.ndarray | None = None,
    logit_bias: Tensor | None = None,
    return_mean_weights: bool = False,
) -> tuple[Tensor, Tensor | None]:
    """Standard multi-head attention with an optional pre-mask logit bias.

    `additive_mask` broadcasts against [B,H,Tq,Tk] and is applied after the
    bias, so masked keys stay excluded no matter what the bias says. When
    `return_mean_weights` is set, also returns head-averaged post-softmax
    attention weights [B,Tq,Tk].
    """
    d = q_in.shape[-1]
    dh = d // n_heads
    q = split_heads(linear(q_in, store[f"{name}.wq.w"], store[f"{name}.wq.b"]), n_heads)
    k = split_heads(linear(kv_in, store[f"{name}.wk.w"], store[f"{name}.wk.b"]), n_heads)
    v = split_heads(linear(kv_in, store[f"{name}.wv.w"], store[f"{name}.wv.b"]), n_heads)
    logits = ad.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if logit_bias is not None:
        logits = logits + logit_bias
    attn = ad.masked_softmax(logits, additive_mask)
    out = merge_heads(ad.matmul(attn, v))
    out = linear(out, store[f"{name}.wo.w"], store[f"{name}.wo.b"])
    if not return_mean_weights:
        return out, None
    mean_w = attn.mean(axis=1)
    return out, mean_w


def init_ffn(store: ParameterStore, name: str, d: int, rng: np.random.Generator,
             hidden_mult: int = 4) -> None:
    init_linear(store, f"{name}.fc1", d, hidden_mult * d, rng)
    init_linear(store, f"{name}.fc2", hidden_mult * d, d, rng)


def feed_forward(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    h = ad.relu(linear(x, store[f"{name}.fc1.w"], store[f"{name}.fc1.b"]))
    return linear(h, store[f"{name}.fc2.w"], store[f"{name}.fc2.b"])


def residual(x: Tensor, sub_out: Tensor, dropout_p: float,
             rng: np.random.Generator | None) -> Tensor:
    return x + ad.dropout(sub_out, dropout_p, rng)
