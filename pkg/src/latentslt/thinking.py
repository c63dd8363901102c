"""Ordered latent thought slots refined by causal mixing and routed retrieval.

Each refinement layer first mixes the K thought states under a causal mask
(thought k sees only thoughts 1..k), then binds thoughts to segments, then
retrieves frame evidence through cross-attention whose logits are biased by
the routed summaries (content term) and by the routing-derived temporal
prior (log term). A feed-forward sublayer closes the layer. Layers have
their own parameters; only the structure repeats.

Note: the full layer is not thought-causal. The column normalization of the
binding couples all rows, so perturbing a later thought can reach earlier
ones through routing. Only the causal mixing sublayer carries the causal
guarantee, and the tests pin exactly that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import autodiff as ad
from . import routing as rt
from .autodiff import ParameterStore, Tensor
from .segmentation import SegmentationResult


@dataclass
class ThinkConfig:
    n_thoughts: int = 8
    n_layers: int = 2
    n_heads: int = 4
    lambda_p: float = 1.0
    use_content_bias: bool = True
    use_log_prior_bias: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_thoughts < 1 or self.n_layers < 1:
            raise ValueError("need at least one thought and one layer")
        if self.lambda_p < 0:
            raise ValueError("lambda_p must be >= 0")


@dataclass
class ThoughtChain:
    states: Tensor   # C [B,K,d]
    layer_index: int  # which refinement step produced it (0 = initial slots)


@dataclass
class ThinkCache:
    """Routing variables the decoder reuses as its temporal prior."""

    binding: Tensor  # final layer's A [B,K,M]
    w_seg: Tensor    # [B,M,T_s]
    prior: Tensor    # final layer's r [B,K,T_s]


def init_thinking_params(store: ParameterStore, d: int, cfg: ThinkConfig,
                         rng: np.random.Generator, prefix: str = "think") -> None:
    limit = np.sqrt(6.0 / (cfg.n_thoughts + d))
    store.add(f"{prefix}.slots", rng.uniform(-limit, limit, size=(cfg.n_thoughts, d)))
    for i in range(cfg.n_layers):
        base = f"{prefix}.l{i}"
        att.init_layer_norm(store, f"{base}.causal_ln", d)
        att.init_mha(store, f"{base}.causal", d, rng)
        rt.init_routing_params(store, d, rng, prefix=f"{base}.route")
        att.init_layer_norm(store, f"{base}.xattn_ln", d)
        att.init_mha(store, f"{base}.xattn", d, rng)
        att.init_linear(store, f"{base}.bias_p", d, d, rng, bias=False)
        att.init_linear(store, f"{base}.bias_e", d, d, rng, bias=False)
        att.init_layer_norm(store, f"{base}.ffn_ln", d)
        att.init_ffn(store, f"{base}.ffn", d, rng)


def init_slots(store: ParameterStore, batch_size: int, prefix: str = "think") -> ThoughtChain:
    """Broadcast the learnable slot matrix to every sample in the batch."""
    slots = store[f"{prefix}.slots"]
    k, d = slots.shape
    tiled = ad.concat([slots.reshape(1, k, d)] * batch_size, axis=0) if batch_size > 1 \
        else slots.reshape(1, k, d)
    return ThoughtChain(states=tiled, layer_index=0)


def causal_mask(k: int) -> np.ndarray:
    """Additive mask letting position i attend to positions <= i."""
    return np.where(np.tril(np.ones((k, k))) > 0, 0.0, -np.inf)[None, None, :, :]


def causal_self_attn(c: Tensor, store: ParameterStore, base: str, n_heads: int,
                     dropout_p: float = 0.0,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm residual self-attention under a causal mask over thoughts."""
    k = c.shape[1]
    h = att.apply_layer_norm(c, store, f"{base}.causal_ln")
    out, _ = att.multi_head_attention(store, f"{base}.causal", h, h, n_heads,
                                      additive_mask=causal_mask(k))
    return att.residual(c, out, dropout_p, rng)


def routed_xattn(c: Tensor, e: Tensor, mask: np.ndarray, summaries: Tensor,
                 prior: Tensor, cfg: ThinkConfig, store: ParameterStore,
                 base: str, rng: np.random.Generator | None = None) -> Tensor:
    """Cross-attention from thoughts to frames with routing-derived biases.

    Bias = lambda_p * (content compatibility of the routed summary with each
    frame, per head, plus log(prior + eps) shared across heads). The hard
    padding mask is applied after the bias, so padded frames stay excluded.
    With lambda_p = 0 or both bias sources disabled this is bit-identical to
    vanilla cross-attention.
    """
    add_mask = att.additive_mask_from_binary(mask)[:, None, None, :]
    h = att.apply_layer_norm(c, store, f"{base}.xattn_ln")

    bias = None
    if cfg.lambda_p > 0 and (cfg.use_content_bias or cfg.use_log_prior_bias):
        terms = []
        if cfg.use_content_bias:
            d = e.shape[-1]
            dh = d // cfg.n_heads
            p_proj = att.split_heads(ad.matmul(summaries, store[f"{base}.bias_p.w"]), cfg.n_heads)
            e_proj = att.split_heads(ad.matmul(e, store[f"{base}.bias_e.w"]), cfg.n_heads)
            terms.append(ad.matmul(p_proj, e_proj.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh)))
        if cfg.use_log_prior_bias:
            eps = 1e-6
            logr = ad.log(prior + eps)
            terms.append(logr.reshape(logr.shape[0], 1, logr.shape[1], logr.shape[2]))
        bias = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        bias = bias * cfg.lambda_p

    out, _ = att.multi_head_attention(store, f"{base}.xattn", h, e, cfg.n_heads,
                                      additive_mask=add_mask, logit_bias=bias)
    return att.residual(c, out, cfg.dropout, rng)


def think_layer(chain: ThoughtChain, e: Tensor, mask: np.ndarray,
                seg: SegmentationResult, route_cfg: rt.RoutingConfig,
                cfg: ThinkConfig, store: ParameterStore, base: str,
                rng: np.random.Generator | None = None) -> tuple[ThoughtChain, rt.RoutingState]:
    """One refinement: causal mix, route, retrieve, feed-forward."""
    mixed = causal_self_attn(chain.states, store, base, cfg.n_heads,
                             cfg.dropout, rng)
    # routing queries use the mixed states: routing serves the retrieval step
    state = rt.route(mixed, seg.tokens, seg.w_seg, store, route_cfg, prefix=f"{base}.route")
    retrieved = routed_xattn(mixed, e, mask, state.summaries, state.prior, cfg, store, base, rng)
    h = att.apply_layer_norm(retrieved, store, f"{base}.ffn_ln")
    out = att.residual(retrieved, att.feed_forward(store, f"{base}.ffn", h),
                       cfg.dropout, rng)
    return ThoughtChain(states=out, layer_index=chain.layer_index + 1), state


def think(e: Tensor, mask: np.ndarray, seg: SegmentationResult,
          route_cfg: rt.RoutingConfig, cfg: ThinkConfig, store: ParameterStore,
          prefix: str = "think",
          rng: np.random.Generator | None = None) -> tuple[ThoughtChain, ThinkCache]:
    """Run all refinement layers; cache the final layer's routing variables."""
    chain = init_slots(store, e.shape[0], prefix)
    state = None
    for i in range(cfg.n_layers):
        chain, state = think_layer(chain, e, mask, seg, route_cfg, cfg, store,
                                   f"{prefix}.l{i}", rng)
    cache = ThinkCache(binding=state.binding, w_seg=seg.w_seg, prior=state.prior)
    return chain, cache
