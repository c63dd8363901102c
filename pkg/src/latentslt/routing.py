"""Thought-to-segment binding via balanced transport normalization.

Raw bilinear similarities between thoughts and segment tokens are rescaled
by unrolled alternating row/column normalization: rows converge to unit
mass, columns to a uniform budget of K/M each, so no segment can absorb
every thought. The final pass is row-side, which makes each routed summary
an exact convex combination of segment tokens. All iterations stay on the
tape, so gradients flow through the normalization itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


@dataclass
class RoutingConfig:
    sinkhorn_iters: int = 10
    monotonic_bias_eta: float = 0.0  # quadratic index-distance penalty, off by default
    eps_num: float = 1e-6

    def __post_init__(self):
        if self.sinkhorn_iters < 1:
            raise ValueError("need at least one normalization round")
        if self.monotonic_bias_eta < 0:
            raise ValueError("monotonic bias strength must be >= 0")


@dataclass
class RoutingState:
    similarities: Tensor  # G [B,K,M]
    binding: Tensor       # A [B,K,M], rows sum to 1, columns ~ K/M
    summaries: Tensor     # p [B,K,d]
    prior: Tensor         # r [B,K,T_s], rows sum to ~1, zero on padded frames


def init_routing_params(store: ParameterStore, d: int, rng: np.random.Generator,
                        prefix: str = "route") -> None:
    # bilinear score projections; the score formula carries no bias terms
    att.init_linear(store, f"{prefix}.wq", d, d, rng, bias=False)
    att.init_linear(store, f"{prefix}.wk", d, d, rng, bias=False)


def similarity(c: Tensor, s: Tensor, store: ParameterStore, cfg: RoutingConfig,
               prefix: str = "route") -> Tensor:
    """G_{k,j} = (W_q c_k) . (W_k S_j) / sqrt(d), optionally order-biased."""
    d = c.shape[-1]
    q = ad.matmul(c, store[f"{prefix}.wq.w"])
    k = ad.matmul(s, store[f"{prefix}.wk.w"])
    g = ad.matmul(q, k.transpose((0, 2, 1))) * (1.0 / np.sqrt(d))
    if cfg.monotonic_bias_eta > 0:
        n_thoughts, n_segments = g.shape[-2], g.shape[-1]
        ki = (np.arange(1, n_thoughts + 1) / n_thoughts)[:, None]
        ji = (np.arange(1, n_segments + 1) / n_segments)[None, :]
        g = g - cfg.monotonic_bias_eta * (ki - ji) ** 2
    return g


def sinkhorn(g: Tensor, cfg: RoutingConfig) -> Tensor:
    """Alternating row/column rescaling of exp(G), ending with a row pass.

    Row sums come out exactly 1 (up to fp); column sums approach K/M with
    the configured number of rounds.
    """
    n_thoughts, n_segments = g.shape[-2], g.shape[-1]
    col_budget = n_thoughts / n_segments
    # subtract the row max before exponentiating to avoid overflow
    a = ad.exp(g - np.max(g.data, axis=-1, keepdims=True))
    for _ in range(cfg.sinkhorn_iters):
        a = a / a.sum(axis=-1, keepdims=True)
        a = a * (col_budget / a.sum(axis=-2, keepdims=True))
    return a / a.sum(axis=-1, keepdims=True)


def routed_summaries(a: Tensor, s: Tensor) -> Tensor:
    """p_k = sum_j A_{k,j} S_j."""
    return ad.matmul(a, s)


def temporal_prior(a: Tensor, w_seg: Tensor) -> Tensor:
    """r_{k,t} = sum_j A_{k,j} (W_seg)_{j,t}; rows near-stochastic, zero on pads."""
    return ad.matmul(a, w_seg)


def route(c: Tensor, seg_tokens: Tensor, w_seg: Tensor, store: ParameterStore,
          cfg: RoutingConfig, prefix: str = "route") -> RoutingState:
    g = similarity(c, seg_tokens, store, cfg, prefix)
    a = sinkhorn(g, cfg)
    return RoutingState(
        similarities=g,
        binding=a,
        summaries=routed_summaries(a, seg_tokens),
        prior=temporal_prior(a, w_seg),
    )
