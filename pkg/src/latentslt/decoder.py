"""Autoregressive plan-then-ground decoder.

Each layer runs masked self-attention, then cross-attention over the thought
chain (planning; its head-averaged weights become the per-token thought
distribution), then cross-attention over frames whose logits carry a
log-bias from the token-to-frame prior derived from the cached routing
variables (grounding), then a feed-forward sublayer. Greedy and beam search
operate on a next-token log-probability callback so they can be exercised
against exhaustive enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as att
from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .encoder import sinusoidal_table
from .thinking import ThinkCache

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
N_SPECIALS = 4


@dataclass
class TokenBatch:
    """Padded target sequences. Labels end with EOS; padding trails."""

    labels: np.ndarray  # [B, T_t] int ids, each row ends its content with EOS
    mask: np.ndarray    # [B, T_t] 1 at non-PAD label positions

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)

    @property
    def inputs(self) -> np.ndarray:
        """Decoder input: BOS followed by the labels shifted right."""
        shifted = np.roll(self.labels, 1, axis=1)
        shifted[:, 0] = BOS_ID
        return shifted


@dataclass
class DecoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    lambda_w: float = 1.0
    use_prior: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least one decoder layer")


@dataclass
class DecoderPrior:
    """Per-token planning weights and the derived frame preference."""

    alpha: Tensor  # [B, T_t, K] head-averaged thought attention, rows sum to 1
    beta: Tensor   # [B, T_t, M] = alpha A
    w: Tensor      # [B, T_t, T_s] = beta W_seg, rows ~sum to 1, zero on pads


def init_decoder_params(store: ParameterStore, d: int, vocab_size: int,
                        cfg: DecoderConfig, rng: np.random.Generator,
                        prefix: str = "dec") -> None:
    limit = np.sqrt(6.0 / (vocab_size + d))
    store.add(f"{prefix}.tok_embed", rng.uniform(-limit, limit, size=(vocab_size, d)))
    for i in range(cfg.n_layers):
        base = f"{prefix}.l{i}"
        att.init_layer_norm(store, f"{base}.self_ln", d)
        att.init_mha(store, f"{base}.self", d, rng)
        att.init_layer_norm(store, f"{base}.think_ln", d)
        att.init_mha(store, f"{base}.think", d, rng)
        att.init_layer_norm(store, f"{base}.ground_ln", d)
        att.init_mha(store, f"{base}.ground", d, rng)
        att.init_layer_norm(store, f"{base}.ffn_ln", d)
        att.init_ffn(store, f"{base}.ffn", d, rng)
    att.init_linear(store, f"{prefix}.out", d, vocab_size, rng)


def embed_tokens(tokens: np.ndarray, store: ParameterStore, prefix: str = "dec",
                 dropout_p: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Word embedding plus sinusoidal positions; PAD rows zeroed."""
    tokens = np.asarray(tokens, dtype=np.int64)
    table = store[f"{prefix}.tok_embed"]
    if tokens.size and tokens.max() >= table.shape[0]:
        raise ValueError("token id out of range")
    x = ad.embedding(tokens, table)
    x = x + sinusoidal_table(tokens.shape[1], table.shape[1])
    x = ad.dropout(x, dropout_p, rng)
    return x * (tokens != PAD_ID)[:, :, None].astype(np.float64)


def think_xattn(h: Tensor, thoughts: Tensor, store: ParameterStore, base: str,
                n_heads: int, dropout_p: float = 0.0,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Planning cross-attention over all K thoughts (no mask).

    Returns the residual output and alpha, the post-softmax attention
    weights averaged over heads ([B,T_t,K], rows sum to 1).
    """
    hn = att.apply_layer_norm(h, store, f"{base}.think_ln")
    out, alpha = att.multi_head_attention(store, f"{base}.think", hn, thoughts,
                                          n_heads, return_mean_weights=True)
    return att.residual(h, out, dropout_p, rng), alpha


def token_frame_prior(alpha: Tensor, binding: Tensor, w_seg: Tensor) -> DecoderPrior:
    """beta = alpha A and w = beta W_seg; rows of w stay (near) stochastic."""
    beta = ad.matmul(alpha, binding)
    w = ad.matmul(beta, w_seg)
    return DecoderPrior(alpha=alpha, beta=beta, w=w)


def grounded_xattn(h: Tensor, e: Tensor, mask: np.ndarray, prior_w: Tensor | None,
                   cfg: DecoderConfig, store: ParameterStore, base: str,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Grounding cross-attention over frames, optionally log-biased by w.

    The additive bias lambda_w * log(w + eps) is applied before the hard
    padding mask; with the prior disabled or lambda_w = 0 the path is
    bit-identical to vanilla cross-attention.
    """
    add_mask = att.additive_mask_from_binary(mask)[:, None, None, :]
    hn = att.apply_layer_norm(h, store, f"{base}.ground_ln")
    bias = None
    if prior_w is not None and cfg.lambda_w > 0:
        eps = 1e-6
        logw = ad.log(prior_w + eps) * cfg.lambda_w
        bias = logw.reshape(logw.shape[0], 1, logw.shape[1], logw.shape[2])
    out, _ = att.multi_head_attention(store, f"{base}.ground", hn, e, cfg.n_heads,
                                      additive_mask=add_mask, logit_bias=bias)
    return att.residual(h, out, cfg.dropout, rng)


def decoder_layer(h: Tensor, thoughts: Tensor, e: Tensor, source_mask: np.ndarray,
                  cache: ThinkCache, cfg: DecoderConfig, store: ParameterStore,
                  base: str,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, DecoderPrior | None]:
    """Self-attention, planning, grounding, feed-forward; causal throughout."""
    t = h.shape[1]
    causal = np.where(np.tril(np.ones((t, t))) > 0, 0.0, -np.inf)[None, None, :, :]
    hn = att.apply_layer_norm(h, store, f"{base}.self_ln")
    self_out, _ = att.multi_head_attention(store, f"{base}.self", hn, hn,
                                           cfg.n_heads, additive_mask=causal)
    h = att.residual(h, self_out, cfg.dropout, rng)

    h, alpha = think_xattn(h, thoughts, store, base, cfg.n_heads, cfg.dropout, rng)

    prior = None
    w = None
    if cfg.use_prior:
        prior = token_frame_prior(alpha, cache.binding, cache.w_seg)
        w = prior.w
    h = grounded_xattn(h, e, source_mask, w, cfg, store, base, rng)

    hn = att.apply_layer_norm(h, store, f"{base}.ffn_ln")
    h = att.residual(h, att.feed_forward(store, f"{base}.ffn", hn), cfg.dropout, rng)
    return h, prior


def forward_logits(e: Tensor, source_mask: np.ndarray, thoughts: Tensor,
                   cache: ThinkCache, tokens_in: np.ndarray, cfg: DecoderConfig,
                   store: ParameterStore, prefix: str = "dec",
                   rng: np.random.Generator | None = None,
                   ) -> tuple[Tensor, DecoderPrior | None]:
    """Vocabulary logits [B,T_t,|V|] for BOS-shifted inputs.

    Also returns the final layer's token-to-frame prior (None when the
    prior is disabled).
    """
    h = embed_tokens(tokens_in, store, prefix, cfg.dropout, rng)
    prior = None
    for i in range(cfg.n_layers):
        h, layer_prior = decoder_layer(h, thoughts, e, source_mask, cache, cfg,
                                       store, f"{prefix}.l{i}", rng)
        if layer_prior is not None:
            prior = layer_prior
    logits = att.linear(h, store[f"{prefix}.out.w"], store[f"{prefix}.out.b"])
    return logits, prior


# ---------------------------------------------------------------------------
# sequence search over a next-token callback

StepFn = Callable[[list[int]], np.ndarray]
"""Maps a generated prefix (no BOS) to next-token log-probabilities [|V|]."""


def greedy_decode(step_fn: StepFn, max_len: int) -> list[int]:
    """Argmax decoding until EOS or max_len; ties break to the lowest id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    out: list[int] = []
    for _ in range(max_len):
        nxt = int(np.argmax(step_fn(out)))
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return out


def length_penalty(length: int, a: float) -> float:
    return ((5.0 + length) / 6.0) ** a


def beam_search(step_fn: StepFn, beam_size: int, len_penalty_a: float,
                max_len: int) -> list[int]:
    """Beam search ranking finished hypotheses by logP / lp(len).

    Each step keeps the top `beam_size` extensions of the live set; the ones
    ending in EOS retire. Ties break toward the lexicographically smaller
    token sequence, which also makes beam_size=1 coincide with greedy.
    """
    if not (1 <= beam_size <= 64):
        raise ValueError("beam size must be in [1, 64]")
    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_len):
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for score, toks in live:
            logp = step_fn(list(toks))
            for tok in range(logp.shape[0]):
                candidates.append((score + float(logp[tok]), toks + (tok,)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        top = candidates[:beam_size]
        live = []
        for score, toks in top:
            if toks[-1] == EOS_ID:
                finished.append((score, toks[:-1]))
            else:
                live.append((score, toks))
        if not live:
            break
    finished.extend(live)  # hypotheses cut at max_len close without EOS credit
    ranked = sorted(
        finished,
        key=lambda c: (-c[0] / length_penalty(len(c[1]), len_penalty_a), c[1]),
    )
    return list(ranked[0][1])
