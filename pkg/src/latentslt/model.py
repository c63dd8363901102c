"""Full pipeline: encode, segment, think, decode, plus decoding entry points.

Owns parameter initialization (Xavier uniform for linear/embedding weights,
zeros for biases, ones for layer-norm gains) and the dropout RNG used in
training mode. Evaluation-mode forward passes are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec
from . import encoder as enc
from . import objectives as obj
from . import routing as rt
from . import segmentation as sg
from . import thinking as th
from .autodiff import ParameterStore, Tensor


@dataclass
class ModelConfig:
    vocab_size: int = 24
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    seg: sg.SegmentationConfig = field(default_factory=sg.SegmentationConfig)
    routing: rt.RoutingConfig = field(default_factory=rt.RoutingConfig)
    think: th.ThinkConfig = field(default_factory=th.ThinkConfig)
    dec: dec.DecoderConfig = field(default_factory=dec.DecoderConfig)
    loss: obj.LossConfig = field(default_factory=obj.LossConfig)

    @property
    def d(self) -> int:
        return self.encoder.d

    def __post_init__(self):
        if self.vocab_size <= dec.N_SPECIALS:
            raise ValueError("vocabulary must extend past the reserved ids")


@dataclass
class ForwardState:
    """Everything a forward pass produces besides the logits."""

    evidence: Tensor
    seg: sg.SegmentationResult
    chain: th.ThoughtChain
    cache: th.ThinkCache
    prior: dec.DecoderPrior | None
    logits: Tensor


def init_params(cfg: ModelConfig, seed: int) -> ParameterStore:
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    enc.init_encoder_params(store, cfg.encoder, rng)
    sg.init_segmentation_params(store, cfg.d, cfg.seg, rng)
    th.init_thinking_params(store, cfg.d, cfg.think, rng)
    dec.init_decoder_params(store, cfg.d, cfg.vocab_size, cfg.dec, rng)
    return store


class Model:
    """Holds config + parameters; training mode switches dropout on."""

    def __init__(self, cfg: ModelConfig, params: ParameterStore | None = None,
                 seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self._dropout_rng: np.random.Generator | None = None

    # -- training-mode dropout RNG ------------------------------------------
    def set_train_mode(self, rng: np.random.Generator | None) -> None:
        """Pass a generator to enable dropout; None returns to eval mode."""
        self._dropout_rng = rng

    @property
    def dropout_rng(self) -> np.random.Generator | None:
        return self._dropout_rng

    # -- pipeline ------------------------------------------------------------
    def encode_clip(self, clip: enc.ClipBatch) -> tuple[Tensor, sg.SegmentationResult,
                                                        th.ThoughtChain, th.ThinkCache]:
        rng = self._dropout_rng
        e = enc.encode(clip, self.cfg.encoder, self.params, rng=rng)
        seg = sg.segment(e, clip.mask, self.cfg.seg, self.params)
        chain, cache = th.think(e, clip.mask, seg, self.cfg.routing, self.cfg.think,
                                self.params, rng=rng)
        return e, seg, chain, cache

    def forward(self, clip: enc.ClipBatch, tokens_in: np.ndarray) -> ForwardState:
        e, seg, chain, cache = self.encode_clip(clip)
        logits, prior = dec.forward_logits(e, clip.mask, chain.states, cache,
                                           tokens_in, self.cfg.dec, self.params,
                                           rng=self._dropout_rng)
        return ForwardState(evidence=e, seg=seg, chain=chain, cache=cache,
                            prior=prior, logits=logits)

    def loss(self, clip: enc.ClipBatch, tokens: dec.TokenBatch,
             ) -> tuple[obj.LossBreakdown, ForwardState]:
        state = self.forward(clip, tokens.inputs)
        breakdown = obj.total_loss(state.logits, tokens, state.cache.binding,
                                   self.cfg.loss)
        return breakdown, state

    # -- decoding -------------------------------------------------------------
    def greedy_decode(self, clip: enc.ClipBatch, max_len: int = 32) -> list[list[int]]:
        """Lockstep greedy decoding for the whole batch (eval mode)."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        saved = self._dropout_rng
        self._dropout_rng = None
        try:
            e, _, chain, cache = self.encode_clip(clip)
            b = clip.features.shape[0]
            seqs: list[list[int]] = [[] for _ in range(b)]
            done = np.zeros(b, dtype=bool)
            tokens = np.full((b, 1), dec.BOS_ID, dtype=np.int64)
            for _ in range(max_len):
                logits, _ = dec.forward_logits(e, clip.mask, chain.states, cache,
                                               tokens, self.cfg.dec, self.params)
                nxt = np.argmax(logits.data[:, -1, :], axis=-1)  # first max: low-id ties
                for i in range(b):
                    if done[i]:
                        nxt[i] = dec.PAD_ID
                    elif nxt[i] == dec.EOS_ID:
                        done[i] = True
                    else:
                        seqs[i].append(int(nxt[i]))
                if done.all():
                    break
                tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            return seqs
        finally:
            self._dropout_rng = saved

    def _single_clip(self, clip: enc.ClipBatch, i: int) -> enc.ClipBatch:
        n = int(clip.lengths[i])
        return enc.ClipBatch(features=clip.features[i : i + 1, :n],
                             mask=clip.mask[i : i + 1, :n])

    def step_fn(self, clip_row: enc.ClipBatch) -> dec.StepFn:
        """Next-token log-probability callback for one sample (eval mode)."""
        saved = self._dropout_rng
        self._dropout_rng = None
        try:
            e, _, chain, cache = self.encode_clip(clip_row)
        finally:
            self._dropout_rng = saved

        def step(prefix: list[int]) -> np.ndarray:
            tokens = np.array([[dec.BOS_ID] + prefix], dtype=np.int64)
            logits, _ = dec.forward_logits(e, clip_row.mask, chain.states, cache,
                                           tokens, self.cfg.dec, self.params)
            z = logits.data[0, -1, :]
            z = z - z.max()
            return z - np.log(np.exp(z).sum())

        return step

    def beam_search(self, clip: enc.ClipBatch, beam_size: int,
                    len_penalty_a: float = 0.0, max_len: int = 32) -> list[list[int]]:
        """Per-sample beam decoding; beam_size=1 reproduces greedy exactly."""
        out = []
        for i in range(clip.features.shape[0]):
            step = self.step_fn(self._single_clip(clip, i))
            out.append(dec.beam_search(step, beam_size, len_penalty_a, max_len))
        return out
