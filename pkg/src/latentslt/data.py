"""Synthetic segmental translation task with known frame-level alignments.

Each sample is a clip of contiguous segments; every segment repeats a fixed
per-symbol embedding plus Gaussian noise, and the target is one token per
segment (optionally with adjacent pairs swapped) followed by EOS. Because
the generator knows which frames belong to which segment, routing quality
is directly measurable.

Datasets persist in the "SGTD1" container: a 5-byte magic, little-endian
u32 header (version, sample count, d_x, lexicon size), then per sample the
u32 triple (T_s, n_tokens, n_segments), f32 row-major features, u32 tokens,
u32 frame-to-segment ids and u32 segment symbols.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .decoder import EOS_ID, N_SPECIALS, PAD_ID, TokenBatch
from .encoder import ClipBatch

MAGIC = b"SGTD1"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Base class for container read failures."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


@dataclass
class SynthConfig:
    lexicon_size: int = 20
    d_x: int = 32
    seg_len_range: tuple[int, int] = (4, 12)
    segs_per_clip_range: tuple[int, int] = (3, 10)
    noise_sigma: float = 0.1
    reorder_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.seg_len_range[0] > self.seg_len_range[1] or self.seg_len_range[0] < 1:
            raise ValueError("bad segment length range")
        if self.segs_per_clip_range[0] > self.segs_per_clip_range[1] \
                or self.segs_per_clip_range[0] < 1:
            raise ValueError("bad segments-per-clip range")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not (0.0 <= self.reorder_prob <= 0.5):
            raise ValueError("reorder probability must be in [0, 0.5]")

    @property
    def vocab_size(self) -> int:
        return self.lexicon_size + N_SPECIALS


@dataclass
class SyntheticSample:
    features: np.ndarray          # [T_s, d_x] float
    tokens: np.ndarray            # target ids, one per segment, then EOS
    frame_to_segment: np.ndarray  # [T_s] 0-based true segment per frame
    segment_symbols: np.ndarray   # ordered symbol ids (0-based lexicon ids)


def symbol_table(cfg: SynthConfig) -> np.ndarray:
    """Per-symbol embeddings, drawn once from the dataset seed."""
    rng = np.random.default_rng([cfg.seed, 0x5F])
    return rng.standard_normal((cfg.lexicon_size, cfg.d_x))


def gen_sample(cfg: SynthConfig, sample_seed: int) -> SyntheticSample:
    """Deterministic per (cfg.seed, sample_seed)."""
    rng = np.random.default_rng([cfg.seed, 1, sample_seed])
    table = symbol_table(cfg)
    n_seg = int(rng.integers(cfg.segs_per_clip_range[0], cfg.segs_per_clip_range[1] + 1))
    lengths = rng.integers(cfg.seg_len_range[0], cfg.seg_len_range[1] + 1, size=n_seg)
    symbols = rng.integers(0, cfg.lexicon_size, size=n_seg)
    feats = []
    frame_seg = []
    for j in range(n_seg):
        block = np.tile(table[symbols[j]], (lengths[j], 1))
        if cfg.noise_sigma > 0:
            block = block + cfg.noise_sigma * rng.standard_normal(block.shape)
        feats.append(block)
        frame_seg.extend([j] * int(lengths[j]))
    tokens = list(symbols + N_SPECIALS)
    # swap adjacent pairs left to right, each pair at most once
    i = 0
    while i < len(tokens) - 1:
        if cfg.reorder_prob > 0 and rng.random() < cfg.reorder_prob:
            tokens[i], tokens[i + 1] = tokens[i + 1], tokens[i]
            i += 2
        else:
            i += 1
    tokens.append(EOS_ID)
    return SyntheticSample(
        features=np.concatenate(feats, axis=0),
        tokens=np.array(tokens, dtype=np.int64),
        frame_to_segment=np.array(frame_seg, dtype=np.int64),
        segment_symbols=np.asarray(symbols, dtype=np.int64),
    )


def gen_dataset(cfg: SynthConfig, count: int) -> list[SyntheticSample]:
    return [gen_sample(cfg, i) for i in range(count)]


# ---------------------------------------------------------------------------
# container io


def write_dataset(samples: list[SyntheticSample], path, cfg: SynthConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", FORMAT_VERSION, len(samples), cfg.d_x,
                             cfg.lexicon_size))
        for s in samples:
            t_s, d_x = s.features.shape
            fh.write(struct.pack("<3I", t_s, len(s.tokens), len(s.segment_symbols)))
            fh.write(np.ascontiguousarray(s.features, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.tokens, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(s.frame_to_segment, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(s.segment_symbols, dtype="<u4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError("truncated file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def read_dataset(path) -> tuple[list[SyntheticSample], dict]:
    """Inverse of write_dataset; features come back as float64."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(5) != MAGIC:
        raise BadMagicError("bad magic: not an SGTD1 file")
    version, count, d_x, lexicon = struct.unpack("<4I", rd.take(16))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported container version {version}")
    samples = []
    for _ in range(count):
        t_s, n_tok, n_seg = struct.unpack("<3I", rd.take(12))
        feats = np.frombuffer(rd.take(4 * t_s * d_x), dtype="<f4")
        feats = feats.reshape(t_s, d_x).astype(np.float64)
        tokens = np.frombuffer(rd.take(4 * n_tok), dtype="<u4").astype(np.int64)
        f2s = np.frombuffer(rd.take(4 * t_s), dtype="<u4").astype(np.int64)
        syms = np.frombuffer(rd.take(4 * n_seg), dtype="<u4").astype(np.int64)
        samples.append(SyntheticSample(features=feats, tokens=tokens,
                                       frame_to_segment=f2s, segment_symbols=syms))
    meta = {"version": version, "count": count, "d_x": d_x, "lexicon_size": lexicon}
    return samples, meta


# ---------------------------------------------------------------------------
# batching


def make_batch(samples: list[SyntheticSample]) -> tuple[ClipBatch, TokenBatch]:
    """Right-pad features with zeros and labels with PAD; masks match."""
    if not samples:
        raise ValueError("cannot batch zero samples")
    b = len(samples)
    t_s = max(s.features.shape[0] for s in samples)
    t_t = max(len(s.tokens) for s in samples)
    d_x = samples[0].features.shape[1]
    feats = np.zeros((b, t_s, d_x))
    fmask = np.zeros((b, t_s))
    labels = np.full((b, t_t), PAD_ID, dtype=np.int64)
    lmask = np.zeros((b, t_t))
    for i, s in enumerate(samples):
        n = s.features.shape[0]
        feats[i, :n] = s.features
        fmask[i, :n] = 1.0
        m = len(s.tokens)
        labels[i, :m] = s.tokens
        lmask[i, :m] = 1.0
    return ClipBatch(features=feats, mask=fmask), TokenBatch(labels=labels, mask=lmask)


def iter_batches(samples: list[SyntheticSample], batch_size: int,
                 order: np.ndarray | None = None):
    """Yield (ClipBatch, TokenBatch) chunks in the given (or natural) order."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    idx = np.arange(len(samples)) if order is None else order
    for start in range(0, len(idx), batch_size):
        chunk = [samples[i] for i in idx[start : start + batch_size]]
        yield make_batch(chunk)
