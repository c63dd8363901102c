"""Training losses: smoothed cross-entropy plus structural regularizers.

The regularizers act on the thought-to-segment binding matrix: a margin
penalty on the expected segment index keeps consecutive thoughts moving
forward in time, and a total-variation penalty keeps each thought's mass
contiguous in segment space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import PAD_ID, TokenBatch


@dataclass
class LossConfig:
    label_smoothing: float = 0.1
    delta: float = 1.0        # monotonicity margin
    lambda_mono: float = 0.1
    lambda_cont: float = 0.2

    def __post_init__(self):
        if not (0 <= self.label_smoothing < 1):
            raise ValueError("label smoothing must be in [0, 1)")
        if min(self.delta, self.lambda_mono, self.lambda_cont) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    ce: Tensor
    mono: Tensor
    cont: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"ce": self.ce.item(), "mono": self.mono.item(),
                "cont": self.cont.item(), "total": self.total.item()}


def label_smoothed_ce(logits: Tensor, labels: np.ndarray, pad_mask: np.ndarray,
                      cfg: LossConfig) -> Tensor:
    """Mean over non-PAD positions of -sum_v q(v) log softmax(logits)_v.

    q puts 1-s on the target and spreads s/(|V|-1) over the other ids,
    excluding PAD from the smoothing support so PAD emission is never
    rewarded.
    """
    vocab = logits.shape[-1]
    n_pos = float(pad_mask.sum())
    if n_pos < 1:
        raise ValueError("all-PAD batch has no loss positions")
    s = cfg.label_smoothing
    q = np.full(logits.shape, s / (vocab - 1))
    q[..., PAD_ID] = 0.0
    rows = np.arange(labels.shape[0])[:, None]
    cols = np.arange(labels.shape[1])[None, :]
    q[rows, cols, labels] = 1.0 - s
    q *= pad_mask[:, :, None]
    logp = ad.log_softmax(logits)
    return (logp * (-q)).sum() * (1.0 / n_pos)


def expected_index(a: Tensor) -> Tensor:
    """mu_k = sum_j j * A_{k,j} with 1-based segment index j; in [1, M]."""
    m = a.shape[-1]
    idx = np.arange(1, m + 1, dtype=np.float64)
    return (a * idx).sum(axis=-1)


def mono_loss(a: Tensor, cfg: LossConfig) -> Tensor:
    """(1/B) sum over consecutive thought pairs of ReLU(mu_k - mu_{k+1} + delta)."""
    k = a.shape[-2]
    batch = a.shape[0] if a.ndim == 3 else 1
    if k < 2:
        return Tensor(0.0)
    mu = expected_index(a)
    lead = ad.narrow(mu, mu.ndim - 1, 0, k - 1)
    lag = ad.narrow(mu, mu.ndim - 1, 1, k - 1)
    return ad.relu(lead - lag + cfg.delta).sum() * (1.0 / batch)


def cont_loss(a: Tensor) -> Tensor:
    """(1/(BK)) sum |A_{k,j} - A_{k,j-1}|; zero iff every row is constant."""
    m = a.shape[-1]
    k = a.shape[-2]
    batch = a.shape[0] if a.ndim == 3 else 1
    if m < 2:
        return Tensor(0.0)
    left = ad.narrow(a, a.ndim - 1, 0, m - 1)
    right = ad.narrow(a, a.ndim - 1, 1, m - 1)
    return ad.absval(right - left).sum() * (1.0 / (batch * k))


def combine(ce: Tensor, mono: Tensor, cont: Tensor, cfg: LossConfig) -> LossBreakdown:
    """total = ce + lambda_mono*mono + lambda_cont*cont, exact at zero weights."""
    total = ce
    if cfg.lambda_mono > 0:
        total = total + mono * cfg.lambda_mono
    if cfg.lambda_cont > 0:
        total = total + cont * cfg.lambda_cont
    return LossBreakdown(ce=ce, mono=mono, cont=cont, total=total)


def total_loss(logits: Tensor, tokens: TokenBatch, binding: Tensor,
               cfg: LossConfig) -> LossBreakdown:
    ce = label_smoothed_ce(logits, tokens.labels, tokens.mask, cfg)
    return combine(ce, mono_loss(binding, cfg), cont_loss(binding), cfg)
