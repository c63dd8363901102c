"""Differentiable soft segmentation of the frame stream into M segment tokens.

A clip summary predicts positive segment lengths, which become cumulative
boundaries in continuous valid-frame time. Sigmoid differences around those
boundaries give each segment a soft window over frames; masking and row
normalization produce a row-stochastic [M,T_s] weight matrix whose rows pool
frame features into segment tokens.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


@dataclass
class SegmentationConfig:
    n_segments: int = 16
    gamma: float = 1.0        # boundary softness
    mlp_hidden: int = 0       # 0 -> use model dim
    eps_num: float = 1e-6

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("need at least one segment")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class SegmentationResult:
    w_seg: Tensor   # [B, M, T_s] row-stochastic over frames
    tokens: Tensor  # [B, M, d]
    tau: Tensor     # [B, M+1] boundaries in continuous valid-frame time
    pi: Tensor      # [B, M] proportions
    rho: Tensor     # [B, M] positive raw lengths
    z: Tensor       # [B, d] clip summary


def init_segmentation_params(store: ParameterStore, d: int, cfg: SegmentationConfig,
                             rng: np.random.Generator, prefix: str = "seg") -> None:
    hidden = cfg.mlp_hidden or d
    att.init_linear(store, f"{prefix}.mlp1", d, hidden, rng)
    att.init_linear(store, f"{prefix}.mlp2", hidden, cfg.n_segments, rng)


def masked_mean_pool(e: Tensor, mask: np.ndarray, eps: float = 1e-6) -> Tensor:
    """z = sum_t m_t e_t / (L_valid + eps); padded frames are ignored exactly."""
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise ValueError("cannot pool an all-padded sample")
    summed = ad.matmul(Tensor(mask[:, None, :]), e)  # [B,1,d]
    pooled = summed * (1.0 / (lengths + eps))[:, None, None]
    return pooled.reshape(pooled.shape[0], pooled.shape[2])


def boundary_lengths(z: Tensor, store: ParameterStore, cfg: SegmentationConfig,
                     prefix: str = "seg") -> tuple[Tensor, Tensor]:
    """rho = softplus(MLP(z)) > 0, pi = rho / (sum rho + eps)."""
    h = ad.relu(att.linear(z, store[f"{prefix}.mlp1.w"], store[f"{prefix}.mlp1.b"]))
    rho = ad.softplus(att.linear(h, store[f"{prefix}.mlp2.w"], store[f"{prefix}.mlp2.b"]))
    pi = rho / (rho.sum(axis=-1, keepdims=True) + cfg.eps_num)
    return rho, pi


def boundaries(pi: Tensor, lengths: np.ndarray) -> Tensor:
    """tau_0 = 1, tau_j = 1 + (L_valid - 1) * cumsum(pi)_j; shape [B, M+1]."""
    b, m = pi.shape
    upper = np.triu(np.ones((m, m)))  # cumsum as a matmul keeps it differentiable
    csum = ad.matmul(pi, Tensor(upper))
    tau_rest = 1.0 + csum * (lengths - 1.0)[:, None]
    tau0 = Tensor(np.ones((b, 1)))
    return ad.concat([tau0, tau_rest], axis=1)


def frame_ranks(mask: np.ndarray) -> np.ndarray:
    """1-based rank of each frame among the valid frames of its sample."""
    return np.cumsum(mask, axis=1)


def membership(tau: Tensor, mask: np.ndarray, cfg: SegmentationConfig) -> Tensor:
    """Soft window weights per segment, masked and row-normalized.

    u_{j,t} = sigmoid(gamma*(rank_t - tau_{j-1})) - sigmoid(gamma*(rank_t - tau_j)).
    Rows that underflow to (near) zero mass stay near zero after the epsilon
    normalization; that is flagged as a warning, not repaired.
    """
    m = tau.shape[1] - 1
    ranks = frame_ranks(mask)[:, None, :]          # [B,1,T]
    lo = ad.narrow(tau, 1, 0, m).reshape(tau.shape[0], m, 1)
    hi = ad.narrow(tau, 1, 1, m).reshape(tau.shape[0], m, 1)
    u = ad.sigmoid((Tensor(ranks) - lo) * cfg.gamma) - ad.sigmoid((Tensor(ranks) - hi) * cfg.gamma)
    u = u * mask[:, None, :]
    row_mass = u.sum(axis=-1, keepdims=True)
    if np.any(row_mass.data <= 1e-12):
        warnings.warn("segment window with (near) zero mass; its weights stay near zero",
                      RuntimeWarning, stacklevel=2)
    return u / (row_mass + cfg.eps_num)


def segment_tokens(w_seg: Tensor, e: Tensor) -> Tensor:
    """S_j = sum_t (W_seg)_{j,t} e_t: convex combinations of valid frames."""
    return ad.matmul(w_seg, e)


def segment(e: Tensor, mask: np.ndarray, cfg: SegmentationConfig,
            store: ParameterStore, prefix: str = "seg") -> SegmentationResult:
    """Segmentation is computed once per clip and shared by all consumers."""
    z = masked_mean_pool(e, mask, cfg.eps_num)
    rho, pi = boundary_lengths(z, store, cfg, prefix)
    tau = boundaries(pi, mask.sum(axis=1))
    w_seg = membership(tau, mask, cfg)
    tokens = segment_tokens(w_seg, e)
    return SegmentationResult(w_seg=w_seg, tokens=tokens, tau=tau, pi=pi, rho=rho, z=z)
