"""Interpretability metrics over binding matrices and translation metrics.

All functions here are pure measurements over plain numpy arrays and token
lists; nothing is differentiated. Binding inputs accept a single [K,M]
matrix or a batch [B,K,M] (batch values are averaged).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

EPS_ENTROPY = 1e-6
BLEU_SMOOTH = 1e-9


@dataclass
class InterpReport:
    entropy: float
    mono_viol: float
    span: float
    tv: float

    def as_dict(self) -> dict[str, float]:
        return {"entropy": self.entropy, "mono_viol": self.mono_viol,
                "span": self.span, "tv": self.tv}


def _rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def thought_entropy(a: np.ndarray) -> float:
    """Mean over thoughts of -sum_j A_{k,j} log(A_{k,j} + eps)."""
    a = _rows(a)
    h = -(a * np.log(a + EPS_ENTROPY)).sum(axis=-1)
    return float(h.mean())


def expected_indices(a: np.ndarray) -> np.ndarray:
    m = a.shape[-1]
    return (a * np.arange(1, m + 1)).sum(axis=-1)


def mono_violation_rate(a: np.ndarray) -> float:
    """Fraction of consecutive thought pairs with mu_k > mu_{k+1} (strict)."""
    a = _rows(a)
    k = a.shape[-2]
    if k < 2:
        return 0.0
    mu = expected_indices(a)
    viol = (mu[..., :-1] > mu[..., 1:]).mean(axis=-1)
    return float(viol.mean())


def span(a: np.ndarray, p_lo: float = 0.05, p_hi: float = 0.95) -> float:
    """Mean over thoughts of j(p_hi) - j(p_lo).

    j(p) is the smallest 1-based index whose inclusive cumulative row mass
    reaches p.
    """
    a = _rows(a)
    csum = np.cumsum(a, axis=-1)
    lo = (csum >= p_lo).argmax(axis=-1)
    hi = (csum >= p_hi).argmax(axis=-1)
    return float((hi - lo).mean())


def total_variation(a: np.ndarray) -> float:
    """(1/K) sum |A_{k,j} - A_{k,j-1}|; measures fragmentation along segments."""
    a = _rows(a)
    k = a.shape[-2]
    tv = np.abs(np.diff(a, axis=-1)).sum(axis=(-1, -2)) / k
    return float(tv.mean())


def interp_report(a: np.ndarray) -> InterpReport:
    return InterpReport(entropy=thought_entropy(a), mono_viol=mono_violation_rate(a),
                        span=span(a), tv=total_variation(a))


# ---------------------------------------------------------------------------
# translation metrics


@dataclass
class TranslationScores:
    bleu: list[float]  # B@1..B@4
    rouge_l: float

    def as_dict(self) -> dict[str, float]:
        out = {f"bleu{i + 1}": v for i, v in enumerate(self.bleu)}
        out["rouge_l"] = self.rouge_l
        return out


def _ngrams(seq: list[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def _bleu_from_counts(matches: list[int], totals: list[int], hyp_len: int,
                      ref_len: int, max_n: int) -> list[float]:
    precisions = []
    for n in range(max_n):
        if totals[n] == 0:
            # no n-grams of this order on either side counts as vacuously perfect
            precisions.append(1.0 if matches[n] == -1 else BLEU_SMOOTH)
        elif matches[n] == 0:
            precisions.append(BLEU_SMOOTH)
        else:
            precisions.append(matches[n] / totals[n])
    bp = 1.0 if hyp_len >= ref_len else float(np.exp(1.0 - ref_len / max(hyp_len, 1)))
    scores = []
    for n in range(1, max_n + 1):
        geo = float(np.exp(np.mean(np.log(precisions[:n]))))
        scores.append(bp * geo)
    return scores


def _pair_counts(hyp: list[int], ref: list[int], max_n: int):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        hc, rc = _ngrams(hyp, n), _ngrams(ref, n)
        total = sum(hc.values())
        if total == 0 and sum(rc.values()) == 0:
            matches.append(-1)  # marker: order vacuous on both sides
            totals.append(0)
        else:
            matches.append(sum(min(c, rc[g]) for g, c in hc.items()))
            totals.append(total)
    return matches, totals


def bleu(hyp: list[int], ref: list[int], max_n: int = 4) -> list[float]:
    """Modified n-gram precision with clipping and brevity penalty.

    Zero precisions are smoothed with a tiny epsilon so B@4 stays defined on
    short sequences; an empty hypothesis scores all zeros.
    """
    hyp, ref = list(hyp), list(ref)
    if not hyp:
        return [0.0] * max_n
    matches, totals = _pair_counts(hyp, ref, max_n)
    return _bleu_from_counts(matches, totals, len(hyp), len(ref), max_n)


def corpus_bleu(pairs: list[tuple[list[int], list[int]]], max_n: int = 4) -> list[float]:
    """Aggregate clipped counts and lengths over a corpus of (hyp, ref) pairs."""
    agg_m = [0] * max_n
    agg_t = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in pairs:
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        m, t = _pair_counts(hyp, ref, max_n)
        for n in range(max_n):
            if m[n] != -1:
                agg_m[n] += m[n]
                agg_t[n] += t[n]
    if hyp_len == 0:
        return [0.0] * max_n
    marked = [(-1 if agg_t[n] == 0 else agg_m[n]) for n in range(max_n)]
    return _bleu_from_counts(marked, agg_t, hyp_len, ref_len, max_n)


def _lcs_len(a: list[int], b: list[int]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: list[int], ref: list[int], beta2: float = 1.0) -> float:
    """LCS-based F score: F = (1+b2) P R / (R + b2 P), 0 when degenerate."""
    hyp, ref = list(hyp), list(ref)
    ell = _lcs_len(hyp, ref)
    if ell == 0 or not hyp or not ref:
        return 0.0
    p = ell / len(hyp)
    r = ell / len(ref)
    return (1 + beta2) * p * r / (r + beta2 * p)


def translation_scores(pairs: list[tuple[list[int], list[int]]]) -> TranslationScores:
    rl = float(np.mean([rouge_l(h, r) for h, r in pairs])) if pairs else 0.0
    return TranslationScores(bleu=corpus_bleu(pairs), rouge_l=rl)


# ---------------------------------------------------------------------------
# routing-vs-ground-truth alignment


def alignment_purity(a: np.ndarray, w_seg: np.ndarray,
                     frame_to_segment: np.ndarray) -> float:
    """Fraction of thoughts whose peak temporal weight falls in the expected
    true segment (thought k is expected to match the k-th segment in time).

    Only the first min(K, number of true segments) thoughts are scored. The
    temporal weight of thought k is r_k = A_k @ W_seg over valid frames.
    """
    a = np.asarray(a, dtype=np.float64)
    w_seg = np.asarray(w_seg, dtype=np.float64)
    frame_to_segment = np.asarray(frame_to_segment)
    n_true = int(frame_to_segment.max()) + 1
    r = a @ w_seg  # [K, T]
    k_scored = min(a.shape[0], n_true)
    if k_scored == 0:
        return 0.0
    hits = 0
    n_valid = frame_to_segment.shape[0]
    for k in range(k_scored):
        peak = int(np.argmax(r[k, :n_valid]))
        if int(frame_to_segment[peak]) == k:
            hits += 1
    return hits / k_scored


# ---------------------------------------------------------------------------
# report serialization


def format_report(values: dict[str, float]) -> str:
    """Flat key=value lines, one metric per line."""
    return "".join(f"{k}={v:.6g}\n" for k, v in values.items())


def csv_row(values: dict[str, float]) -> tuple[str, str]:
    """(header, row) for a one-line CSV rendering of a metric dict."""
    keys = list(values)
    header = ",".join(keys)
    row = ",".join(f"{values[k]:.6g}" for k in keys)
    return header, row
