"""Composite training objective: per-repetition (micro) cross entropy on the
first stage, whole-exercise (macro) cross entropy plus truncated-MSE smoothing
on the later stages.

All terms divide by (unmasked sample count x class count), so zero-padded
slice tails contribute nothing and, with no padding, the normalization is the
plain 1/(T*C) sample mean. The smoothing term penalizes squared adjacent-sample
log-probability jumps, truncated at tau, with the earlier sample of each pair
treated as a constant during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Node, weighted_sum

LOG_CLAMP = 1e-12


@dataclass
class LossConfig:
    eta: float = 1.0  # weight of the first-stage (micro) CE term
    lam: float = 0.15  # weight of the smoothing term on refinement stages
    tau: float = 4.0  # truncation of adjacent log-probability differences

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


def _as_mask(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"mask has shape {mask.shape}, expected ({n},)")
    return mask


def cross_entropy(tape, probs, truth, mask=None):
    """Mean over unmasked samples and classes of -log p(true class)."""
    pv = probs.value if isinstance(probs, Node) else np.asarray(probs, dtype=np.float64)
    node = probs if isinstance(probs, Node) else Node(pv)
    n_classes, n = pv.shape
    truth = np.asarray(truth)
    if truth.shape != (n,):
        raise ValueError(f"truth has length {truth.shape}, probabilities have {n} samples")
    if truth.min(initial=0) < 0 or truth.max(initial=0) >= n_classes:
        raise ValueError(f"truth ids outside [0, {n_classes})")
    mask = _as_mask(mask, n)
    n_unmasked = int(mask.sum())
    if n_unmasked == 0:
        out = Node(0.0)
        if tape is not None:
            tape.record(out, (node,), lambda gy: (np.zeros_like(pv),))
        return out
    cols = np.arange(n)
    p_true = pv[truth, cols]
    p_clamped = np.maximum(p_true, LOG_CLAMP)
    denom = n_unmasked * n_classes
    value = -float(np.log(p_clamped, where=mask, out=np.zeros(n))[mask].sum()) / denom
    out = Node(value)
    if tape is not None:
        def backward(gy):
            gp = np.zeros_like(pv)
            coeff = np.where(mask & (p_true >= LOG_CLAMP), 1.0 / p_clamped, 0.0)
            gp[truth, cols] = -(gy / denom) * coeff
            return (gp,)
        tape.record(out, (node,), backward)
    return out


def truncated_mse(tape, probs, tau=4.0, mask=None, seg_len=None, prev_reference=None):
    """Truncated squared adjacent-sample log-probability differences.

    A pair (t-1, t) counts only if both samples are unmasked and lie in the
    same slice segment; gradients flow to the later sample of each pair only
    (the t-1 side is a constant during differentiation). ``prev_reference``
    substitutes a fixed array for the t-1 side; gradient checkers use it to
    hold the constant side at its base value while probing the other.
    """
    pv = probs.value if isinstance(probs, Node) else np.asarray(probs, dtype=np.float64)
    node = probs if isinstance(probs, Node) else Node(pv)
    n_classes, n = pv.shape
    mask = _as_mask(mask, n)
    if seg_len is None:
        seg_len = n
    if n % seg_len != 0:
        raise ValueError(f"time axis {n} is not a multiple of seg_len={seg_len}")
    n_unmasked = int(mask.sum())
    if n_unmasked == 0 or seg_len < 2:
        out = Node(0.0)
        if tape is not None:
            tape.record(out, (node,), lambda gy: (np.zeros_like(pv),))
        return out
    denom = n_unmasked * n_classes
    p_clamped = np.maximum(pv, LOG_CLAMP)
    logp = np.log(p_clamped).reshape(n_classes, -1, seg_len)
    if prev_reference is None:
        prev = logp
    else:
        ref = np.asarray(prev_reference, dtype=np.float64)
        if ref.shape != pv.shape:
            raise ValueError(f"prev_reference shape {ref.shape} != probabilities shape {pv.shape}")
        prev = np.log(np.maximum(ref, LOG_CLAMP)).reshape(n_classes, -1, seg_len)
    diff = logp[:, :, 1:] - prev[:, :, :-1]
    mv = mask.reshape(-1, seg_len)
    pair_mask = mv[:, 1:] & mv[:, :-1]
    abs_diff = np.abs(diff)
    truncated = np.minimum(abs_diff, tau)
    value = float((np.square(truncated) * pair_mask).sum()) / denom
    out = Node(value)
    if tape is not None:
        def backward(gy):
            g_pair = 2.0 * diff * (abs_diff <= tau) * pair_mask * (gy / denom)
            g_logp = np.zeros((n_classes, mv.shape[0], seg_len))
            g_logp[:, :, 1:] = g_pair
            gp = g_logp.reshape(n_classes, n)
            gp = np.where(pv >= LOG_CLAMP, gp / p_clamped, 0.0)
            return (gp,)
        tape.record(out, (node,), backward)
    return out


def total_loss(tape, result, micro_truth, macro_truth, config, sample_mask=None, micro_mask=None, seg_len=None):
    """Combine per-stage terms.

    Micro stages contribute eta * CE against the micro track (additionally
    masked by the micro-label budget). Macro stages contribute CE + lam * TMSE
    against the macro track, except a macro stage in first position (the
    no-micro ablation), which takes the eta weight and no smoothing.

    Returns (scalar loss node, {term name: unweighted value}).
    """
    n = result.probs[0].value.shape[1]
    sample_mask = _as_mask(sample_mask, n)
    if micro_mask is None:
        micro_mask = sample_mask
    else:
        micro_mask = _as_mask(micro_mask, n) & sample_mask
    terms, weights, breakdown = [], [], {}
    for s, (scale, probs) in enumerate(zip(result.scales, result.probs), start=1):
        if probs.value.shape[1] != n:
            raise ValueError(f"stage{s}: length {probs.value.shape[1]} != stage1 length {n}")
        if scale == "micro":
            ce = cross_entropy(tape, probs, micro_truth, micro_mask)
            terms.append(ce)
            weights.append(config.eta)
            breakdown[f"stage{s}/ce_micro"] = ce.value
        elif s == 1:
            ce = cross_entropy(tape, probs, macro_truth, sample_mask)
            terms.append(ce)
            weights.append(config.eta)
            breakdown[f"stage{s}/ce_macro"] = ce.value
        else:
            ce = cross_entropy(tape, probs, macro_truth, sample_mask)
            terms.append(ce)
            weights.append(1.0)
            breakdown[f"stage{s}/ce_macro"] = ce.value
            sm = truncated_mse(tape, probs, config.tau, sample_mask, seg_len)
            terms.append(sm)
            weights.append(config.lam)
            breakdown[f"stage{s}/tmse"] = sm.value
    total = weighted_sum(tape, terms, weights)
    breakdown["total"] = total.value
    return total, breakdown
