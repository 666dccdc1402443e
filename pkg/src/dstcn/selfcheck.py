"""Built-in verification: gradient check against central finite differences,
receptive-field impulse test, segmental-metrics oracle sweep, and smoothing/CE
hand-value checks. Each check family reports pass/fail plus a detail string.

The gradient check probes a fixed tiny model whose configuration was chosen so
that no ReLU kink lies inside the finite-difference step (a kink crossing
invalidates the FD oracle, not the gradient); the smoothing term's constant
t-1 side is held at its base value during probing for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as md
from . import numerics as nx
from .data import MACRO_CATALOG, MICRO_CATALOG
from .loss import LossConfig, cross_entropy, total_loss, truncated_mse
from .metrics import Segment, match_counts

GRADCHECK_SEED = 2
GRADCHECK_STEP = 1e-3
GRADCHECK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _gradcheck_setup(num_layers=2, num_filters=4, n_samples=32, seed=GRADCHECK_SEED):
    cfg = md.ModelConfig(
        micro_classes=MICRO_CATALOG.names,
        macro_classes=MACRO_CATALOG.names,
        mode="dual_scale",
        num_layers=num_layers,
        num_filters=num_filters,
        in_channels=6,
    )
    params = md.init_parameters(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    x = rng.standard_normal((6, n_samples))
    micro = rng.integers(0, len(MICRO_CATALOG), n_samples)
    macro = rng.integers(0, len(MACRO_CATALOG), n_samples)
    mask = np.ones(n_samples, dtype=bool)
    mask[-3:] = False
    return cfg, params, x, micro, macro, mask


def gradcheck_loss_value(cfg, params, x, micro, macro, mask, lc, tmse_refs):
    """Loss value with the smoothing term's t-1 side frozen at tmse_refs."""
    res = md.forward(None, x, cfg, params)
    value = 0.0
    for s, (scale, p) in enumerate(zip(res.scales, res.probs), start=1):
        if scale == "micro":
            value += lc.eta * cross_entropy(None, p, micro, mask).value
        elif s == 1:
            value += lc.eta * cross_entropy(None, p, macro, mask).value
        else:
            value += cross_entropy(None, p, macro, mask).value
            value += lc.lam * truncated_mse(None, p, lc.tau, mask, prev_reference=tmse_refs[s]).value
    return value


def gradient_check(step=GRADCHECK_STEP, tolerance=GRADCHECK_TOL, corrupt=False):
    """Analytic gradients of the full composite loss vs central differences."""
    cfg, params, x, micro, macro, mask = _gradcheck_setup()
    lc = LossConfig()
    base = md.forward(None, x, cfg, params)
    refs = {s: p.value.copy() for s, p in enumerate(base.probs, start=1)}
    tape = nx.Tape()
    res = md.forward(tape, x, cfg, params)
    loss, _ = total_loss(tape, res, micro, macro, lc, mask)
    grads = nx.backward(tape, loss)
    if corrupt:
        first = sorted(grads)[0]
        grads[first] = grads[first] + 1e-2
    worst = 0.0
    worst_name = ""
    for name, value in params.items():
        g = grads[name]
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = value[idx]
            value[idx] = old + step
            up = gradcheck_loss_value(cfg, params, x, micro, macro, mask, lc, refs)
            value[idx] = old - step
            down = gradcheck_loss_value(cfg, params, x, micro, macro, mask, lc, refs)
            value[idx] = old
            fd = (up - down) / (2 * step)
            rel = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1e-6)
            if rel > worst:
                worst, worst_name = rel, f"{name}{idx}"
    passed = worst < tolerance
    return CheckResult(
        "gradient_check",
        passed,
        f"max relative error {worst:.3e} at {worst_name} (tolerance {tolerance:g}, step {step:g})",
    )


def receptive_field_check(n_samples=3000, num_layers=9):
    """Perturbing one input sample must change stage outputs only inside the
    2^(L+1)-1 window, bit-exactly outside it."""
    if md.receptive_field(1) != 3 or md.receptive_field(4) != 31 or md.receptive_field(9) != 1023:
        return CheckResult("receptive_field_check", False, "closed form broke on known values")
    cfg = md.ModelConfig(
        micro_classes=MICRO_CATALOG.names,
        macro_classes=MACRO_CATALOG.names,
        mode="ablation_no_micro",
        num_layers=num_layers,
        num_filters=8,
        in_channels=6,
    )
    params = md.init_parameters(cfg, 11)
    stage = cfg.stages()[0]
    rng = np.random.default_rng(12)
    x = rng.standard_normal((6, n_samples))
    t0 = n_samples // 2
    x2 = x.copy()
    x2[:, t0] += 1.0
    p1 = md.sstcn_forward(None, nx.Node(x), params, stage, "stage1").value
    p2 = md.sstcn_forward(None, nx.Node(x2), params, stage, "stage1").value
    radius = (md.receptive_field(num_layers) - 1) // 2
    changed = np.flatnonzero(np.any(p1 != p2, axis=0))
    if changed.size == 0:
        return CheckResult("receptive_field_check", False, "perturbation had no effect at all")
    lo, hi = changed.min(), changed.max()
    inside = t0 - radius <= lo and hi <= t0 + radius
    detail = (
        f"perturbation at {t0} changed samples [{lo}, {hi}], allowed "
        f"[{t0 - radius}, {t0 + radius}] (window {md.receptive_field(num_layers)})"
    )
    return CheckResult("receptive_field_check", inside, detail)


def reference_match_counts(true_segments, pred_segments, threshold):
    """Set-based reimplementation of the segment matcher, used as the oracle."""
    true_sets = [set(range(s.start, s.end)) for s in true_segments]
    claimed = set()
    tp = fp = 0
    for p in pred_segments:
        pset = set(range(p.start, p.end))
        best_iou, best_idx = 0.0, None
        for i, tset in enumerate(true_sets):
            inter = len(pset & tset)
            if inter == 0:
                continue
            iou = inter / len(pset | tset)
            if iou > best_iou:
                best_iou, best_idx = iou, i
        if best_idx is not None and best_iou >= threshold and best_idx not in claimed:
            claimed.add(best_idx)
            tp += 1
        else:
            fp += 1
    fn = len(true_sets) - len(claimed)
    return tp, fp, fn


CANONICAL_OVERLAP_CASES = [
    # (name, true segments, predicted segments, expected (tp, fp, fn)) at IoU 0.5
    ("exact match", [(10, 30)], [(10, 30)], (1, 0, 0)),
    ("high-IoU shift", [(10, 30)], [(12, 32)], (1, 0, 0)),
    ("short fragment of a long bout", [(10, 40)], [(10, 18)], (0, 1, 1)),
    ("equal-length low overlap", [(10, 30)], [(25, 45)], (0, 1, 1)),
    ("prediction swallows a short bout", [(10, 20)], [(5, 40)], (0, 1, 1)),
    ("disjoint", [(10, 20)], [(50, 60)], (0, 1, 1)),
    ("over-segmentation", [(10, 50)], [(10, 18), (22, 30), (34, 42)], (0, 3, 1)),
    ("under-segmentation", [(10, 20), (30, 40)], [(10, 40)], (0, 1, 2)),
]


def metrics_oracle_check(n_random=300, max_len=200, n_classes=5, seed=5):
    """Production matcher vs the set-based oracle on fixed cases and random tracks."""
    for name, true_iv, pred_iv, expected in CANONICAL_OVERLAP_CASES:
        ts = [Segment(1, a, b) for a, b in true_iv]
        ps = [Segment(1, a, b) for a, b in pred_iv]
        got = match_counts(ts, ps, 0.5)
        if got != expected:
            return CheckResult(
                "metrics_oracle_check", False, f"case {name!r}: got {got}, expected {expected}"
            )
        if reference_match_counts(ts, ps, 0.5) != expected:
            return CheckResult(
                "metrics_oracle_check", False, f"case {name!r}: oracle disagrees with expectation"
            )
    rng = np.random.default_rng(seed)
    from .metrics import extract_segments

    for trial in range(n_random):
        n = int(rng.integers(2, max_len + 1))
        truth = rng.integers(0, n_classes, n)
        pred = rng.integers(0, n_classes, n)
        threshold = float(rng.choice([0.25, 0.5, 0.75]))
        for cid in range(1, n_classes):
            ts = [s for s in extract_segments(truth) if s.class_id == cid]
            ps = [s for s in extract_segments(pred) if s.class_id == cid]
            if match_counts(ts, ps, threshold) != reference_match_counts(ts, ps, threshold):
                return CheckResult(
                    "metrics_oracle_check",
                    False,
                    f"random trial {trial}, class {cid}, threshold {threshold}: counts diverge",
                )
    return CheckResult(
        "metrics_oracle_check",
        True,
        f"{len(CANONICAL_OVERLAP_CASES)} fixed cases and {n_random} random tracks agree",
    )


def loss_hand_values_check():
    """Smoothing hand value (a 5-unit log jump truncated at 4 contributes 16)
    and uniform-prediction CE = ln(C)/C."""
    probs = np.array([[np.exp(-5.0), 1.0], [0.5, 0.5]])
    got = truncated_mse(None, probs, 4.0).value
    want = 16.0 / (2 * 2)
    if abs(got * 2 * 2 - 16.0) > 1e-12:
        return CheckResult(
            "loss_hand_values_check", False, f"truncated pair contributed {got * 4:.12f}, expected 16"
        )
    untruncated = truncated_mse(None, probs, 1e9).value
    if abs(untruncated * 4 - 5.0 ** 2) > 1e-9:
        return CheckResult(
            "loss_hand_values_check", False, f"untruncated pair contributed {untruncated * 4:.12f}, expected 25"
        )
    for c in (2, 5, 6):
        uniform = np.full((c, 7), 1.0 / c)
        truth = np.zeros(7, dtype=int)
        ce = cross_entropy(None, uniform, truth).value
        if abs(ce - np.log(c) / c) > 1e-12:
            return CheckResult(
                "loss_hand_values_check", False, f"uniform CE over {c} classes was {ce:.12f}"
            )
    return CheckResult("loss_hand_values_check", True, f"want {want:.3f} per pair and ln(C)/C both hit")


def run_selfcheck(corrupt_gradient=False):
    """All four check families, in a fixed order."""
    return [
        gradient_check(corrupt=corrupt_gradient),
        receptive_field_check(),
        metrics_oracle_check(),
        loss_hand_values_check(),
    ]
