"""Sample-wise precision/recall/F1 and segmental IoU-F1.

Segmental scoring: predicted segments are visited in temporal order; each is
matched to the same-class true segment with the highest IoU among those it
overlaps (earliest wins ties). A match with IoU at or above the threshold
claims that true segment (one match per true segment) and counts TPseg;
everything else counts FPseg. True segments never claimed count FNseg. An
over-segmented activity therefore inflates FPseg and an under-segmented one
inflates FNseg. Class 0 ("others") is never scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment:
    class_id: int
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"segment [{self.start}, {self.end}) is empty")

    def __len__(self):
        return self.end - self.start


@dataclass
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    present: bool


def prf(tp, fp, fn):
    """Precision/recall/F1 with the empty-denominator-is-zero convention."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def extract_segments(track):
    """Maximal constant-class runs with class != 0, sorted and disjoint."""
    track = np.asarray(track)
    if track.ndim != 1:
        raise ValueError(f"expected a 1-D label track, got ndim={track.ndim}")
    if track.size == 0:
        return []
    boundaries = np.flatnonzero(np.diff(track)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [track.size]))
    return [
        Segment(int(track[s]), int(s), int(e))
        for s, e in zip(starts, ends)
        if track[s] != 0
    ]


def segment_iou(a, b):
    """Intersection over union of two same-class segments on sample indices."""
    if a.class_id != b.class_id:
        raise ValueError(f"IoU between different classes {a.class_id} and {b.class_id}")
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = len(a) + len(b) - inter
    return inter / union


def match_counts(true_segments, pred_segments, threshold):
    """Greedy one-match-per-true-segment counts (TPseg, FPseg, FNseg) for
    segments of a single class."""
    claimed = [False] * len(true_segments)
    tp = fp = 0
    for p in pred_segments:
        best_iou, best_idx = 0.0, None
        for i, t in enumerate(true_segments):
            iou = segment_iou(p, t)
            if iou > best_iou:
                best_iou, best_idx = iou, i
        if best_idx is not None and best_iou >= threshold and not claimed[best_idx]:
            claimed[best_idx] = True
            tp += 1
        else:
            fp += 1
    fn = claimed.count(False)
    return tp, fp, fn


def samplewise_prf(truth, pred, catalog):
    """Per-class sample-level counts and P/R/F1, excluding class 0."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"track lengths differ: {truth.shape} vs {pred.shape}")
    out = {}
    for cid, name in enumerate(catalog.names):
        if cid == 0:
            continue
        t = truth == cid
        p = pred == cid
        tp = int(np.sum(t & p))
        fp = int(np.sum(~t & p))
        fn = int(np.sum(t & ~p))
        precision, recall, f1 = prf(tp, fp, fn)
        out[name] = ClassMetrics(tp, fp, fn, precision, recall, f1, bool(t.any() or p.any()))
    return out


def segmental_f1(truth, pred, catalog, threshold=0.5):
    """Per-class segmental IoU counts and P/R/F1 at a threshold, excluding class 0."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"track lengths differ: {truth.shape} vs {pred.shape}")
    true_segs = extract_segments(truth)
    pred_segs = extract_segments(pred)
    out = {}
    for cid, name in enumerate(catalog.names):
        if cid == 0:
            continue
        ts = [s for s in true_segs if s.class_id == cid]
        ps = [s for s in pred_segs if s.class_id == cid]
        tp, fp, fn = match_counts(ts, ps, threshold)
        precision, recall, f1 = prf(tp, fp, fn)
        out[name] = ClassMetrics(tp, fp, fn, precision, recall, f1, bool(ts or ps))
    return out


@dataclass
class MetricsReport:
    threshold: float
    samplewise: dict  # class name -> ClassMetrics
    segmental: dict  # class name -> ClassMetrics

    def to_text(self):
        lines = [
            "# dstcn metrics v1",
            "# class\tfamily\tthreshold\ttp\tfp\tfn\tprecision\trecall\tf1\tpresent",
        ]
        for family, table in (("samplewise", self.samplewise), ("segmental", self.segmental)):
            thr = "-" if family == "samplewise" else f"{self.threshold:.2f}"
            for name in table:
                m = table[name]
                lines.append(
                    f"{name}\t{family}\t{thr}\t{m.tp}\t{m.fp}\t{m.fn}"
                    f"\t{m.precision:.6f}\t{m.recall:.6f}\t{m.f1:.6f}\t{int(m.present)}"
                )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        samplewise, segmental = {}, {}
        threshold = 0.5
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            name, family, thr, tp, fp, fn, precision, recall, f1, present = line.split("\t")
            m = ClassMetrics(int(tp), int(fp), int(fn), float(precision), float(recall), float(f1), present == "1")
            if family == "samplewise":
                samplewise[name] = m
            else:
                segmental[name] = m
                threshold = float(thr)
        return cls(threshold, samplewise, segmental)


def compute_report(truth, pred, catalog, threshold=0.5):
    return MetricsReport(
        threshold=threshold,
        samplewise=samplewise_prf(truth, pred, catalog),
        segmental=segmental_f1(truth, pred, catalog, threshold),
    )


def aggregate_reports(reports):
    """Pool per-class counts across reports and recompute rates."""
    if not reports:
        raise ValueError("no reports to aggregate")
    threshold = reports[0].threshold
    out = MetricsReport(threshold, {}, {})
    for family in ("samplewise", "segmental"):
        merged = {}
        for rep in reports:
            if rep.threshold != threshold:
                raise ValueError("cannot aggregate reports with different thresholds")
            for name, m in getattr(rep, family).items():
                acc = merged.setdefault(name, [0, 0, 0, False])
                acc[0] += m.tp
                acc[1] += m.fp
                acc[2] += m.fn
                acc[3] = acc[3] or m.present
        table = getattr(out, family)
        for name, (tp, fp, fn, present) in merged.items():
            precision, recall, f1 = prf(tp, fp, fn)
            table[name] = ClassMetrics(tp, fp, fn, precision, recall, f1, present)
    return out
