"""Training and evaluation harness: slicing + batching, per-fold training with
Adam, full-sequence evaluation, leave-one-subject-out protocol runs, and
checkpoint/report plumbing.

Training consumes 40 s slices (50 % overlap) whose zero-padded tails are
masked out of every loss term; evaluation always runs on full sequences (the
network is length-agnostic). Per-channel z-score normalization is computed
from the training recordings of each fold only. Every source of randomness is
derived from (config seed, test subject), so folds are reproducible and
independent of scheduling order.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as md
from . import numerics as nx
from .data import (
    MACRO_CATALOG,
    MICRO_CATALOG,
    SLICE_LEN,
    Recording,
    build_folds,
    slice_recording,
)
from .loss import LossConfig, total_loss
from .metrics import aggregate_reports, compute_report, extract_segments
from .synthgen import dataset_metas


@dataclass
class TrainConfig:
    mode: str = "dual_scale"
    epochs: int = 50
    batch_size: int = 32
    num_layers: int = 9
    num_filters: int = 64
    seed: int = 0
    micro_budget: float = 1.0  # fraction of micro segments kept for supervision
    eta: float = 1.0
    lam: float = 0.15
    tau: float = 4.0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iou_threshold: float = 0.5
    log_every: int = 1
    # optional early exit once training-set macro F1 reaches a target
    early_stop_f1: float = None
    early_stop_every: int = 25

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.micro_budget <= 1.0:
            raise ValueError("micro_budget must lie in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def model_config(self):
        return md.ModelConfig(
            micro_classes=MICRO_CATALOG.names,
            macro_classes=MACRO_CATALOG.names,
            mode=self.mode,
            num_layers=self.num_layers,
            num_filters=self.num_filters,
            in_channels=6,
        )

    def loss_config(self):
        return LossConfig(eta=self.eta, lam=self.lam, tau=self.tau)

    def adam_hyper(self):
        return nx.AdamHyper(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class RunLog:
    manifest: dict
    steps: list = field(default_factory=list)

    def log_step(self, **kw):
        self.steps.append(kw)

    def loss_curve(self):
        return [s["total"] for s in self.steps if "total" in s]

    def write_text(self, path):
        with open(path, "a") as f:
            f.write(json.dumps({"manifest": self.manifest}, sort_keys=True) + "\n")
            for s in self.steps:
                f.write(json.dumps(s, sort_keys=True) + "\n")


def _stable_int(text):
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def fold_rng(config, test_subject, stream):
    return np.random.default_rng([config.seed, _stable_int(test_subject), stream])


def channel_stats(recordings):
    """Per-channel mean/std over a set of recordings (training side only)."""
    joined = np.concatenate([rec.imu for rec in recordings], axis=1)
    mean = joined.mean(axis=1)
    std = joined.std(axis=1)
    std = np.maximum(std, 1e-8)
    return mean, std


def micro_budget_mask(rec, keep_fraction, rng):
    """True where the micro track is supervised. A seeded per-class subset of
    micro segments is kept; samples of dropped segments are masked out of the
    micro CE term (macro supervision is untouched)."""
    keep = np.ones(rec.n_samples, dtype=bool)
    if keep_fraction >= 1.0:
        return keep
    segments = extract_segments(rec.micro_track)
    by_class = {}
    for seg in segments:
        by_class.setdefault(seg.class_id, []).append(seg)
    for cid in sorted(by_class):
        segs = by_class[cid]
        n_keep = int(round(keep_fraction * len(segs)))
        dropped = rng.permutation(len(segs))[n_keep:]
        for i in dropped:
            keep[segs[i].start:segs[i].end] = False
    return keep


def training_slices(fold, recordings, config):
    """Deterministic slice list for a fold's training set, with normalized
    signals and per-slice micro-budget masks."""
    train = [recordings[rid] for rid in fold.train_recordings]
    if not train:
        raise ValueError(f"fold {fold.test_subject}: empty training set")
    mean, std = channel_stats(train)
    rng_budget = fold_rng(config, fold.test_subject, 1)
    slices = []
    for rid in sorted(fold.train_recordings):
        rec = recordings[rid]
        budget = micro_budget_mask(rec, config.micro_budget, rng_budget)
        normalized = (rec.imu - mean[:, None]) / std[:, None]
        ss = slice_recording(
            Recording(rec.subject, rec.scenario, normalized, rec.micro_track, rec.macro_track)
        )
        for sl in ss.slices:
            b = np.zeros(SLICE_LEN, dtype=bool)
            stop = min(sl.start + SLICE_LEN, rec.n_samples)
            b[: stop - sl.start] = budget[sl.start:stop]
            slices.append((rid, sl, b))
    return slices, mean, std


def assemble_batch(batch_slices):
    """Pack slices along the time axis: (6, B*SLICE_LEN) plus flat labels/masks."""
    imu = np.concatenate([sl.imu for _, sl, _ in batch_slices], axis=1)
    micro = np.concatenate([sl.micro for _, sl, _ in batch_slices])
    macro = np.concatenate([sl.macro for _, sl, _ in batch_slices])
    mask = np.concatenate([sl.mask for _, sl, _ in batch_slices])
    budget = np.concatenate([b for _, _, b in batch_slices])
    return imu, micro, macro, mask, budget


def iter_batches(slices, epoch_rng, batch_size):
    order = epoch_rng.permutation(len(slices))
    for i in range(0, len(order), batch_size):
        yield assemble_batch([slices[j] for j in order[i:i + batch_size]])


def batch_digest(batch):
    h = hashlib.sha256()
    for arr in batch:
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class TrainedFold:
    test_subject: str
    params: dict
    mean: np.ndarray
    std: np.ndarray
    config: TrainConfig
    run_log: RunLog


def train_fold(fold, recordings, config, progress=None):
    """Train one fold; returns the trained parameters plus fold metadata."""
    model_cfg = config.model_config()
    loss_cfg = config.loss_config()
    slices, mean, std = training_slices(fold, recordings, config)
    params = md.init_parameters(model_cfg, [config.seed, _stable_int(fold.test_subject), 3])
    state = nx.AdamState.for_params(params)
    hyper = config.adam_hyper()
    shuffle_rng = fold_rng(config, fold.test_subject, 2)
    run_log = RunLog(
        manifest={
            "config_hash": config.config_hash(),
            "test_subject": fold.test_subject,
            "n_train_slices": len(slices),
        }
    )
    step = 0
    for epoch in range(config.epochs):
        for imu, micro, macro, mask, budget in iter_batches(slices, shuffle_rng, config.batch_size):
            tape = nx.Tape()
            res = md.forward(tape, imu, model_cfg, params, seg_len=SLICE_LEN)
            loss, breakdown = total_loss(
                tape, res, micro, macro, loss_cfg,
                sample_mask=mask, micro_mask=budget, seg_len=SLICE_LEN,
            )
            grads = nx.backward(tape, loss)
            nx.adam_step(params, grads, state, hyper)
            step += 1
            if step % config.log_every == 0:
                run_log.log_step(fold=fold.test_subject, epoch=epoch, step=step, **breakdown)
        if progress is not None:
            progress(fold.test_subject, epoch, run_log.steps[-1] if run_log.steps else {})
        if (
            config.early_stop_f1 is not None
            and (epoch + 1) % config.early_stop_every == 0
            and _training_macro_f1(fold, recordings, model_cfg, params, mean, std) >= config.early_stop_f1
        ):
            break
    return TrainedFold(fold.test_subject, params, mean, std, config, run_log)


def _training_macro_f1(fold, recordings, model_cfg, params, mean, std):
    reports = []
    for rid in sorted(fold.train_recordings):
        rec = recordings[rid]
        pred = predict_recording(rec, model_cfg, params, mean, std)
        reports.append(compute_report(rec.macro_track, pred, MACRO_CATALOG))
    agg = aggregate_reports(reports)
    scores = [m.f1 for name, m in agg.samplewise.items() if m.present]
    return min(scores) if scores else 0.0


def predict_recording(rec, model_cfg, params, mean, std, stage_probs=False):
    """Full-sequence inference; returns the decoded final macro track, or all
    per-stage probabilities when stage_probs is set."""
    x = (rec.imu - mean[:, None]) / std[:, None]
    res = md.forward(None, x, model_cfg, params)
    if stage_probs:
        return res
    return md.predict_labels(res.final.value)


@dataclass
class FoldEvaluation:
    test_subject: str
    report: object  # MetricsReport of the final stage
    stage_reports: dict  # stage number -> MetricsReport (macro stages)
    stage_segment_counts: dict  # stage number -> decoded segment count
    confusers_total: int
    confusers_rejected: int


def evaluate_fold(trained, fold, recordings, confusers_by_subject=None, iou_threshold=None):
    """Score the held-out recordings of a fold on full sequences."""
    config = trained.config
    threshold = config.iou_threshold if iou_threshold is None else iou_threshold
    model_cfg = config.model_config()
    reports = []
    stage_reports = {}
    stage_counts = {}
    conf_total = conf_rejected = 0
    for rid in sorted(fold.test_recordings):
        rec = recordings[rid]
        res = predict_recording(rec, model_cfg, trained.params, trained.mean, trained.std, stage_probs=True)
        final_pred = md.predict_labels(res.final.value)
        reports.append(compute_report(rec.macro_track, final_pred, MACRO_CATALOG, threshold))
        for stage_no, (scale, probs) in enumerate(zip(res.scales, res.probs), start=1):
            if scale != "macro":
                continue
            pred = md.predict_labels(probs.value)
            stage_reports.setdefault(stage_no, []).append(
                compute_report(rec.macro_track, pred, MACRO_CATALOG, threshold)
            )
            stage_counts[stage_no] = stage_counts.get(stage_no, 0) + len(extract_segments(pred))
        if confusers_by_subject and rec.subject in confusers_by_subject:
            for start, end, _cls in confusers_by_subject[rec.subject]:
                conf_total += 1
                window = final_pred[start:end]
                if np.sum(window == 0) * 2 > window.size:
                    conf_rejected += 1
    return FoldEvaluation(
        test_subject=fold.test_subject,
        report=aggregate_reports(reports),
        stage_reports={k: aggregate_reports(v) for k, v in stage_reports.items()},
        stage_segment_counts=stage_counts,
        confusers_total=conf_total,
        confusers_rejected=conf_rejected,
    )


def confusers_from_manifest(manifest):
    return {
        entry["subject"]: [tuple(c) for c in entry.get("confusers", [])]
        for entry in manifest["subjects"]
    }


@dataclass
class ProtocolResult:
    protocol: str
    config: TrainConfig
    fold_evaluations: list
    aggregate: object  # MetricsReport pooled over folds
    stage_reports: dict
    stage_segment_counts: dict
    confusers_total: int
    confusers_rejected: int
    run_logs: list

    def aggregate_text(self):
        return self.aggregate.to_text()


def _run_fold_task(args):
    fold, recordings, config, confusers, out_dir = args
    trained = train_fold(fold, recordings, config)
    evaluation = evaluate_fold(trained, fold, recordings, confusers)
    if out_dir is not None:
        fold_dir = os.path.join(out_dir, "folds", fold.test_subject)
        os.makedirs(fold_dir, exist_ok=True)
        save_trained(os.path.join(fold_dir, "checkpoint.ckpt"), trained)
        with open(os.path.join(fold_dir, "report.txt"), "w") as f:
            f.write(evaluation.report.to_text())
        trained.run_log.write_text(os.path.join(fold_dir, "train_log.jsonl"))
    return trained.run_log, evaluation


def run_protocol(recordings, manifest, protocol, config, out_dir=None, jobs=1, progress=None):
    """Train and evaluate every fold of a protocol; aggregate pooled metrics."""
    plan = build_folds(dataset_metas(manifest), protocol)
    confusers = confusers_from_manifest(manifest)
    tasks = [(fold, recordings, config, confusers, out_dir) for fold in plan.folds]
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_task, tasks))
    else:
        for task in tasks:
            results.append(_run_fold_task(task))
            if progress is not None:
                progress(task[0].test_subject)
    run_logs = [r[0] for r in results]
    evaluations = [r[1] for r in results]
    stage_reports = {}
    stage_counts = {}
    for ev in evaluations:
        for stage_no, rep in ev.stage_reports.items():
            stage_reports.setdefault(stage_no, []).append(rep)
        for stage_no, count in ev.stage_segment_counts.items():
            stage_counts[stage_no] = stage_counts.get(stage_no, 0) + count
    return ProtocolResult(
        protocol=protocol,
        config=config,
        fold_evaluations=evaluations,
        aggregate=aggregate_reports([ev.report for ev in evaluations]),
        stage_reports={k: aggregate_reports(v) for k, v in stage_reports.items()},
        stage_segment_counts=stage_counts,
        confusers_total=sum(ev.confusers_total for ev in evaluations),
        confusers_rejected=sum(ev.confusers_rejected for ev in evaluations),
        run_logs=run_logs,
    )


def save_trained(path, trained):
    arrays = dict(trained.params)
    arrays["preproc/mean"] = trained.mean
    arrays["preproc/std"] = trained.std
    meta = {
        "model": trained.config.model_config().to_meta(),
        "train_config": trained.config.to_dict(),
        "config_hash": trained.config.config_hash(),
        "test_subject": trained.test_subject,
    }
    md.save_checkpoint(path, arrays, meta)


def load_trained(path, expected_config=None):
    params, model_cfg, meta, extra = md.load_model_checkpoint(path, expected_config)
    config = TrainConfig(**meta["train_config"])
    return TrainedFold(
        test_subject=meta.get("test_subject", ""),
        params=params,
        mean=extra["preproc/mean"],
        std=extra["preproc/std"],
        config=config,
        run_log=RunLog(manifest={"config_hash": meta.get("config_hash", "")}),
    )
