"""Deterministic synthetic IMU generator.

Each subject's recording alternates background activity with exercise blocks.
An exercise block is a macro segment spanning its repetitions; every repetition
is a smooth half-sine pulse with a class-specific channel signature, labeled at
the micro scale, with unlabeled pauses in between. Background blocks carry
noise plus slow drift and, optionally, isolated single-repetition "confuser"
pulses that look like a micro class but stay labeled "others" on both tracks
(single repetitions outside an exercise bout are not exercises). Inter-subject
amplitude/duration jitter is on by default so held-out-subject evaluation is
non-trivial.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import (
    MACRO_CATALOG,
    MICRO_CATALOG,
    SAMPLE_RATE_HZ,
    AnnotationSegment,
    Recording,
    RecordingMeta,
    tracks_from_segments,
    validate_segments,
    write_annotations,
    write_signal_csv,
)

MANIFEST_NAME = "manifest.json"

# which micro class repeats inside each macro exercise block
BLOCK_MICRO = {
    "ankle_plantarflexors": ("micro_ankle_plantarflexors",),
    "knee_bends": ("micro_knee_bends",),
    "abdominal_muscles": ("micro_abdominal_muscles",),
    "chair_rising": ("sit_to_stand", "stand_to_sit"),
}


@dataclass(frozen=True)
class MotifSpec:
    """Channel signature and duration range of one micro-class pulse."""

    micro_class: str
    signature: tuple  # 6 per-channel amplitude weights
    duration_range_s: tuple
    noise_sigma: float = 0.02

    def __post_init__(self):
        if len(self.signature) != 6:
            raise ValueError(f"{self.micro_class}: signature needs 6 channel weights")
        lo, hi = self.duration_range_s
        if not (0.5 <= lo <= hi <= 4.0):
            raise ValueError(f"{self.micro_class}: duration range {self.duration_range_s} outside [0.5, 4] s")
        if not all(np.isfinite(self.signature)):
            raise ValueError(f"{self.micro_class}: non-finite signature")


def default_motifs():
    return {
        "micro_ankle_plantarflexors": MotifSpec(
            "micro_ankle_plantarflexors", (0.0, 0.0, 1.2, 0.5, 0.0, 0.0), (0.8, 1.4)
        ),
        "micro_knee_bends": MotifSpec(
            "micro_knee_bends", (0.0, 0.9, -0.7, 0.0, 0.5, 0.0), (1.4, 2.2)
        ),
        "micro_abdominal_muscles": MotifSpec(
            "micro_abdominal_muscles", (1.0, 0.0, 0.0, 0.0, 0.9, 0.3), (1.8, 3.0)
        ),
        "sit_to_stand": MotifSpec("sit_to_stand", (0.7, 0.3, 1.0, 0.0, 0.0, 0.6), (1.0, 1.8)),
        "stand_to_sit": MotifSpec("stand_to_sit", (-0.7, -0.3, -1.0, 0.0, 0.0, 0.6), (1.0, 1.8)),
    }


@dataclass
class ScenarioSpec:
    """Full description of one synthetic dataset; a deterministic function of
    its fields plus the seed."""

    n_lab_subjects: int = 6
    n_home_subjects: int = 0
    seed: int = 0
    block_order: tuple = ("ankle_plantarflexors", "knee_bends", "abdominal_muscles", "chair_rising")
    # repetitions per exercise block; chair_rising counts sit/stand pairs
    reps: dict = field(
        default_factory=lambda: {
            "ankle_plantarflexors": 13,
            "knee_bends": 10,
            "abdominal_muscles": 6,
            "chair_rising": 5,
        }
    )
    pause_range_s: tuple = (0.5, 1.4)
    background_duration_s: tuple = (14.0, 22.0)
    background_noise_sigma: float = 0.12
    confuser_rate: int = 2  # isolated single repetitions per background block
    amplitude_jitter: float = 0.25  # inter-subject, multiplicative
    duration_jitter: float = 0.15  # inter-subject, multiplicative
    max_block_duration_s: float = 90.0
    motifs: dict = field(default_factory=default_motifs)

    def __post_init__(self):
        for name in self.block_order:
            if name not in BLOCK_MICRO:
                raise ValueError(f"unknown exercise block {name!r}")
            if self.reps.get(name, 0) < 1:
                raise ValueError(f"{name}: reps must be >= 1")
        if self.pause_range_s[0] < 0.05 or self.pause_range_s[0] > self.pause_range_s[1]:
            raise ValueError(f"bad pause range {self.pause_range_s}")
        if self.background_duration_s[0] <= 0 or self.background_duration_s[0] > self.background_duration_s[1]:
            raise ValueError(f"bad background duration range {self.background_duration_s}")
        if self.confuser_rate < 0:
            raise ValueError("confuser_rate must be >= 0")
        # worst-case block length must fit the configured budget
        for name in self.block_order:
            n_pulses = self.reps[name] * len(BLOCK_MICRO[name])
            worst_dur = max(self.motifs[m].duration_range_s[1] for m in BLOCK_MICRO[name])
            worst_dur *= 1.0 + self.duration_jitter
            worst = n_pulses * worst_dur + (n_pulses - 1) * self.pause_range_s[1]
            if worst > self.max_block_duration_s:
                raise ValueError(
                    f"{name}: {n_pulses} repetitions with pauses can reach {worst:.1f} s, "
                    f"over the {self.max_block_duration_s:.1f} s block budget"
                )

    def to_dict(self):
        d = asdict(self)
        d["block_order"] = list(self.block_order)
        d["pause_range_s"] = list(self.pause_range_s)
        d["background_duration_s"] = list(self.background_duration_s)
        d["motifs"] = {
            k: {
                "signature": list(m.signature),
                "duration_range_s": list(m.duration_range_s),
                "noise_sigma": m.noise_sigma,
            }
            for k, m in self.motifs.items()
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "motifs" in d:
            motifs = {}
            for k, m in d["motifs"].items():
                motifs[k] = MotifSpec(
                    k,
                    tuple(m["signature"]),
                    tuple(m["duration_range_s"]),
                    m.get("noise_sigma", 0.02),
                )
            d["motifs"] = motifs
        for key in ("block_order", "pause_range_s", "background_duration_s"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _subject_rng(spec, subject_id):
    digest = hashlib.sha256(subject_id.encode("utf-8")).digest()
    return np.random.default_rng([spec.seed, int.from_bytes(digest[:8], "little")])


def _samples(seconds):
    return max(1, int(round(seconds * SAMPLE_RATE_HZ)))


def generate_recording(spec, subject_id, scenario="lab"):
    """One subject's recording: (Recording, annotation segments, confusers).

    Confusers are (start, end, micro_class) sample intervals whose signal
    carries a single micro pulse while both label tracks stay "others".
    """
    rng = _subject_rng(spec, subject_id)
    amp_factor = 1.0 + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter)
    dur_factor = 1.0 + rng.uniform(-spec.duration_jitter, spec.duration_jitter)

    pulses = []  # (start, n, micro_class, labeled)
    segments = []
    cursor = 0

    def background_block():
        nonlocal cursor
        n = _samples(rng.uniform(*spec.background_duration_s))
        start = cursor
        cursor += n
        margin = SAMPLE_RATE_HZ  # 1 s away from block edges
        placed = []
        for _ in range(spec.confuser_rate):
            cls = str(rng.choice(sorted(spec.motifs)))
            dur = _samples(rng.uniform(*spec.motifs[cls].duration_range_s) * dur_factor)
            lo, hi = start + margin, cursor - margin - dur
            if hi <= lo:
                continue
            for _ in range(8):  # a few placement attempts, then give up
                s = int(rng.integers(lo, hi))
                if all(s + dur + margin <= p or p_end + margin <= s for p, p_end in placed):
                    placed.append((s, s + dur))
                    pulses.append((s, dur, cls, False))
                    break

    def exercise_block(name):
        nonlocal cursor
        micro_cycle = BLOCK_MICRO[name]
        n_pulses = spec.reps[name] * len(micro_cycle)
        start = cursor
        for i in range(n_pulses):
            cls = micro_cycle[i % len(micro_cycle)]
            dur = _samples(rng.uniform(*spec.motifs[cls].duration_range_s) * dur_factor)
            pulses.append((cursor, dur, cls, True))
            segments.append(
                AnnotationSegment("micro", cls, cursor, cursor + dur, subject_id, scenario)
            )
            cursor += dur
            if i < n_pulses - 1:
                cursor += _samples(rng.uniform(*spec.pause_range_s))
        segments.append(AnnotationSegment("macro", name, start, cursor, subject_id, scenario))

    background_block()
    for name in spec.block_order:
        exercise_block(name)
        background_block()

    n_samples = cursor
    imu = rng.standard_normal((6, n_samples)) * spec.background_noise_sigma
    t = np.arange(n_samples) / SAMPLE_RATE_HZ
    for ch in range(6):
        freq = rng.uniform(0.05, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        imu[ch] += 0.3 * spec.background_noise_sigma * np.sin(2 * np.pi * freq * t + phase)

    confusers = []
    for start, dur, cls, labeled in pulses:
        motif = spec.motifs[cls]
        wave = np.sin(np.pi * (np.arange(dur) + 0.5) / dur)
        gain = amp_factor * rng.uniform(0.9, 1.1)
        block = np.outer(np.asarray(motif.signature) * gain, wave)
        if motif.noise_sigma:
            block += rng.standard_normal(block.shape) * motif.noise_sigma
        imu[:, start:start + dur] += block
        if not labeled:
            confusers.append((start, start + dur, cls))

    validate_segments(segments, n_samples)
    micro, macro = tracks_from_segments(segments, n_samples)
    rec = Recording(subject=subject_id, scenario=scenario, imu=imu, micro_track=micro, macro_track=macro)
    return rec, segments, sorted(confusers)


def subject_ids(spec):
    lab = [f"lab{i + 1:02d}" for i in range(spec.n_lab_subjects)]
    home = [f"home{i + 1:02d}" for i in range(spec.n_home_subjects)]
    return [(s, "lab") for s in lab] + [(s, "home") for s in home]


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(spec, out_dir):
    """Write signal/annotation files for every subject plus a manifest with
    file hashes and confuser intervals; returns the manifest dict."""
    ids = subject_ids(spec)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 subjects, got {len(ids)}")
    if len({s for s, _ in ids}) != len(ids):
        raise ValueError("subject ids collide")
    sig_dir = os.path.join(out_dir, "signals")
    ann_dir = os.path.join(out_dir, "annotations")
    os.makedirs(sig_dir, exist_ok=True)
    os.makedirs(ann_dir, exist_ok=True)
    manifest = {"generator": "dstcn-synth", "version": 1, "spec": spec.to_dict(), "subjects": []}
    for subject, scenario in ids:
        rec, segments, confusers = generate_recording(spec, subject, scenario)
        sig_path = os.path.join(sig_dir, f"{subject}.csv")
        ann_path = os.path.join(ann_dir, f"{subject}.jsonl")
        write_signal_csv(sig_path, rec.imu)
        write_annotations(ann_path, segments)
        manifest["subjects"].append(
            {
                "subject": subject,
                "scenario": scenario,
                "n_samples": rec.n_samples,
                "signal_file": os.path.relpath(sig_path, out_dir),
                "annotation_file": os.path.relpath(ann_path, out_dir),
                "signal_sha256": _sha256(sig_path),
                "annotation_sha256": _sha256(ann_path),
                "confusers": [[int(s), int(e), c] for s, e, c in confusers],
            }
        )
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


def load_manifest(dataset_dir):
    with open(os.path.join(dataset_dir, MANIFEST_NAME)) as f:
        return json.load(f)


def dataset_metas(manifest):
    return [
        RecordingMeta(entry["subject"], entry["subject"], entry["scenario"])
        for entry in manifest["subjects"]
    ]


def load_dataset(dataset_dir):
    """Load every recording listed in a dataset manifest, keyed by subject."""
    from .data import load_recording

    manifest = load_manifest(dataset_dir)
    recordings = {}
    for entry in manifest["subjects"]:
        rec = load_recording(
            os.path.join(dataset_dir, entry["signal_file"]),
            os.path.join(dataset_dir, entry["annotation_file"]),
            subject=entry["subject"],
            scenario=entry["scenario"],
        )
        recordings[entry["subject"]] = rec
    return recordings, manifest
