"""Recordings, annotations, validation, slicing and cross-validation folds.

File formats
------------
Signal: CSV with header ``sample,ax,ay,az,gx,gy,gz``, one row per sample at
100 Hz (accelerometer x/y/z then gyroscope x/y/z), decimal-point floats.

Annotation: JSON lines, one segment per line with keys ``scale`` (micro |
macro), ``class_name``, ``start_sample``, ``end_sample_exclusive``,
``subject``, ``scenario`` (lab | home); sorted by start. Unannotated samples
are class 0 ("others"), so an empty file is a valid all-background recording.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE_HZ = 100
SLICE_LEN = 4000  # 40 s at 100 Hz
SLICE_HOP = 2000  # 50 % overlap

SIGNAL_HEADER = "sample,ax,ay,az,gx,gy,gz"


class ValidationError(ValueError):
    """A recording or annotation file violates the label contract."""


@dataclass(frozen=True)
class ClassCatalog:
    scale: str
    names: tuple

    def __post_init__(self):
        if self.names[0] != "others":
            raise ValueError("class id 0 must be 'others'")

    def __len__(self):
        return len(self.names)

    def id_of(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown {self.scale} class {name!r}") from None


MACRO_CATALOG = ClassCatalog(
    "macro",
    ("others", "ankle_plantarflexors", "knee_bends", "abdominal_muscles", "chair_rising"),
)

MICRO_CATALOG = ClassCatalog(
    "micro",
    (
        "others",
        "micro_ankle_plantarflexors",
        "micro_knee_bends",
        "micro_abdominal_muscles",
        "sit_to_stand",
        "stand_to_sit",
    ),
)

# both chair transfers belong to the chair_rising macro class
MICRO_TO_MACRO = {0: 0, 1: 1, 2: 2, 3: 3, 4: 4, 5: 4}


@dataclass(frozen=True)
class AnnotationSegment:
    """One annotated run: [start, end) samples of a single class."""

    scale: str
    class_name: str
    start: int
    end: int
    subject: str = ""
    scenario: str = "lab"

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise ValidationError(f"segment [{self.start}, {self.end}) is empty or negative")


@dataclass
class Recording:
    subject: str
    scenario: str
    imu: np.ndarray  # (6, T) float64
    micro_track: np.ndarray  # (T,) int
    macro_track: np.ndarray  # (T,) int
    sample_rate: int = SAMPLE_RATE_HZ

    @property
    def n_samples(self):
        return self.imu.shape[1]


def validate_segments(segments, n_samples):
    """Enforce the dual-scale label contract on annotation segments.

    Same-scale segments must not overlap; every micro segment must lie inside
    a macro segment of the corresponding class; same-class micro segments
    inside one macro segment need at least one unlabeled sample between them.
    """
    for seg in segments:
        catalog = MICRO_CATALOG if seg.scale == "micro" else MACRO_CATALOG
        if seg.scale not in ("micro", "macro"):
            raise ValidationError(f"segment [{seg.start}, {seg.end}): unknown scale {seg.scale!r}")
        if seg.class_name == "others":
            raise ValidationError(
                f"segment [{seg.start}, {seg.end}): 'others' is implicit and must not be annotated"
            )
        catalog.id_of(seg.class_name)  # raises KeyError for unknown names
        if seg.end > n_samples:
            raise ValidationError(
                f"{seg.scale} segment [{seg.start}, {seg.end}) exceeds recording length {n_samples}"
            )
    for scale in ("micro", "macro"):
        scoped = sorted((s for s in segments if s.scale == scale), key=lambda s: s.start)
        for a, b in zip(scoped, scoped[1:]):
            if b.start < a.end:
                raise ValidationError(
                    f"overlapping {scale} segments [{a.start}, {a.end}) and [{b.start}, {b.end})"
                )
    micros = sorted((s for s in segments if s.scale == "micro"), key=lambda s: s.start)
    macros = sorted((s for s in segments if s.scale == "macro"), key=lambda s: s.start)
    for m in micros:
        mid = MICRO_CATALOG.id_of(m.class_name)
        want_macro = MICRO_TO_MACRO[mid]
        host = next((g for g in macros if g.start <= m.start and m.end <= g.end), None)
        if host is None:
            raise ValidationError(
                f"micro segment {m.class_name} [{m.start}, {m.end}) lies outside every macro segment"
            )
        if MACRO_CATALOG.id_of(host.class_name) != want_macro:
            raise ValidationError(
                f"micro segment {m.class_name} [{m.start}, {m.end}) is nested in macro "
                f"{host.class_name} [{host.start}, {host.end}), expected {MACRO_CATALOG.names[want_macro]}"
            )
    for a, b in zip(micros, micros[1:]):
        if a.class_name == b.class_name and b.start < a.end + 1:
            raise ValidationError(
                f"micro segments of class {a.class_name} at [{a.start}, {a.end}) and "
                f"[{b.start}, {b.end}) are not separated by an unlabeled sample"
            )
    return segments


def tracks_from_segments(segments, n_samples):
    """Expand validated segments into per-sample micro/macro id tracks."""
    micro = np.zeros(n_samples, dtype=np.int64)
    macro = np.zeros(n_samples, dtype=np.int64)
    for seg in segments:
        if seg.scale == "micro":
            micro[seg.start:seg.end] = MICRO_CATALOG.id_of(seg.class_name)
        else:
            macro[seg.start:seg.end] = MACRO_CATALOG.id_of(seg.class_name)
    return micro, macro


def write_signal_csv(path, imu):
    imu = np.asarray(imu, dtype=np.float64)
    if imu.ndim != 2 or imu.shape[0] != 6:
        raise ValueError(f"signal must be (6, T), got {imu.shape}")
    rows = np.column_stack([np.arange(imu.shape[1], dtype=np.float64), imu.T])
    fmt = ["%d"] + ["%.6f"] * 6
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=SIGNAL_HEADER, comments="")


def read_signal_csv(path):
    with open(path) as f:
        header = f.readline().strip()
    if header != SIGNAL_HEADER:
        raise ValidationError(f"{path}: bad signal header {header!r}, expected {SIGNAL_HEADER!r}")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != 7:
        raise ValidationError(f"{path}: expected 7 columns, got {rows.shape[1]}")
    if not np.array_equal(rows[:, 0], np.arange(rows.shape[0])):
        raise ValidationError(f"{path}: sample index column is not 0..T-1")
    return np.ascontiguousarray(rows[:, 1:].T)


def write_annotations(path, segments):
    ordered = sorted(segments, key=lambda s: (s.start, s.scale, s.class_name))
    with open(path, "w") as f:
        for seg in ordered:
            f.write(
                json.dumps(
                    {
                        "scale": seg.scale,
                        "class_name": seg.class_name,
                        "start_sample": seg.start,
                        "end_sample_exclusive": seg.end,
                        "subject": seg.subject,
                        "scenario": seg.scenario,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_annotations(path):
    segments = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                segments.append(
                    AnnotationSegment(
                        scale=rec["scale"],
                        class_name=rec["class_name"],
                        start=int(rec["start_sample"]),
                        end=int(rec["end_sample_exclusive"]),
                        subject=rec.get("subject", ""),
                        scenario=rec.get("scenario", "lab"),
                    )
                )
            except (KeyError, ValueError, TypeError) as e:
                raise ValidationError(f"{path}:{line_no}: bad annotation record: {e}") from e
    return segments


def load_recording(signal_path, annotation_path, subject=None, scenario=None):
    """Read, validate and expand one recording."""
    imu = read_signal_csv(signal_path)
    segments = read_annotations(annotation_path)
    validate_segments(segments, imu.shape[1])
    subjects = {s.subject for s in segments if s.subject}
    scenarios = {s.scenario for s in segments}
    if len(subjects) > 1:
        raise ValidationError(f"{annotation_path}: segments name several subjects {sorted(subjects)}")
    if len(scenarios) > 1:
        raise ValidationError(f"{annotation_path}: segments name several scenarios {sorted(scenarios)}")
    if subject is None:
        subject = subjects.pop() if subjects else str(annotation_path).rsplit("/", 1)[-1].split(".")[0]
    if scenario is None:
        scenario = scenarios.pop() if scenarios else "lab"
    if scenario not in ("lab", "home"):
        raise ValidationError(f"{annotation_path}: unknown scenario {scenario!r}")
    micro, macro = tracks_from_segments(segments, imu.shape[1])
    return Recording(subject=subject, scenario=scenario, imu=imu, micro_track=micro, macro_track=macro)


@dataclass
class Slice:
    start: int
    imu: np.ndarray  # (6, SLICE_LEN)
    micro: np.ndarray  # (SLICE_LEN,)
    macro: np.ndarray  # (SLICE_LEN,)
    mask: np.ndarray  # (SLICE_LEN,) bool, False only on a zero-padded tail


@dataclass
class SliceSet:
    recording_subject: str
    n_samples: int
    slices: list


def slice_recording(rec):
    """Cut into 40 s windows with 50 % overlap; the final short window is
    zero-padded and its padding masked out."""
    t = rec.n_samples
    if t < 1:
        raise ValueError("recording is empty")
    starts = [0]
    while starts[-1] + SLICE_LEN < t:
        starts.append(starts[-1] + SLICE_HOP)
    slices = []
    for start in starts:
        stop = min(start + SLICE_LEN, t)
        n = stop - start
        imu = np.zeros((6, SLICE_LEN))
        micro = np.zeros(SLICE_LEN, dtype=np.int64)
        macro = np.zeros(SLICE_LEN, dtype=np.int64)
        mask = np.zeros(SLICE_LEN, dtype=bool)
        imu[:, :n] = rec.imu[:, start:stop]
        micro[:n] = rec.micro_track[start:stop]
        macro[:n] = rec.macro_track[start:stop]
        mask[:n] = True
        slices.append(Slice(start, imu, micro, macro, mask))
    return SliceSet(rec.subject, t, slices)


def one_hot(track, catalog):
    track = np.asarray(track)
    if track.min(initial=0) < 0 or track.max(initial=0) >= len(catalog):
        raise ValueError(f"track contains ids outside the {catalog.scale} catalog")
    out = np.zeros((len(catalog), track.shape[0]))
    out[track, np.arange(track.shape[0])] = 1.0
    return out


@dataclass(frozen=True)
class RecordingMeta:
    recording_id: str
    subject: str
    scenario: str


@dataclass(frozen=True)
class Fold:
    test_subject: str
    test_recordings: tuple
    train_recordings: tuple


@dataclass(frozen=True)
class FoldPlan:
    protocol: str
    folds: tuple


def build_folds(metas, protocol):
    """Leave-one-subject-out folds.

    lab_losocv: one fold per lab subject, training on the other lab subjects.
    home_generalization: one fold per home subject, training on every lab
    recording plus the other home subjects.
    """
    ids = [m.recording_id for m in metas]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate recording ids in dataset")
    by_subject = {}
    for m in metas:
        by_subject.setdefault(m.subject, []).append(m)
    for subject, ms in by_subject.items():
        if len({m.scenario for m in ms}) > 1:
            raise ValueError(f"subject {subject} appears in both lab and home pools")
    lab = sorted((m for m in metas if m.scenario == "lab"), key=lambda m: m.recording_id)
    home = sorted((m for m in metas if m.scenario == "home"), key=lambda m: m.recording_id)
    folds = []
    if protocol == "lab_losocv":
        subjects = sorted({m.subject for m in lab})
        if len(subjects) < 2:
            raise ValueError(f"lab_losocv needs at least 2 lab subjects, got {len(subjects)}")
        for subject in subjects:
            test = tuple(m.recording_id for m in lab if m.subject == subject)
            train = tuple(m.recording_id for m in lab if m.subject != subject)
            folds.append(Fold(subject, test, train))
    elif protocol == "home_generalization":
        subjects = sorted({m.subject for m in home})
        if not subjects:
            raise ValueError("home_generalization needs at least 1 home subject")
        if len(subjects) + len({m.subject for m in lab}) < 2:
            raise ValueError("home_generalization needs at least 2 subjects in total")
        for subject in subjects:
            test = tuple(m.recording_id for m in home if m.subject == subject)
            train = tuple(m.recording_id for m in lab) + tuple(
                m.recording_id for m in home if m.subject != subject
            )
            folds.append(Fold(subject, test, train))
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return FoldPlan(protocol, tuple(folds))
