"""Dataset ingestion (Daphnet Gait, WISDM, SBHAR), normalization, splitting,
windowing, and a synthetic activity-stream generator for desk-scale runs.

Labels are integer class ids >= 0; two reserved codes mark transition and
unknown frames. All loaders isolate the on-disk quirks of the public releases
here so nothing above this module sees raw file formats.
"""

from __future__ import annotations

import glob
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TRANSITION = -1  # blurred period between two activities; contains the boundary
UNKNOWN = -2  # activity outside the set of interest


class DataFormatError(ValueError):
    """A dataset file failed to parse; message carries file and line."""


@dataclass
class SensorStream:
    """A multichannel time series with per-frame labels and a sampling rate."""

    frames: np.ndarray  # [channels, T]
    labels: np.ndarray  # [T], class ids plus TRANSITION / UNKNOWN
    rate_hz: float
    subject_id: str = ""
    stream_id: str = ""
    class_names: dict[int, str] | None = None
    boundary_centers: np.ndarray | None = None  # frame coordinates, may be fractional

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be [channels, T], got shape {self.frames.shape}")
        if self.labels.shape != (self.frames.shape[1],):
            raise ValueError(
                f"labels length {self.labels.shape} does not match {self.frames.shape[1]} frames"
            )
        if not self.rate_hz > 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        if self.boundary_centers is not None:
            self.boundary_centers = np.asarray(self.boundary_centers, dtype=np.float64)

    @property
    def n_channels(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


@dataclass
class DatasetDescriptor:
    name: str
    channels: int
    rate_hz: float
    class_names: dict[int, str]
    split_rule: str


DATASETS = {
    "dg": DatasetDescriptor(
        name="dg",
        channels=9,
        rate_hz=64.0,
        class_names={0: "no_freeze", 1: "fog"},
        split_rule="subject 9 validation, subject 2 test, rest training",
    ),
    "wisdm": DatasetDescriptor(
        name="wisdm",
        channels=3,
        rate_hz=20.0,
        class_names={
            0: "walking", 1: "jogging", 2: "upstairs",
            3: "downstairs", 4: "sitting", 5: "standing",
        },
        split_rule="70/10/20 by subject, seed-fixed permutation",
    ),
    "sbhar": DatasetDescriptor(
        name="sbhar",
        channels=6,
        rate_hz=50.0,
        class_names={
            0: "walking", 1: "walking_upstairs", 2: "walking_downstairs",
            3: "sitting", 4: "standing", 5: "laying",
        },
        split_rule="70/10/20 by subject, seed-fixed permutation",
    ),
}


# ---------------------------------------------------------------------------
# loaders


def load_dataset(name: str, path, on_malformed: str = "error") -> list[SensorStream]:
    """Load one of the supported datasets into canonical streams.

    `on_malformed` is "error" (default) or "skip"; the public WISDM release
    contains a handful of truncated rows.
    """
    if on_malformed not in ("error", "skip"):
        raise ValueError(f"on_malformed must be 'error' or 'skip', got {on_malformed!r}")
    name = name.lower()
    if name == "dg":
        return _load_dg(path)
    if name == "wisdm":
        return _load_wisdm(path, on_malformed)
    if name == "sbhar":
        return _load_sbhar(path, on_malformed)
    raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(DATASETS)}")


def _load_dg(path) -> list[SensorStream]:
    # Daphnet layout: S<subject>R<run>.txt, space separated:
    # time_ms, 9 acceleration channels, annotation in {0: out of experiment,
    # 1: no freeze, 2: freeze}
    pattern = os.path.join(str(path), "**", "S??R??.txt")
    files = sorted(glob.glob(pattern, recursive=True))
    if not files:
        raise FileNotFoundError(f"no Daphnet files matching S??R??.txt under {path}")
    desc = DATASETS["dg"]
    streams = []
    for fname in files:
        rows = []
        with open(fname) as f:
            for lineno, line in enumerate(f, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 11:
                    raise DataFormatError(f"{fname}:{lineno}: expected 11 columns, got {len(parts)}")
                try:
                    rows.append([float(v) for v in parts])
                except ValueError as e:
                    raise DataFormatError(f"{fname}:{lineno}: {e}") from None
        arr = np.asarray(rows)
        ann = arr[:, 10].astype(np.int64)
        bad = set(np.unique(ann)) - {0, 1, 2}
        if bad:
            raise DataFormatError(f"{fname}: unknown annotation values {sorted(bad)}")
        labels = np.where(ann == 0, UNKNOWN, ann - 1)
        stem = os.path.splitext(os.path.basename(fname))[0]
        streams.append(SensorStream(
            frames=arr[:, 1:10].T,
            labels=labels,
            rate_hz=desc.rate_hz,
            subject_id=str(int(stem[1:3])),
            stream_id=stem,
            class_names=dict(desc.class_names),
        ))
    return streams


_WISDM_ACTIVITIES = {
    "Walking": 0, "Jogging": 1, "Upstairs": 2,
    "Downstairs": 3, "Sitting": 4, "Standing": 5,
}


def _load_wisdm(path, on_malformed: str) -> list[SensorStream]:
    # One file of semicolon-terminated records: user,activity,timestamp,x,y,z;
    fname = str(path)
    if os.path.isdir(fname):
        fname = os.path.join(fname, "WISDM_ar_v1.1_raw.txt")
    if not os.path.exists(fname):
        raise FileNotFoundError(f"WISDM raw file not found: {fname}")
    per_user: dict[int, list[tuple[int, float, float, float]]] = {}
    with open(fname) as f:
        for lineno, line in enumerate(f, start=1):
            for rec in line.strip().split(";"):
                rec = rec.strip().rstrip(",")
                if not rec:
                    continue
                parts = rec.split(",")
                try:
                    if len(parts) != 6:
                        raise ValueError(f"expected 6 fields, got {len(parts)}")
                    user = int(parts[0])
                    if parts[1] not in _WISDM_ACTIVITIES:
                        raise DataFormatError(f"{fname}:{lineno}: unknown activity {parts[1]!r}")
                    act = _WISDM_ACTIVITIES[parts[1]]
                    x, y, z = float(parts[3]), float(parts[4]), float(parts[5])
                except DataFormatError:
                    raise
                except ValueError as e:
                    if on_malformed == "skip":
                        continue
                    raise DataFormatError(f"{fname}:{lineno}: {e}") from None
                per_user.setdefault(user, []).append((act, x, y, z))
    desc = DATASETS["wisdm"]
    streams = []
    for user in sorted(per_user):
        rows = per_user[user]
        arr = np.asarray([(x, y, z) for _, x, y, z in rows])
        labels = np.asarray([a for a, _, _, _ in rows], dtype=np.int64)
        streams.append(SensorStream(
            frames=arr.T,
            labels=labels,
            rate_hz=desc.rate_hz,
            subject_id=str(user),
            stream_id=f"wisdm_user{user:02d}",
            class_names=dict(desc.class_names),
        ))
    return streams


def _load_sbhar(path, on_malformed: str) -> list[SensorStream]:
    # SBHAR/HAPT raw layout: RawData/acc_expNN_userNN.txt + gyro_... (3 float
    # columns each) plus labels.txt rows: exp user activity start end, with
    # 0-based inclusive frame spans. Activities 1-6 are basic, 7-12 are
    # postural transitions; unlabeled frames are unknown.
    root = str(path)
    raw = os.path.join(root, "RawData")
    if not os.path.isdir(raw):
        raw = root
    label_file = os.path.join(raw, "labels.txt")
    if not os.path.exists(label_file):
        raise FileNotFoundError(f"SBHAR labels.txt not found under {raw}")
    spans: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    with open(label_file) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise DataFormatError(f"{label_file}:{lineno}: expected 5 columns, got {len(parts)}")
            exp, user, act, start, end = (int(v) for v in parts)
            if not 1 <= act <= 12:
                raise DataFormatError(f"{label_file}:{lineno}: unknown activity id {act}")
            spans.setdefault((exp, user), []).append((act, start, end))
    acc_files = sorted(glob.glob(os.path.join(raw, "acc_exp??_user??.txt")))
    if not acc_files:
        raise FileNotFoundError(f"no acc_expNN_userNN.txt files under {raw}")
    desc = DATASETS["sbhar"]
    streams = []
    for acc_name in acc_files:
        base = os.path.basename(acc_name)
        exp = int(base[7:9])
        user = int(base[14:16])
        gyro_name = os.path.join(raw, "gyro" + base[3:])
        if not os.path.exists(gyro_name):
            raise FileNotFoundError(f"missing gyro file for {base}")
        acc = _load_float_table(acc_name, 3, on_malformed)
        gyro = _load_float_table(gyro_name, 3, on_malformed)
        if acc.shape[0] != gyro.shape[0]:
            raise DataFormatError(f"{base}: acc has {acc.shape[0]} rows, gyro {gyro.shape[0]}")
        n = acc.shape[0]
        labels = np.full(n, UNKNOWN, dtype=np.int64)
        for act, start, end in spans.get((exp, user), []):
            if not 0 <= start <= end < n:
                raise DataFormatError(f"{label_file}: span {start}..{end} outside {base} ({n} rows)")
            labels[start : end + 1] = act - 1 if act <= 6 else TRANSITION
        streams.append(SensorStream(
            frames=np.concatenate([acc, gyro], axis=1).T,
            labels=labels,
            rate_hz=desc.rate_hz,
            subject_id=str(user),
            stream_id=f"exp{exp:02d}_user{user:02d}",
            class_names=dict(desc.class_names),
        ))
    return streams


def _load_float_table(fname: str, ncols: int, on_malformed: str) -> np.ndarray:
    rows = []
    with open(fname) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                if len(parts) != ncols:
                    raise ValueError(f"expected {ncols} columns, got {len(parts)}")
                rows.append([float(v) for v in parts])
            except ValueError as e:
                if on_malformed == "skip":
                    continue
                raise DataFormatError(f"{fname}:{lineno}: {e}") from None
    return np.asarray(rows)


def split_streams(name: str, streams: Sequence[SensorStream], seed: int = 0) -> dict[str, list[SensorStream]]:
    """Partition streams into subject-disjoint train/val/test splits.

    DG uses the fixed rule (subject 9 validation, subject 2 test); the other
    datasets get a seed-fixed 70/10/20 split over subject ids.
    """
    name = name.lower()
    if name == "dg":
        out = {"train": [], "val": [], "test": []}
        for s in streams:
            if s.subject_id == "9":
                out["val"].append(s)
            elif s.subject_id == "2":
                out["test"].append(s)
            else:
                out["train"].append(s)
        return out
    subjects = sorted({s.subject_id for s in streams})
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    n = len(subjects)
    n_test = max(1, round(0.2 * n)) if n > 2 else 0
    n_val = max(1, round(0.1 * n)) if n > 1 else 0
    test_ids = set(shuffled[:n_test])
    val_ids = set(shuffled[n_test : n_test + n_val])
    out = {"train": [], "val": [], "test": []}
    for s in streams:
        if s.subject_id in test_ids:
            out["test"].append(s)
        elif s.subject_id in val_ids:
            out["val"].append(s)
        else:
            out["train"].append(s)
    return out


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    mean: np.ndarray  # [channels]
    std: np.ndarray  # [channels]


def compute_norm_stats(streams: Sequence[SensorStream]) -> NormStats:
    """Per-channel mean/std pooled over the given (training) streams."""
    if not streams:
        raise ValueError("compute_norm_stats: no streams")
    pooled = np.concatenate([s.frames for s in streams], axis=1)
    mean = pooled.mean(axis=1)
    std = pooled.std(axis=1)
    for c, v in enumerate(std):
        if v < 1e-12:
            raise ValueError(f"channel {c} has zero variance; cannot normalize")
    return NormStats(mean=mean, std=std)


def normalize(stream: SensorStream, stats: NormStats) -> SensorStream:
    """Z-score each channel with training-split statistics."""
    for c, v in enumerate(stats.std):
        if v < 1e-12:
            raise ValueError(f"channel {c} has zero variance; cannot normalize")
    frames = (stream.frames - stats.mean[:, None]) / stats.std[:, None]
    return SensorStream(
        frames=frames,
        labels=stream.labels.copy(),
        rate_hz=stream.rate_hz,
        subject_id=stream.subject_id,
        stream_id=stream.stream_id,
        class_names=dict(stream.class_names) if stream.class_names else None,
        boundary_centers=None if stream.boundary_centers is None else stream.boundary_centers.copy(),
    )


# ---------------------------------------------------------------------------
# synthetic streams


@dataclass
class SynthClass:
    name: str
    kind: str  # "sine" | "square" | "noise"
    freq_hz: float = 1.0
    amp: float = 1.0
    sigma: float = 1.0


@dataclass
class SynthSpec:
    classes: list[SynthClass]
    segments: list[tuple[int, int]]  # (class index, duration in frames)
    ramp: int  # cross-fade length in frames, labeled TRANSITION
    channels: int = 3
    rate_hz: float = 50.0
    noise: float = 0.05  # additive sensor noise on every frame

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ValueError("synthetic spec needs at least 2 activity classes")
        for c in self.classes:
            if c.kind not in ("sine", "square", "noise"):
                raise ValueError(f"unknown generator kind {c.kind!r} for class {c.name!r}")
        if not self.segments:
            raise ValueError("synthetic spec needs at least one segment")
        for ci, dur in self.segments:
            if not 0 <= ci < len(self.classes):
                raise ValueError(f"segment class index {ci} out of range")
            if dur < 1:
                raise ValueError(f"segment duration must be positive, got {dur}")
        if self.ramp < 1:
            raise ValueError("transition ramp must be at least 1 frame")
        if self.channels < 1:
            raise ValueError("need at least one channel")


def _gen_class_signal(cls: SynthClass, t_idx: np.ndarray, channels: int,
                      rate_hz: float, rng: np.random.Generator) -> np.ndarray:
    if cls.kind == "noise":
        return rng.normal(0.0, cls.sigma, size=(channels, t_idx.size))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=channels)
    arg = 2.0 * np.pi * cls.freq_hz * t_idx[None, :] / rate_hz + phases[:, None]
    wave = np.sin(arg)
    if cls.kind == "square":
        wave = np.sign(wave)
    return cls.amp * wave


def synth_stream(spec: SynthSpec, rng: np.random.Generator, stream_id: str = "synth") -> SensorStream:
    """Concatenate per-class generated segments with linear cross-fade
    transitions labeled TRANSITION; boundary centers sit at ramp midpoints."""
    spec.validate()
    n_seg = len(spec.segments)
    durs = [d for _, d in spec.segments]
    total = sum(durs) + spec.ramp * (n_seg - 1)
    frames = np.zeros((spec.channels, total))
    labels = np.empty(total, dtype=np.int64)
    centers = []

    # each segment is generated once over its pure block plus adjacent ramps,
    # so the cross-fade blends phase-continuous extensions
    starts = []
    pos = 0
    for dur in durs:
        starts.append(pos)
        pos += dur + spec.ramp
    signals = []
    for i, (ci, dur) in enumerate(spec.segments):
        lo = starts[i] - (spec.ramp if i > 0 else 0)
        hi = starts[i] + dur + (spec.ramp if i < n_seg - 1 else 0)
        signals.append((lo, _gen_class_signal(spec.classes[ci], np.arange(lo, hi),
                                              spec.channels, spec.rate_hz, rng)))
    for i, (ci, dur) in enumerate(spec.segments):
        s = starts[i]
        lo, sig = signals[i]
        frames[:, s : s + dur] = sig[:, s - lo : s - lo + dur]
        labels[s : s + dur] = ci
        if i < n_seg - 1:
            ts = s + dur
            lo_next, sig_next = signals[i + 1]
            tail = sig[:, ts - lo : ts - lo + spec.ramp]
            head = sig_next[:, ts - lo_next : ts - lo_next + spec.ramp]
            w = (np.arange(spec.ramp) + 0.5) / spec.ramp
            frames[:, ts : ts + spec.ramp] = (1.0 - w) * tail + w * head
            labels[ts : ts + spec.ramp] = TRANSITION
            centers.append(ts + (spec.ramp - 1) / 2.0)
    if spec.noise > 0:
        frames += rng.normal(0.0, spec.noise, size=frames.shape)
    return SensorStream(
        frames=frames,
        labels=labels,
        rate_hz=spec.rate_hz,
        subject_id="synthetic",
        stream_id=stream_id,
        class_names={i: c.name for i, c in enumerate(spec.classes)},
        boundary_centers=np.asarray(centers),
    )


def boundary_centers_from_labels(labels: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive activity runs (through any T/U gap)."""
    labels = np.asarray(labels)
    runs = label_runs(labels)
    centers = []
    prev_end = None
    prev_label = None
    for value, start, end in runs:
        if value < 0:
            continue
        if prev_end is not None and (start > prev_end + 1 or value != prev_label):
            centers.append((prev_end + start) / 2.0)
        prev_end = end
        prev_label = value
    return np.asarray(centers)


def true_boundary_centers(stream: SensorStream) -> np.ndarray:
    if stream.boundary_centers is not None:
        return stream.boundary_centers
    return boundary_centers_from_labels(stream.labels)


def label_runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """Run-length encode a label sequence into (value, start, end) triples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [labels.size - 1]])
    return [(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


# ---------------------------------------------------------------------------
# segment slicing


@dataclass
class SegmentSlices:
    windows: list[np.ndarray]  # each [channels, length]
    spans: list[tuple[int, int]]  # inclusive frame spans
    dropped: int  # spans shorter than the requested minimum


def _region_span(region) -> tuple[int, int]:
    if hasattr(region, "start_frame"):
        return int(region.start_frame), int(region.end_frame)
    start, end = region
    return int(start), int(end)


def slice_segments(stream: SensorStream, boundaries, min_len: int = 1) -> SegmentSlices:
    """Cut the stream into the spans between boundary regions.

    Spans shorter than `min_len` are dropped and counted. With no boundaries
    the whole stream is one segment.
    """
    spans_in = [_region_span(b) for b in boundaries]
    for (s0, e0), (s1, _) in zip(spans_in, spans_in[1:]):
        if s1 <= e0:
            raise ValueError("boundary regions must be sorted and disjoint")
    windows = []
    spans = []
    dropped = 0
    cursor = 0
    edges = spans_in + [(stream.n_frames, stream.n_frames)]
    for start, end in edges:
        seg_start, seg_end = cursor, start - 1
        cursor = end + 1
        if seg_end < seg_start:
            continue
        if seg_end - seg_start + 1 < min_len:
            dropped += 1
            continue
        windows.append(stream.frames[:, seg_start : seg_end + 1].copy())
        spans.append((seg_start, seg_end))
    return SegmentSlices(windows=windows, spans=spans, dropped=dropped)


# ---------------------------------------------------------------------------
# canonical stream cache


def save_streams(streams: Sequence[SensorStream], out_dir) -> None:
    """Write streams as a JSON manifest plus raw little-endian binaries."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for s in streams:
        frames_file = f"{s.stream_id}.frames.bin"
        labels_file = f"{s.stream_id}.labels.bin"
        with open(os.path.join(out_dir, frames_file), "wb") as f:
            f.write(np.ascontiguousarray(s.frames, dtype="<f8").tobytes())
        with open(os.path.join(out_dir, labels_file), "wb") as f:
            f.write(np.ascontiguousarray(s.labels, dtype="<i8").tobytes())
        entries.append({
            "stream_id": s.stream_id,
            "subject_id": s.subject_id,
            "channels": s.n_channels,
            "n_frames": s.n_frames,
            "rate_hz": s.rate_hz,
            "class_names": {str(k): v for k, v in (s.class_names or {}).items()},
            "boundary_centers": None if s.boundary_centers is None else [float(c) for c in s.boundary_centers],
            "frames_file": frames_file,
            "labels_file": labels_file,
        })
    with open(os.path.join(out_dir, "streams.json"), "w") as f:
        json.dump({"format": 1, "streams": entries}, f, indent=1)


def load_streams(in_dir) -> list[SensorStream]:
    manifest_path = os.path.join(in_dir, "streams.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"stream cache manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    streams = []
    for e in manifest["streams"]:
        n = e["channels"] * e["n_frames"]
        with open(os.path.join(in_dir, e["frames_file"]), "rb") as f:
            frames = np.frombuffer(f.read(), dtype="<f8", count=n)
        with open(os.path.join(in_dir, e["labels_file"]), "rb") as f:
            labels = np.frombuffer(f.read(), dtype="<i8", count=e["n_frames"])
        streams.append(SensorStream(
            frames=frames.reshape(e["channels"], e["n_frames"]).copy(),
            labels=labels.copy(),
            rate_hz=e["rate_hz"],
            subject_id=e["subject_id"],
            stream_id=e["stream_id"],
            class_names={int(k): v for k, v in e["class_names"].items()} or None,
            boundary_centers=e["boundary_centers"],
        ))
    return streams
