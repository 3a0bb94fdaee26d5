"""Run metrics: many-to-one mapped accuracy, weighted F1, and the end-to-end
pipeline report (detect boundaries, slice, embed, cluster, score).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import data as dat
from .clustering import pairwise_distances, single_linkage
from .recognition import RecognitionModel, embed_segments
from .segmentation import SegmentationModel, assess_segmentation, detect_boundaries


def majority_mapping(cluster_labels, true_labels) -> dict:
    """Map each cluster id to its most frequent true label (ties: smallest)."""
    cluster_labels = np.asarray(cluster_labels)
    true_labels = np.asarray(true_labels)
    mapping = {}
    for c in np.unique(cluster_labels):
        members = true_labels[cluster_labels == c]
        values, counts = np.unique(members, return_counts=True)
        mapping[int(c)] = int(values[np.argmax(counts)])  # unique() sorts, argmax takes first
    return mapping


def many_to_one_accuracy(cluster_labels, true_labels) -> float:
    """Relabel each cluster with its majority true label, then plain accuracy."""
    cluster_labels = np.asarray(cluster_labels)
    true_labels = np.asarray(true_labels)
    if cluster_labels.shape != true_labels.shape or cluster_labels.size == 0:
        raise ValueError("label sequences must be equal length and non-empty")
    mapping = majority_mapping(cluster_labels, true_labels)
    mapped = np.asarray([mapping[int(c)] for c in cluster_labels])
    return float(np.mean(mapped == true_labels))


@dataclass
class ConfusionCounts:
    """Per-class true/false positive and false negative counts."""

    classes: list
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n_i: np.ndarray  # class sizes in the ground truth
    n_total: int

    @classmethod
    def from_labels(cls, pred_labels, true_labels) -> "ConfusionCounts":
        pred = np.asarray(pred_labels)
        true = np.asarray(true_labels)
        if pred.shape != true.shape or pred.size == 0:
            raise ValueError("label sequences must be equal length and non-empty")
        classes = sorted(set(true.tolist()) | set(pred.tolist()))
        tp = np.zeros(len(classes), dtype=np.int64)
        fp = np.zeros(len(classes), dtype=np.int64)
        fn = np.zeros(len(classes), dtype=np.int64)
        n_i = np.zeros(len(classes), dtype=np.int64)
        for idx, c in enumerate(classes):
            tp[idx] = int(np.sum((pred == c) & (true == c)))
            fp[idx] = int(np.sum((pred == c) & (true != c)))
            fn[idx] = int(np.sum((pred != c) & (true == c)))
            n_i[idx] = int(np.sum(true == c))
        return cls(classes=classes, tp=tp, fp=fp, fn=fn, n_i=n_i, n_total=int(true.size))


def weighted_f1(pred_labels, true_labels) -> float:
    """F_w = 2 * sum_i (N_i/N_total) * P_i*R_i/(P_i+R_i); a class with
    P_i + R_i = 0 contributes nothing."""
    counts = ConfusionCounts.from_labels(pred_labels, true_labels)
    total = 0.0
    for idx in range(len(counts.classes)):
        tp, fp, fn = counts.tp[idx], counts.fp[idx], counts.fn[idx]
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        if precision + recall == 0:
            continue
        weight = counts.n_i[idx] / counts.n_total
        total += 2.0 * weight * (precision * recall) / (precision + recall)
    return float(total)


def confusion_table(pred_labels, true_labels) -> tuple[list, np.ndarray]:
    """(classes, matrix) with matrix[t, p] counting truth t predicted as p."""
    counts = ConfusionCounts.from_labels(pred_labels, true_labels)
    index = {c: i for i, c in enumerate(counts.classes)}
    m = np.zeros((len(counts.classes), len(counts.classes)), dtype=np.int64)
    for p, t in zip(np.asarray(pred_labels), np.asarray(true_labels)):
        m[index[t], index[p]] += 1
    return counts.classes, m


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineOptions:
    threshold: float = 0.5
    l_h: int = 128
    l_f: int = 128
    stride: int = 4
    n_clusters: int | None = None  # default: number of activity kinds in truth


def _symbol(label: int, class_names: dict[int, str] | None) -> str:
    if label == dat.TRANSITION:
        return "T"
    if label == dat.UNKNOWN:
        return "U"
    if class_names and label in class_names:
        return class_names[label]
    return str(label)


def evaluate_pipeline(stream: dat.SensorStream, seg_model: SegmentationModel,
                      rec_model: RecognitionModel,
                      options: PipelineOptions | None = None) -> dict:
    """Detect boundaries, slice, embed, cluster, and score one stream.

    Frame-level metrics cover frames whose truth is an activity (transition
    and unknown frames are excluded) and that fall inside a kept segment;
    the coverage field reports how many eligible frames that is.
    """
    opt = options or PipelineOptions()
    regions = detect_boundaries(stream, seg_model, threshold=opt.threshold,
                                l_h=opt.l_h, l_f=opt.l_f, stride=opt.stride)
    min_len = rec_model.cfg.min_window()
    slices = dat.slice_segments(stream, regions, min_len=min_len)
    report = {
        "stream_id": stream.stream_id,
        "n_frames": stream.n_frames,
        "n_detected_regions": len(regions),
        "n_segments": len(slices.windows),
        "n_dropped_segments": slices.dropped,
    }
    truth_syms = [_symbol(v, stream.class_names) for v, _, _ in dat.label_runs(stream.labels)]
    report["truth_sequence"] = "-".join(truth_syms)
    if not slices.windows:
        report.update({
            "coverage": 0.0, "many_to_one_accuracy": 0.0, "weighted_f1": 0.0,
            "n_clusters": 0, "predicted_sequence": "",
            "assessment": "incorrect" if truth_syms else "correct",
        })
        return report

    embeddings = embed_segments(slices.windows, rec_model)
    if len(embeddings) == 1:
        seg_clusters = np.zeros(1, dtype=np.int64)
        k = 1
    else:
        dm = pairwise_distances(embeddings)
        n_clusters = opt.n_clusters
        if n_clusters is None:
            kinds = {int(v) for v in stream.labels if v >= 0}
            n_clusters = min(len(kinds), dm.n) if kinds else None
        assignment = single_linkage(dm, k=n_clusters)
        seg_clusters = assignment.labels
        k = assignment.k
    report["n_clusters"] = int(k)

    # frame-level cluster labels over kept segments
    frame_cluster = np.full(stream.n_frames, -1, dtype=np.int64)
    for (s, e), c in zip(slices.spans, seg_clusters):
        frame_cluster[s : e + 1] = c
    eligible = stream.labels >= 0
    covered = eligible & (frame_cluster >= 0)
    report["coverage"] = float(covered.sum() / eligible.sum()) if eligible.any() else 0.0
    if covered.any():
        cl = frame_cluster[covered]
        tl = stream.labels[covered]
        mapping = majority_mapping(cl, tl)
        mapped = np.asarray([mapping[int(c)] for c in cl])
        report["many_to_one_accuracy"] = float(np.mean(mapped == tl))
        report["weighted_f1"] = weighted_f1(mapped, tl)
    else:
        mapping = {}
        report["many_to_one_accuracy"] = 0.0
        report["weighted_f1"] = 0.0

    # run-length assessment: kept segments carry their mapped cluster label,
    # detected boundary regions read as transitions, dropped spans as unknown
    kept = {}
    for (s, e), c in zip(slices.spans, seg_clusters):
        label = mapping.get(int(c))
        kept[(s, e)] = _symbol(label, stream.class_names) if label is not None else "U"
    pred_syms = []
    cursor = 0
    edges = [(r.start_frame, r.end_frame) for r in regions] + [(stream.n_frames, stream.n_frames)]
    for start, end in edges:
        if start > cursor:
            pred_syms.append(kept.get((cursor, start - 1), "U"))
        if start < stream.n_frames:
            pred_syms.append("T")
        cursor = end + 1
    report["predicted_sequence"] = "-".join(pred_syms)
    report["assessment"] = assess_segmentation(truth_syms, pred_syms)
    return report
