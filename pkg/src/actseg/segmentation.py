"""Boundary detection: a candidate frame splits the stream into a history
window (chronological) and a future window (reverse chronological); a
weight-shared unidirectional branch pair encodes both, and an FC head scores
their dissimilarity against a generalized-Gaussian boundary target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    Adam,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    mean_all,
    mul,
    reshape,
    sub,
)
from .layers import FCParams, fc_forward, init_fc, named_parameters, set_mode
from .branch import BranchConfig, BranchWeights, encode_batch, init_branch
from .data import SensorStream, true_boundary_centers


@dataclass
class GGTarget:
    """Generalized Gaussian boundary target: width alpha (frames), shape
    beta, center mu. Large beta gives the flat top and sharp edges that match
    a transition period; the normalized variant peaks at exactly 1."""

    alpha: float
    beta: float
    mu: float = 0.0
    normalize_peak: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


def gg_value(x: float, t: GGTarget) -> float:
    """beta/(2*alpha*Gamma(1/beta)) * exp(-(|x-mu|/alpha)^beta), optionally
    divided by its peak so the value at mu is 1."""
    decay = math.exp(-((abs(x - t.mu) / t.alpha) ** t.beta))
    if t.normalize_peak:
        return decay
    return t.beta / (2.0 * t.alpha * math.gamma(1.0 / t.beta)) * decay


@dataclass
class SegmentationSample:
    history: np.ndarray  # [channels, L_h], chronological, ends at t_m
    future_reversed: np.ndarray  # [channels, L_f], reverse chronological
    target: float  # boundary score in [0, 1]
    t_m: int


@dataclass
class BoundaryRegion:
    """A maximal run of consecutive above-threshold candidate frames."""

    start_frame: int
    end_frame: int
    peak_score: float

    def __post_init__(self):
        if self.start_frame > self.end_frame:
            raise ValueError("region start must not exceed its end")


def make_sample(stream: SensorStream, t_m: int, l_h: int, l_f: int,
                target_spec: GGTarget) -> SegmentationSample:
    """Slice the history/future windows around t_m and attach the boundary
    target: the normalized GG value at the distance to the nearest true
    boundary center."""
    if t_m < l_h - 1 or t_m + l_f >= stream.n_frames:
        raise ValueError(
            f"t_m={t_m} out of range for history {l_h}, future {l_f}, "
            f"stream of {stream.n_frames} frames"
        )
    history = stream.frames[:, t_m - l_h + 1 : t_m + 1].copy()
    future = stream.frames[:, t_m + 1 : t_m + 1 + l_f][:, ::-1].copy()
    centers = true_boundary_centers(stream)
    if centers.size:
        target = gg_value(float(np.min(np.abs(centers - t_m))), target_spec)
    else:
        target = 0.0
    return SegmentationSample(history=history, future_reversed=future, target=target, t_m=t_m)


# ---------------------------------------------------------------------------
# model


@dataclass
class SegmentationModel:
    cfg: BranchConfig
    branch: BranchWeights  # shared by the history and future encoders
    head: list[FCParams]


def init_segmentation_model(cfg: BranchConfig, rng: np.random.Generator,
                            head_hidden: tuple[int, ...] = (128, 64)) -> SegmentationModel:
    if cfg.bidirectional:
        raise ValueError("the segmentation branch is unidirectional")
    head = []
    width = 2 * cfg.representation_dim  # concatenated history/future vectors
    for h in head_hidden:
        head.append(init_fc(rng, h, width, activation="relu", with_bn=True))
        width = h
    head.append(init_fc(rng, 1, width, activation="sigmoid", with_bn=False))
    return SegmentationModel(cfg=cfg, branch=init_branch(cfg, rng), head=head)


def _score_batch(model: SegmentationModel, hist: np.ndarray, fut: np.ndarray) -> Tensor:
    e_h = encode_batch(hist, model.cfg, model.branch)
    e_f = encode_batch(fut, model.cfg, model.branch)
    z = concat([e_h, e_f], axis=1)
    for fc in model.head:
        z = fc_forward(z, fc)
    return reshape(z, (z.shape[0],))


def seg_score(sample: SegmentationSample, model: SegmentationModel) -> float:
    """Boundary score in [0, 1] for one sample (inference mode)."""
    set_mode(model, "inference")
    out = _score_batch(model, sample.history[None], sample.future_reversed[None])
    return float(out.data[0])


def seg_train_step(batch: Sequence[SegmentationSample], model: SegmentationModel,
                   opt: Adam) -> float:
    """One MSE step between predicted scores and GG targets; returns the loss."""
    if len(batch) < 2:
        raise ShapeError("seg_train_step: need a batch of at least 2 samples")
    hist = np.stack([s.history for s in batch])
    fut = np.stack([s.future_reversed for s in batch])
    targets = Tensor(np.asarray([s.target for s in batch], dtype=np.float64))
    set_mode(model, "train")
    with Tape() as tape:
        scores = _score_batch(model, hist, fut)
        err = sub(scores, targets)
        loss = mean_all(mul(err, err))
    opt.zero_grad()
    backward(loss, tape)
    opt.step()
    return loss.item()


def detect_boundaries(stream: SensorStream, model: SegmentationModel,
                      threshold: float = 0.5, l_h: int = 128, l_f: int = 128,
                      stride: int = 4, batch_size: int = 128) -> list[BoundaryRegion]:
    """Slide the candidate frame by `stride`, score each split, and merge
    maximal runs of consecutive above-threshold candidates into regions."""
    if stream.n_frames < l_h + l_f:
        raise ValueError(
            f"stream of {stream.n_frames} frames is too short; needs at least {l_h + l_f}"
        )
    positions = np.arange(l_h - 1, stream.n_frames - l_f, stride)
    set_mode(model, "inference")
    scores = np.empty(positions.size)
    frames = stream.frames
    for lo in range(0, positions.size, batch_size):
        chunk = positions[lo : lo + batch_size]
        hist = np.stack([frames[:, t - l_h + 1 : t + 1] for t in chunk])
        fut = np.stack([frames[:, t + 1 : t + 1 + l_f][:, ::-1] for t in chunk])
        scores[lo : lo + chunk.size] = _score_batch(model, hist, fut).data
    regions = []
    run_start = None
    run_peak = 0.0
    prev_t = None
    for t, s in zip(positions, scores):
        if s > threshold:
            if run_start is None:
                run_start, run_peak = t, s
            else:
                run_peak = max(run_peak, s)
            prev_t = t
        elif run_start is not None:
            regions.append(BoundaryRegion(int(run_start), int(prev_t), float(run_peak)))
            run_start = None
    if run_start is not None:
        regions.append(BoundaryRegion(int(run_start), int(prev_t), float(run_peak)))
    return regions


def train_segmentation(streams: Sequence[SensorStream], model: SegmentationModel,
                       target_spec: GGTarget, rng: np.random.Generator,
                       l_h: int = 128, l_f: int = 128, stride: int = 4,
                       steps: int = 400, batch_size: int = 16, lr: float = 1e-3,
                       loss_target: float | None = None) -> list[float]:
    """Train on candidate splits from the given streams; batches are balanced
    between near-boundary and far-from-boundary candidates. Returns the loss
    per step; stops early once the mean of the last 10 losses is below
    `loss_target`."""
    candidates = []  # (stream index, t_m, target)
    for si, stream in enumerate(streams):
        centers = true_boundary_centers(stream)
        for t in range(l_h - 1, stream.n_frames - l_f, stride):
            target = gg_value(float(np.min(np.abs(centers - t))), target_spec) if centers.size else 0.0
            candidates.append((si, t, target))
    if not candidates:
        raise ValueError("no admissible candidate positions; streams too short")
    near = [c for c in candidates if c[2] > 0.1]
    far = [c for c in candidates if c[2] <= 0.1]
    opt = Adam(named_parameters(model), lr=lr)
    losses = []
    for _ in range(steps):
        picks = []
        n_near = batch_size // 2 if near and far else 0
        if near and far:
            picks += [near[i] for i in rng.integers(0, len(near), n_near)]
            picks += [far[i] for i in rng.integers(0, len(far), batch_size - n_near)]
        else:
            pool = near or far
            picks += [pool[i] for i in rng.integers(0, len(pool), batch_size)]
        batch = [make_sample(streams[si], t, l_h, l_f, target_spec) for si, t, _ in picks]
        losses.append(seg_train_step(batch, model, opt))
        if loss_target is not None and len(losses) >= 10 and np.mean(losses[-10:]) < loss_target:
            break
    return losses


# ---------------------------------------------------------------------------
# Table-style error assessment


def assess_segmentation(truth: Sequence[str], predicted: Sequence[str]) -> str:
    """Judge a predicted run-length label sequence against the ground truth.

    Symbols are activity names plus 'T' (transition) and 'U' (unknown). A true
    transition may be matched by T, by U, or omitted entirely; anything else
    must match the true activity exactly, and leftover predictions are errors.
    Returns 'correct' or 'incorrect'.
    """
    for seq, who in ((truth, "truth"), (predicted, "predicted")):
        for sym in seq:
            if not isinstance(sym, str) or not sym:
                raise ValueError(f"unknown label symbol {sym!r} in {who} sequence")
    j = 0
    for t_sym in truth:
        if t_sym in ("T", "U"):
            if j < len(predicted) and predicted[j] in ("T", "U"):
                j += 1
            continue  # omitted transition is fine
        if j >= len(predicted) or predicted[j] != t_sym:
            return "incorrect"
        j += 1
    return "correct" if j == len(predicted) else "incorrect"
