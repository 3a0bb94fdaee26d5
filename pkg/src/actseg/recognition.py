"""Metric learning over activity segments: a bidirectional-branch siamese
network trained on same/different pair labels only, with the predefined
similarity D(a, b) = exp(-L1(f(a), f(b))) and MSE loss. The learned encoder
maps segments into the representation space used for clustering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    Adam,
    ShapeError,
    Tape,
    Tensor,
    absolute,
    backward,
    exp,
    mean_all,
    mul,
    neg,
    sub,
    sum_last,
)
from .layers import named_parameters, set_mode
from .branch import BranchConfig, BranchWeights, Embedding, encode, encode_batch, init_branch


@dataclass
class PairSample:
    """Two windows plus the weak label: y=1 same kind of activity, y=0 not."""

    x_a: np.ndarray  # [channels, T]
    x_b: np.ndarray  # [channels, T]
    y: int

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError(f"pair label must be 0 or 1, got {self.y}")


@dataclass
class RecognitionModel:
    cfg: BranchConfig
    branch: BranchWeights


def init_recognition_model(cfg: BranchConfig, rng: np.random.Generator) -> RecognitionModel:
    if not cfg.bidirectional:
        raise ValueError("the recognition branch is bidirectional")
    return RecognitionModel(cfg=cfg, branch=init_branch(cfg, rng))


def similarity(e_a, e_b) -> float:
    """exp(-L1 distance) between two embeddings; 1 exactly for equal inputs."""
    a = e_a.vector if isinstance(e_a, Embedding) else np.asarray(e_a, dtype=np.float64)
    b = e_b.vector if isinstance(e_b, Embedding) else np.asarray(e_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"similarity: embedding dimensions differ ({a.shape} vs {b.shape})")
    return float(np.exp(-np.abs(a - b).sum()))


def rec_train_step(batch: Sequence[PairSample], model: RecognitionModel, opt: Adam) -> float:
    """One MSE step on mean((D(x_a, x_b) - y)^2); returns the batch loss."""
    if len(batch) < 2:
        raise ShapeError("rec_train_step: need a batch of at least 2 pairs")
    x_a = np.stack([p.x_a for p in batch])
    x_b = np.stack([p.x_b for p in batch])
    y = Tensor(np.asarray([p.y for p in batch], dtype=np.float64))
    set_mode(model, "train")
    with Tape() as tape:
        e_a = encode_batch(x_a, model.cfg, model.branch)
        e_b = encode_batch(x_b, model.cfg, model.branch)
        d = exp(neg(sum_last(absolute(sub(e_a, e_b)))))
        err = sub(d, y)
        loss = mean_all(mul(err, err))
    opt.zero_grad()
    backward(loss, tape)
    opt.step()
    return loss.item()


def embed_segments(segments: Sequence[np.ndarray], model: RecognitionModel) -> list[Embedding]:
    """One embedding per segment, order preserving; windows may differ in
    length as long as each meets the branch minimum."""
    return [encode(seg, model.cfg, model.branch, source_id=i) for i, seg in enumerate(segments)]


def sample_pairs(labeled_windows: Sequence[tuple[np.ndarray, int]], n_pairs: int,
                 positive_fraction: float, rng: np.random.Generator) -> list[PairSample]:
    """Draw same-class and cross-class pairs at the requested fraction.

    Only the pair label y leaves this function; class identities are used
    solely to decide same/different.
    """
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError(f"positive_fraction must be in [0, 1], got {positive_fraction}")
    by_class: dict[int, list[int]] = {}
    for i, (_, label) in enumerate(labeled_windows):
        by_class.setdefault(int(label), []).append(i)
    classes = sorted(by_class)
    n_pos = int(round(n_pairs * positive_fraction))
    n_neg = n_pairs - n_pos
    if n_neg > 0 and len(classes) < 2:
        raise ValueError("cannot sample cross-class pairs from a single-class corpus")
    rich = [c for c in classes if len(by_class[c]) >= 2]
    if n_pos > 0 and not rich:
        raise ValueError("no class has two windows; cannot sample same-class pairs")
    pairs = []
    for _ in range(n_pos):
        c = rich[rng.integers(0, len(rich))]
        idx = by_class[c]
        i = idx[rng.integers(0, len(idx))]
        j = i
        while j == i:
            j = idx[rng.integers(0, len(idx))]
        pairs.append(PairSample(x_a=labeled_windows[i][0], x_b=labeled_windows[j][0], y=1))
    for _ in range(n_neg):
        ca, cb = rng.choice(len(classes), size=2, replace=False)
        ia = by_class[classes[ca]]
        ib = by_class[classes[cb]]
        i = ia[rng.integers(0, len(ia))]
        j = ib[rng.integers(0, len(ib))]
        pairs.append(PairSample(x_a=labeled_windows[i][0], x_b=labeled_windows[j][0], y=0))
    return pairs


def train_recognition(pairs: Sequence[PairSample], model: RecognitionModel,
                      rng: np.random.Generator, steps: int = 300, batch_size: int = 16,
                      lr: float = 1e-3, loss_target: float | None = None) -> list[float]:
    """Minibatch training over a fixed pair set; returns the loss per step and
    stops early once the mean of the last 10 losses is below `loss_target`."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs to train")
    opt = Adam(named_parameters(model), lr=lr)
    losses = []
    for _ in range(steps):
        picks = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        batch = [pairs[i] for i in picks]
        losses.append(rec_train_step(batch, model, opt))
        if loss_target is not None and len(losses) >= 10 and np.mean(losses[-10:]) < loss_target:
            break
    return losses
