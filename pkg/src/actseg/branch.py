"""The shared per-branch encoder: four dilated temporal convolutions with
batch norm and ReLU, two max-pooling stages, and a two-layer recurrent stack
(unidirectional with identity residuals, or bidirectional), mapping a raw
multichannel window to a fixed-size representation vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, relu, transpose
from .layers import (
    BatchNormParams,
    DilatedConvParams,
    LSTMCellParams,
    SequenceTooShortError,
    batch_norm,
    conv1d_dilated,
    init_batch_norm,
    init_conv,
    init_lstm,
    max_pool1d,
    mean_steps,
    residual_blstm_stack,
    residual_lstm_stack,
    set_mode,
    step_at,
)


@dataclass
class BranchConfig:
    """Geometry of one encoder branch.

    Defaults follow the conv(64) x2 / pool / conv(64) x2 / pool / recurrent(128)
    x2 layout with kernel width 5 and geometrically growing dilations.
    """

    in_channels: int
    conv_channels: tuple[int, ...] = (64, 64, 64, 64)
    kernel_width: int = 5
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    pool_after: tuple[int, ...] = (1, 3)  # 0-based conv indices followed by a pool
    pool_size: int = 2
    hidden_sizes: tuple[int, ...] = (128, 128)
    bidirectional: bool = False

    def __post_init__(self):
        if len(self.conv_channels) != len(self.dilations):
            raise ValueError("need one dilation per convolutional layer")
        if any(h != self.hidden_sizes[0] for h in self.hidden_sizes):
            raise ValueError("recurrent layers must share a hidden size")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")

    @property
    def representation_dim(self) -> int:
        d = self.hidden_sizes[-1]
        return 2 * d if self.bidirectional else d

    def output_length(self, t: int) -> int:
        """Frames surviving the conv/pool stages for an input of t frames."""
        for i, dil in enumerate(self.dilations):
            t = t - (self.kernel_width - 1) * dil
            if i in self.pool_after:
                t = t // self.pool_size
        return t

    def min_window(self) -> int:
        """Smallest input length for which every stage still has a frame."""
        need = 1
        for i in reversed(range(len(self.dilations))):
            if i in self.pool_after:
                need = need * self.pool_size
            need = need + (self.kernel_width - 1) * self.dilations[i]
        return need


@dataclass
class BranchWeights:
    convs: list[DilatedConvParams]
    conv_bns: list[BatchNormParams]
    fwd_cells: list[LSTMCellParams]
    bwd_cells: list[LSTMCellParams] = field(default_factory=list)  # empty = unidirectional


@dataclass
class Embedding:
    """A fixed-size representation vector for one window."""

    vector: np.ndarray
    source_id: object = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError(f"embedding must be a vector, got shape {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def init_branch(cfg: BranchConfig, rng: np.random.Generator) -> BranchWeights:
    convs = []
    conv_bns = []
    prev = cfg.in_channels
    for out_ch, dil in zip(cfg.conv_channels, cfg.dilations):
        convs.append(init_conv(rng, out_ch, prev, cfg.kernel_width, dilation=dil))
        conv_bns.append(init_batch_norm(out_ch))
        prev = out_ch
    hidden = cfg.hidden_sizes[0]
    fwd, bwd = [], []
    width = prev
    for _ in cfg.hidden_sizes:
        fwd.append(init_lstm(rng, hidden, width))
        if cfg.bidirectional:
            bwd.append(init_lstm(rng, hidden, width))
            width = 2 * hidden
        else:
            width = hidden
    return BranchWeights(convs=convs, conv_bns=conv_bns, fwd_cells=fwd, bwd_cells=bwd)


def encode_batch(windows, cfg: BranchConfig, weights: BranchWeights) -> Tensor:
    """Encode a [batch, channels, T] stack of windows into [batch, d].

    Honors the current batch-norm mode of `weights`; the caller picks train
    or inference. Unidirectional branches summarize with the final-timestep
    hidden state, bidirectional ones with the temporal mean.
    """
    x = windows if isinstance(windows, Tensor) else Tensor(np.asarray(windows, dtype=np.float64))
    if x.data.ndim != 3:
        raise ValueError(f"encode_batch: expected [batch, channels, T], got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"encode_batch: expected {cfg.in_channels} channels, got {x.shape[1]}")
    t = x.shape[2]
    need = cfg.min_window()
    if t < need:
        raise SequenceTooShortError(
            f"window of {t} frames is too short for this branch; needs at least {need}"
        )
    for i, (conv, bn) in enumerate(zip(weights.convs, weights.conv_bns)):
        x = relu(batch_norm(conv1d_dilated(x, conv), bn))
        if i in cfg.pool_after:
            x = max_pool1d(x, cfg.pool_size)
    x = transpose(x, (0, 2, 1))  # [batch, T', channels]
    if cfg.bidirectional:
        out = residual_blstm_stack(x, list(zip(weights.fwd_cells, weights.bwd_cells)))
        return mean_steps(out)
    out = residual_lstm_stack(x, weights.fwd_cells)
    return step_at(out, out.shape[1] - 1)


def encode(window, cfg: BranchConfig, weights: BranchWeights, source_id=None) -> Embedding:
    """Encode a single [channels, T] window into an Embedding.

    Runs in inference mode (batch statistics are meaningless for a single
    window); the previous batch-norm modes are restored afterwards.
    """
    arr = np.asarray(window, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"encode: expected [channels, T], got {arr.shape}")
    modes = [bn.mode for bn in weights.conv_bns]
    set_mode(weights, "inference")
    try:
        rep = encode_batch(arr[None, :, :], cfg, weights)
    finally:
        for bn, mode in zip(weights.conv_bns, modes):
            bn.mode = mode
    return Embedding(vector=rep.data[0].copy(), source_id=source_id)
