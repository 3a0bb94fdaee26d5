"""Network building blocks: dilated temporal convolution, batch normalization,
temporal max pooling, LSTM cells/stacks, bidirectional LSTM, and FC layers.

All layers are pure functions of (input, params). Convolution/pooling/batch
norm register their analytic backward rules directly; the LSTM family is
composed from the primitives in :mod:`actseg.tensor`, so its gradients follow
from theirs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat,
    custom_op,
    linear,
    mul,
    relu,
    sigmoid,
    tanh,
)


class SequenceTooShortError(ValueError):
    """Input has fewer frames than the layer's receptive geometry requires."""


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class DilatedConvParams:
    kernels: Tensor  # [out_channels, in_channels, kernel_width]
    bias: Tensor  # [out_channels]
    dilation: int
    stride: int = 1

    def __post_init__(self):
        if self.dilation < 1 or self.stride < 1:
            raise ValueError("dilation and stride must be positive")

    @property
    def kernel_width(self) -> int:
        return self.kernels.shape[2]

    @property
    def receptive_width(self) -> int:
        return (self.kernel_width - 1) * self.dilation + 1


@dataclass
class BatchNormParams:
    gamma: Tensor  # [channels]
    beta: Tensor  # [channels]
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99  # decay of the running statistics
    epsilon: float = 1e-5
    mode: str = "train"  # "train" | "inference"


@dataclass
class LSTMCellParams:
    """Gate weights of one LSTM cell: W_* [hidden, input], U_* [hidden, hidden],
    b_* [hidden] for the input (i), forget (f), candidate (c) and output (o)
    gates."""

    w_i: Tensor
    w_f: Tensor
    w_c: Tensor
    w_o: Tensor
    u_i: Tensor
    u_f: Tensor
    u_c: Tensor
    u_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    def __post_init__(self):
        h, inp = self.w_i.shape
        for w in (self.w_f, self.w_c, self.w_o):
            if w.shape != (h, inp):
                raise ShapeError("LSTM gate blocks must share input and hidden extents")
        for u in (self.u_i, self.u_f, self.u_c, self.u_o):
            if u.shape != (h, h):
                raise ShapeError("LSTM recurrent blocks must be [hidden, hidden]")
        for b in (self.b_i, self.b_f, self.b_c, self.b_o):
            if b.shape != (h,):
                raise ShapeError("LSTM biases must be [hidden]")

    @property
    def hidden_size(self) -> int:
        return self.w_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_i.shape[1]


@dataclass
class FCParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]
    bn: BatchNormParams | None = None
    activation: str = "none"  # "relu" | "sigmoid" | "none"


# ---------------------------------------------------------------------------
# initializers


def init_conv(rng: np.random.Generator, out_channels: int, in_channels: int,
              kernel_width: int, dilation: int, stride: int = 1) -> DilatedConvParams:
    fan_in = in_channels * kernel_width
    fan_out = out_channels * kernel_width
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    kernels = rng.uniform(-limit, limit, size=(out_channels, in_channels, kernel_width))
    return DilatedConvParams(
        kernels=Tensor(kernels, requires_grad=True),
        bias=Tensor(np.zeros(out_channels), requires_grad=True),
        dilation=dilation,
        stride=stride,
    )


def init_batch_norm(channels: int, momentum: float = 0.99, epsilon: float = 1e-5) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels), requires_grad=True),
        beta=Tensor(np.zeros(channels), requires_grad=True),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        momentum=momentum,
        epsilon=epsilon,
    )


def init_lstm(rng: np.random.Generator, hidden_size: int, input_size: int) -> LSTMCellParams:
    limit = np.sqrt(1.0 / hidden_size)

    def w():
        return Tensor(rng.uniform(-limit, limit, size=(hidden_size, input_size)), requires_grad=True)

    def u():
        return Tensor(rng.uniform(-limit, limit, size=(hidden_size, hidden_size)), requires_grad=True)

    def b(value=0.0):
        return Tensor(np.full(hidden_size, value), requires_grad=True)

    # forget-gate bias starts at 1 to keep early gradients flowing
    return LSTMCellParams(
        w_i=w(), w_f=w(), w_c=w(), w_o=w(),
        u_i=u(), u_f=u(), u_c=u(), u_o=u(),
        b_i=b(), b_f=b(1.0), b_c=b(), b_o=b(),
    )


def init_fc(rng: np.random.Generator, out_features: int, in_features: int,
            activation: str = "none", with_bn: bool = False) -> FCParams:
    limit = np.sqrt(6.0 / (in_features + out_features))
    return FCParams(
        weight=Tensor(rng.uniform(-limit, limit, size=(out_features, in_features)), requires_grad=True),
        bias=Tensor(np.zeros(out_features), requires_grad=True),
        bn=init_batch_norm(out_features) if with_bn else None,
        activation=activation,
    )


# ---------------------------------------------------------------------------
# layer forward passes


def conv1d_dilated(x: Tensor, p: DilatedConvParams) -> Tensor:
    """Dilated temporal convolution over [batch, channels, T]."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d_dilated: expected [batch, channels, T], got {x.shape}")
    batch, in_c, t_in = x.shape
    out_c, kern_c, width = p.kernels.shape
    if kern_c != in_c:
        raise ShapeError(f"conv1d_dilated: kernel expects {kern_c} channels, input has {in_c}")
    span = p.receptive_width
    if span > t_in:
        raise SequenceTooShortError(
            f"conv1d_dilated: receptive width {span} (kernel {width}, dilation "
            f"{p.dilation}) needs at least {span} frames, got {t_in}"
        )
    t_out = (t_in - span) // p.stride + 1
    idx = p.stride * np.arange(t_out)[:, None] + p.dilation * np.arange(width)[None, :]
    patches = x.data[:, :, idx]  # [batch, in_c, t_out, width]
    pm = np.ascontiguousarray(patches.transpose(0, 2, 1, 3)).reshape(batch * t_out, in_c * width)
    km = p.kernels.data.reshape(out_c, in_c * width)
    out = (pm @ km.T).reshape(batch, t_out, out_c).transpose(0, 2, 1) + p.bias.data[None, :, None]

    def rule(d):  # d: [batch, out_c, t_out]
        dm = np.ascontiguousarray(d.transpose(0, 2, 1)).reshape(batch * t_out, out_c)
        d_bias = d.sum(axis=(0, 2))
        d_kern = (dm.T @ pm).reshape(out_c, in_c, width)
        d_patches = (dm @ km).reshape(batch, t_out, in_c, width).transpose(0, 2, 1, 3)
        d_x = np.zeros_like(x.data)
        np.add.at(d_x, (slice(None), slice(None), idx), d_patches)
        return d_x, d_kern, d_bias

    return custom_op("conv1d_dilated", out, (x, p.kernels, p.bias), rule)


def max_pool1d(x: Tensor, pool_size: int) -> Tensor:
    """Non-overlapping temporal max pooling; trailing remainder frames drop.

    Gradient routes to the first maximal element of each window.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be positive")
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool1d: expected [batch, channels, T], got {x.shape}")
    batch, chans, t_in = x.shape
    if t_in < pool_size:
        raise SequenceTooShortError(f"max_pool1d: needs at least {pool_size} frames, got {t_in}")
    t_out = t_in // pool_size
    windows = x.data[:, :, : t_out * pool_size].reshape(batch, chans, t_out, pool_size)
    arg = windows.argmax(axis=3)  # first occurrence on ties
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def rule(d):
        d_win = np.zeros_like(windows)
        np.put_along_axis(d_win, arg[..., None], d[..., None], axis=3)
        d_x = np.zeros_like(x.data)
        d_x[:, :, : t_out * pool_size] = d_win.reshape(batch, chans, t_out * pool_size)
        return (d_x,)

    return custom_op("max_pool1d", out, (x,), rule)


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    # view a [channels] vector so it broadcasts over [batch, channels(, T)]
    shape = [1] * ndim
    shape[1] = v.shape[0]
    return v.reshape(shape)


def batch_norm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Normalize per channel (axis 1). Train mode uses batch statistics and
    updates the running ones; inference mode depends only on running stats."""
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"batch_norm: expected [batch, channels(, T)], got {x.shape}")
    if p.mode not in ("train", "inference"):
        raise ValueError(f"batch_norm: unknown mode {p.mode!r}")
    ndim = x.data.ndim
    axes = (0,) if ndim == 2 else (0, 2)
    gamma_b = _per_channel(p.gamma.data, ndim)
    beta_b = _per_channel(p.beta.data, ndim)

    if p.mode == "inference":
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        inv_b = _per_channel(inv, ndim)
        xhat = (x.data - _per_channel(p.running_mean, ndim)) * inv_b
        out = gamma_b * xhat + beta_b

        def rule(d):
            d_x = d * gamma_b * inv_b
            d_gamma = (d * xhat).sum(axis=axes)
            d_beta = d.sum(axis=axes)
            return d_x, d_gamma, d_beta

        return custom_op("batch_norm", out, (x, p.gamma, p.beta), rule)

    if x.shape[0] < 2:
        raise ShapeError("batch_norm: train mode needs a batch of at least 2")
    n = int(np.prod([x.shape[a] for a in axes]))
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    inv_b = _per_channel(inv, ndim)
    xhat = (x.data - _per_channel(mean, ndim)) * inv_b
    out = gamma_b * xhat + beta_b

    p.running_mean[:] = p.momentum * p.running_mean + (1.0 - p.momentum) * mean
    p.running_var[:] = p.momentum * p.running_var + (1.0 - p.momentum) * var

    def rule(d):
        d_gamma = (d * xhat).sum(axis=axes)
        d_beta = d.sum(axis=axes)
        d_xhat = d * gamma_b
        s1 = d_xhat.sum(axis=axes, keepdims=True)
        s2 = (d_xhat * xhat).sum(axis=axes, keepdims=True)
        d_x = (inv_b / n) * (n * d_xhat - s1 - xhat * s2)
        return d_x, d_gamma, d_beta

    return custom_op("batch_norm", out, (x, p.gamma, p.beta), rule)


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
              p: LSTMCellParams) -> tuple[Tensor, Tensor]:
    """One LSTM cell update: gates i/f/o through sigmoid, candidate through
    tanh, c_t = f∘c_prev + i∘c̃, h_t = o∘tanh(c_t)."""

    def gate(w, u, b, act):
        return act(add_bias(add(linear(x_t, w), linear(h_prev, u)), b))

    i_t = gate(p.w_i, p.u_i, p.b_i, sigmoid)
    f_t = gate(p.w_f, p.u_f, p.b_f, sigmoid)
    c_cand = gate(p.w_c, p.u_c, p.b_c, tanh)
    o_t = gate(p.w_o, p.u_o, p.b_o, sigmoid)
    c_t = add(mul(f_t, c_prev), mul(i_t, c_cand))
    h_t = mul(o_t, tanh(c_t))
    return h_t, c_t


def step_at(x: Tensor, t: int) -> Tensor:
    """Select timestep t of a [batch, T, features] tensor."""

    def rule(d):
        d_x = np.zeros_like(x.data)
        d_x[:, t, :] = d
        return (d_x,)

    return custom_op("step_at", np.ascontiguousarray(x.data[:, t, :]), (x,), rule)


def stack_steps(steps: Sequence[Tensor]) -> Tensor:
    """Stack per-timestep [batch, features] tensors into [batch, T, features]."""

    def rule(d):
        return tuple(np.ascontiguousarray(d[:, t, :]) for t in range(len(steps)))

    return custom_op("stack_steps", np.stack([s.data for s in steps], axis=1), tuple(steps), rule)


def reverse_steps(x: Tensor) -> Tensor:
    """Reverse the time axis of a [batch, T, features] tensor."""

    def rule(d):
        return (np.ascontiguousarray(d[:, ::-1, :]),)

    return custom_op("reverse_steps", np.ascontiguousarray(x.data[:, ::-1, :]), (x,), rule)


def mean_steps(x: Tensor) -> Tensor:
    """Mean over the time axis of a [batch, T, features] tensor."""
    t = x.shape[1]

    def rule(d):
        return (np.broadcast_to(d[:, None, :] / t, x.shape),)

    return custom_op("mean_steps", x.data.mean(axis=1), (x,), rule)


def lstm_sequence(seq: Tensor, p: LSTMCellParams) -> Tensor:
    """Fold lstm_step left to right over [batch, T, input]; h_0 = c_0 = 0.

    Emits the hidden state for every timestep: [batch, T, hidden].
    """
    if seq.data.ndim != 3:
        raise ShapeError(f"lstm_sequence: expected [batch, T, input], got {seq.shape}")
    batch, t_len, width = seq.shape
    if t_len < 1:
        raise SequenceTooShortError("lstm_sequence: empty sequence")
    if width != p.input_size:
        raise ShapeError(f"lstm_sequence: input width {width} does not match cell ({p.input_size})")
    h = Tensor.zeros(batch, p.hidden_size)
    c = Tensor.zeros(batch, p.hidden_size)
    outputs = []
    for t in range(t_len):
        h, c = lstm_step(step_at(seq, t), h, c, p)
        outputs.append(h)
    return stack_steps(outputs)


def residual_lstm_stack(seq: Tensor, layers: Sequence[LSTMCellParams]) -> Tensor:
    """Stacked LSTM with identity residuals between adjacent layers.

    The first layer has no residual (its input width may differ from the
    hidden size); every later layer requires input width == hidden size.
    """
    if not layers:
        raise ValueError("residual_lstm_stack: need at least one layer")
    hidden = layers[0].hidden_size
    for k, p in enumerate(layers[1:], start=2):
        if p.hidden_size != hidden:
            raise ShapeError(f"residual_lstm_stack: layer {k} hidden size {p.hidden_size} != {hidden}")
        if p.input_size != hidden:
            raise ShapeError(f"residual_lstm_stack: layer {k} input width {p.input_size} != {hidden}")
    out = lstm_sequence(seq, layers[0])
    for p in layers[1:]:
        out = add(lstm_sequence(out, p), out)
    return out


def blstm_sequence(seq: Tensor, p_fwd: LSTMCellParams, p_bwd: LSTMCellParams) -> Tensor:
    """Bidirectional LSTM: forward pass plus a reversed pass, concatenated per
    timestep into [batch, T, 2*hidden]."""
    if p_fwd.hidden_size != p_bwd.hidden_size:
        raise ShapeError(
            f"blstm_sequence: hidden sizes differ ({p_fwd.hidden_size} vs {p_bwd.hidden_size})"
        )
    fwd = lstm_sequence(seq, p_fwd)
    bwd = reverse_steps(lstm_sequence(reverse_steps(seq), p_bwd))
    return concat([fwd, bwd], axis=2)


def residual_blstm_stack(seq: Tensor, layers: Sequence[tuple[LSTMCellParams, LSTMCellParams]]) -> Tensor:
    """Stacked BLSTM with identity residuals between adjacent layers (their
    2*hidden output widths match)."""
    if not layers:
        raise ValueError("residual_blstm_stack: need at least one layer")
    width = 2 * layers[0][0].hidden_size
    out = blstm_sequence(seq, *layers[0])
    for fwd, bwd in layers[1:]:
        if 2 * fwd.hidden_size != width:
            raise ShapeError("residual_blstm_stack: hidden sizes must match across layers")
        out = add(blstm_sequence(out, fwd, bwd), out)
    return out


def fc_forward(x: Tensor, p: FCParams) -> Tensor:
    """activation(batch_norm(weight @ x + bias)); BN and activation optional."""
    z = add_bias(linear(x, p.weight), p.bias)
    if p.bn is not None:
        z = batch_norm(z, p.bn)
    if p.activation == "relu":
        return relu(z)
    if p.activation == "sigmoid":
        return sigmoid(z)
    if p.activation == "none":
        return z
    raise ValueError(f"fc_forward: unknown activation {p.activation!r}")


# ---------------------------------------------------------------------------
# parameter-tree utilities


def _walk(obj, prefix: str):
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """All trainable tensors in a parameter tree, keyed by dotted path."""
    return {name: t for name, t in _walk(obj, prefix)
            if isinstance(t, Tensor) and t.requires_grad}


def named_state(obj, prefix: str = "") -> dict[str, np.ndarray]:
    """All persistent arrays (parameters and running statistics)."""
    out = {}
    for name, t in _walk(obj, prefix):
        out[name] = t.data if isinstance(t, Tensor) else t
    return out


def load_state(obj, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy a saved state dict back into an identically shaped tree."""
    for name, t in _walk(obj, prefix):
        if name not in state:
            raise KeyError(f"checkpoint is missing entry {name!r}")
        src = state[name]
        dst = t.data if isinstance(t, Tensor) else t
        if tuple(src.shape) != tuple(dst.shape):
            raise ShapeError(f"checkpoint entry {name!r} has shape {src.shape}, expected {dst.shape}")
        dst[...] = src


def set_mode(obj, mode: str) -> None:
    """Flip every BatchNormParams in a tree to 'train' or 'inference'."""
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    stack = [obj]
    while stack:
        cur = stack.pop()
        if isinstance(cur, BatchNormParams):
            cur.mode = mode
        elif dataclasses.is_dataclass(cur) and not isinstance(cur, type):
            stack.extend(getattr(cur, f.name) for f in dataclasses.fields(cur))
        elif isinstance(cur, (list, tuple)):
            stack.extend(cur)
