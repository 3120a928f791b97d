"""Neural layers built on the tensor core: LSTM, conv stack, dense,
dropout, batch normalization.

Whole-sequence LSTM and convolution runs dispatch to the fused kernels
(compiled when available) through the tape's custom-op hook, so the hot
loops stay out of Python while gradients keep flowing.  Single-step and
reduced variants are composed from plain tensor ops.
"""

from __future__ import annotations

import numpy as np

from . import kernels, tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class LstmParams:
    """Weights for one LSTM direction.

    Each gate has a (hidden, input + hidden) matrix applied to the
    concatenation [x_t, h_prev] and a length-hidden bias.  The forget
    bias starts at +1 so early training does not flush the cell state.
    """

    GATE_ORDER = ("input", "forget", "output", "cand")

    def __init__(self, input_size: int, hidden_size: int, rng):
        if input_size < 1 or hidden_size < 1:
            raise ConfigError(
                f"lstm sizes must be positive, got {input_size}, {hidden_size}"
            )
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = 1.0 / np.sqrt(input_size + hidden_size)
        shape = (hidden_size, input_size + hidden_size)
        self.input_w = Tensor(_uniform(rng, shape, bound), requires_grad=True)
        self.forget_w = Tensor(_uniform(rng, shape, bound), requires_grad=True)
        self.output_w = Tensor(_uniform(rng, shape, bound), requires_grad=True)
        self.cand_w = Tensor(_uniform(rng, shape, bound), requires_grad=True)
        self.input_b = Tensor(_uniform(rng, hidden_size, bound), requires_grad=True)
        self.forget_b = Tensor(
            _uniform(rng, hidden_size, bound) + 1.0, requires_grad=True
        )
        self.output_b = Tensor(_uniform(rng, hidden_size, bound), requires_grad=True)
        self.cand_b = Tensor(_uniform(rng, hidden_size, bound), requires_grad=True)

    def parameters(self, prefix=""):
        return {
            prefix + "input_w": self.input_w,
            prefix + "forget_w": self.forget_w,
            prefix + "output_w": self.output_w,
            prefix + "cand_w": self.cand_w,
            prefix + "input_b": self.input_b,
            prefix + "forget_b": self.forget_b,
            prefix + "output_b": self.output_b,
            prefix + "cand_b": self.cand_b,
        }

    def _stacked(self):
        w = np.concatenate(
            [self.input_w.data, self.forget_w.data, self.output_w.data, self.cand_w.data]
        )
        b = np.concatenate(
            [self.input_b.data, self.forget_b.data, self.output_b.data, self.cand_b.data]
        )
        return w, b


def lstm_cell_step(params: LstmParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One recurrence step from plain tensor ops; returns (h_t, c_t)."""
    if x_t.shape != (params.input_size,):
        raise DimensionError(
            f"step input must be ({params.input_size},), got {x_t.shape}"
        )
    if h_prev.shape != (params.hidden_size,) or c_prev.shape != (params.hidden_size,):
        raise DimensionError(
            f"states must be ({params.hidden_size},), got {h_prev.shape}, {c_prev.shape}"
        )
    xh = T.reshape(T.concat([x_t, h_prev]), (params.input_size + params.hidden_size, 1))

    def gate(w, b, kind):
        z = T.add(T.reshape(T.matmul(w, xh), (params.hidden_size,)), b)
        return T.elementwise_unary(kind, z)

    i = gate(params.input_w, params.input_b, "sigmoid")
    f = gate(params.forget_w, params.forget_b, "sigmoid")
    o = gate(params.output_w, params.output_b, "sigmoid")
    g = gate(params.cand_w, params.cand_b, "tanh")
    c_t = T.add(T.mul(f, c_prev), T.mul(i, g))
    h_t = T.mul(o, T.tanh(c_t))
    return h_t, c_t


def lstm_run(params: LstmParams, xs: Tensor) -> Tensor:
    """Run the recurrence over a (T, input_size) sequence via the fused
    kernel; returns the hidden sequence (T, hidden_size).  Initial
    states are zero.
    """
    if xs.ndim != 2 or xs.shape[1] != params.input_size:
        raise DimensionError(
            f"sequence must be (T, {params.input_size}), got {xs.shape}"
        )
    if xs.shape[0] == 0:
        raise ContractError("lstm_run needs a nonempty sequence")
    H = params.hidden_size
    I = params.input_size
    w, b = params._stacked()
    h0 = np.zeros(H)
    c0 = np.zeros(H)
    hs, cs, gates = kernels.lstm_forward(xs.data, w, b, h0, c0)

    weights = (params.input_w, params.forget_w, params.output_w, params.cand_w)
    biases = (params.input_b, params.forget_b, params.output_b, params.cand_b)

    def forward_fn(xd, *wb):
        wd = np.concatenate(wb[:4])
        bd = np.concatenate(wb[4:])
        return kernels.lstm_forward(xd, wd, bd, h0, c0)[0]

    def backward_fn(d_hs):
        dx, dw, db, _, _ = kernels.lstm_backward(
            xs.data, w, h0, c0, hs, cs, gates, d_hs
        )
        return (
            dx,
            dw[:H],
            dw[H : 2 * H],
            dw[2 * H : 3 * H],
            dw[3 * H :],
            db[:H],
            db[H : 2 * H],
            db[2 * H : 3 * H],
            db[3 * H :],
        )

    return T.custom_op(hs, (xs, *weights, *biases), forward_fn, backward_fn, "lstm_run")


def bilstm_encode(params_fwd: LstmParams, params_bwd: LstmParams, xs: Tensor) -> Tensor:
    """Bidirectional encoding: output[t] is the forward hidden state at t
    concatenated with the backward hidden state at t, width 2*hidden.
    """
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ContractError(f"bilstm_encode needs a nonempty (T, I) sequence, got {xs.shape}")
    fwd = lstm_run(params_fwd, xs)
    bwd = T.flip(lstm_run(params_bwd, T.flip(xs, axis=0)), axis=0)
    return T.concat([fwd, bwd], axis=1)


def _same_pads(kernel: int):
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding="same") -> Tensor:
    """Cross-correlate a (T, C_in) sequence with (K, C_in, C_out) taps.

    ``padding`` is "same" (zero-pad to keep ceil(T/stride) frames),
    "valid", or an explicit (left, right) pair.
    """
    K = w.shape[0]
    if padding == "same":
        pl, pr = _same_pads(K)
    elif padding == "valid":
        pl, pr = 0, 0
    else:
        pl, pr = padding
    out = kernels.conv1d_forward(x.data, w.data, b.data, stride, pl, pr)

    def forward_fn(xd, wd, bd):
        return kernels.conv1d_forward(xd, wd, bd, stride, pl, pr)

    def backward_fn(d_y):
        return kernels.conv1d_backward(x.data, w.data, stride, pl, pr, d_y)

    return T.custom_op(out, (x, w, b), forward_fn, backward_fn, "conv1d")


class Conv1dParams:
    """Config for a multi-kernel conv stack: which widths, how many
    output channels per width, stride, and padding policy.
    """

    def __init__(self, kernel_sizes=(3, 5, 7, 9), channels_per_kernel=200,
                 stride=1, padding="same"):
        sizes = tuple(int(k) for k in kernel_sizes)
        if not sizes:
            raise ConfigError("need at least one kernel size")
        for k in sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        if channels_per_kernel < 1:
            raise ConfigError(f"channels_per_kernel must be positive, got {channels_per_kernel}")
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")
        if padding not in ("same", "valid") and not (
            isinstance(padding, tuple) and len(padding) == 2
        ):
            raise ConfigError(f"padding must be same, valid or a pair, got {padding!r}")
        self.kernel_sizes = sizes
        self.channels_per_kernel = channels_per_kernel
        self.stride = stride
        self.padding = padding

    def min_input_length(self):
        if self.padding == "valid":
            return max(self.kernel_sizes)
        if self.padding == "same":
            return 1
        pl, pr = self.padding
        return max(max(self.kernel_sizes) - pl - pr, 1)


class ConvStack:
    """Per kernel width: conv -> batch norm -> ReLU; outputs are joined
    channel-wise along the feature axis.  Batch norm and the activation
    can be switched off for reduced pipelines.
    """

    def __init__(self, in_channels: int, cfg: Conv1dParams, rng,
                 use_batchnorm=True, activation="relu"):
        if activation not in ("relu", "none"):
            raise ConfigError(f"activation must be relu or none, got {activation!r}")
        self.cfg = cfg
        self.in_channels = in_channels
        self.use_batchnorm = use_batchnorm
        self.activation = activation
        self.weights = []
        self.biases = []
        self.norms = []
        co = cfg.channels_per_kernel
        for k in cfg.kernel_sizes:
            bound = 1.0 / np.sqrt(k * in_channels)
            self.weights.append(
                Tensor(_uniform(rng, (k, in_channels, co), bound), requires_grad=True)
            )
            # A bias ahead of batch norm is cancelled by the mean
            # subtraction; the norm's shift takes its place.
            if use_batchnorm:
                self.biases.append(Tensor(np.zeros(co)))
            else:
                self.biases.append(Tensor(_uniform(rng, co, bound), requires_grad=True))
            self.norms.append(BatchNormParams(co) if use_batchnorm else None)

    def out_width(self):
        return len(self.cfg.kernel_sizes) * self.cfg.channels_per_kernel

    def forward(self, xs: Tensor, mode="train") -> Tensor:
        """Apply every kernel width to (T, in_channels); returns the
        (T_out, n_kernels*channels) channel-wise concatenation.
        """
        if xs.ndim != 2 or xs.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv input must be (T, {self.in_channels}), got {xs.shape}"
            )
        if xs.shape[0] < self.cfg.min_input_length():
            raise DimensionError(
                f"input length {xs.shape[0]} is shorter than the largest kernel "
                f"{max(self.cfg.kernel_sizes)} under {self.cfg.padding!r} padding"
            )
        outs = []
        for w, b, bn in zip(self.weights, self.biases, self.norms):
            y = conv1d(xs, w, b, stride=self.cfg.stride, padding=self.cfg.padding)
            if bn is not None:
                y = batchnorm_apply(bn, y, mode)
            if self.activation == "relu":
                y = T.relu(y)
            outs.append(y)
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=1)

    def parameters(self, prefix=""):
        out = {}
        for idx, (w, b, bn) in enumerate(zip(self.weights, self.biases, self.norms)):
            k = self.cfg.kernel_sizes[idx]
            out[f"{prefix}k{k}_w"] = w
            if bn is None:
                out[f"{prefix}k{k}_b"] = b
            else:
                out.update(bn.parameters(f"{prefix}k{k}_bn_"))
        return out

    def running_stats(self, prefix=""):
        """Batch-norm running statistics; state a checkpoint needs
        beyond the trainable parameters."""
        out = {}
        for idx, bn in enumerate(self.norms):
            if bn is None:
                continue
            k = self.cfg.kernel_sizes[idx]
            out[f"{prefix}k{k}_bn_mean"] = bn.running_mean
            out[f"{prefix}k{k}_bn_var"] = bn.running_var
        return out


class DenseParams:
    def __init__(self, in_width: int, out_width: int, rng):
        if in_width < 1 or out_width < 1:
            raise ConfigError(f"dense widths must be positive, got {in_width}, {out_width}")
        bound = 1.0 / np.sqrt(in_width)
        self.in_width = in_width
        self.out_width = out_width
        self.w = Tensor(_uniform(rng, (out_width, in_width), bound), requires_grad=True)
        self.b = Tensor(_uniform(rng, out_width, bound), requires_grad=True)

    def parameters(self, prefix=""):
        return {prefix + "w": self.w, prefix + "b": self.b}


def dense_forward(params: DenseParams, x: Tensor, activation="none") -> Tensor:
    """Affine map W x + b; ``x`` is one vector or a (rows, in_width)
    batch.  ``activation`` is "none" or "relu".
    """
    if activation not in ("none", "relu"):
        raise ConfigError(f"activation must be none or relu, got {activation!r}")
    vector = x.ndim == 1
    if vector:
        if x.shape != (params.in_width,):
            raise DimensionError(f"dense input must be ({params.in_width},), got {x.shape}")
        x2 = T.reshape(x, (1, params.in_width))
    else:
        if x.ndim != 2 or x.shape[1] != params.in_width:
            raise DimensionError(
                f"dense input must be (rows, {params.in_width}), got {x.shape}"
            )
        x2 = x
    y = T.add(T.matmul(x2, T.transpose(params.w)), T.reshape(params.b, (1, params.out_width)))
    if activation == "relu":
        y = T.relu(y)
    return T.reshape(y, (params.out_width,)) if vector else y


class DropoutSpec:
    def __init__(self, rate: float, mode="train"):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be train or eval, got {mode!r}")
        self.rate = float(rate)
        self.mode = mode


def dropout_apply(spec: DropoutSpec, x: Tensor, rng) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-rate) so the
    expectation is unchanged.  Eval mode and rate 0 return x untouched.
    """
    if spec.mode == "eval" or spec.rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= spec.rate) / (1.0 - spec.rate)
    return T.mul(x, Tensor(keep))


class BatchNormParams:
    def __init__(self, channels: int, momentum=0.9, eps=1e-5):
        if channels < 1:
            raise ConfigError(f"channel count must be positive, got {channels}")
        if eps <= 0:
            raise ConfigError(f"epsilon must be positive, got {eps}")
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def parameters(self, prefix=""):
        return {prefix + "scale": self.scale, prefix + "shift": self.shift}


def batchnorm_apply(params: BatchNormParams, x: Tensor, mode="train") -> Tensor:
    """Normalize each channel of an (N, channels) batch.

    Train mode standardizes by the batch mean and unbiased variance
    (floored at epsilon so constant channels stay finite) and folds the
    batch statistics into the running estimates; eval mode uses the
    running estimates.  A train batch of one row has no variance
    estimate and is rejected.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise DimensionError(
            f"batchnorm input must be (N, {params.channels}), got {x.shape}"
        )
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise ContractError("train-mode batchnorm needs at least 2 rows")
        mu = T.mean(x, axis=0, keepdims=True)
        centered = T.sub(x, mu)
        var = T.div(T.sum_(T.mul(centered, centered), axis=0, keepdims=True), n - 1)
        params.running_mean = (
            params.momentum * params.running_mean
            + (1.0 - params.momentum) * mu.data.reshape(-1)
        )
        params.running_var = (
            params.momentum * params.running_var
            + (1.0 - params.momentum) * var.data.reshape(-1)
        )
    else:
        mu = Tensor(params.running_mean.reshape(1, -1))
        centered = T.sub(x, mu)
        var = Tensor(params.running_var.reshape(1, -1))
    denom = T.sqrt(T.maximum_const(var, params.eps))
    normed = T.div(centered, denom)
    return T.add(
        T.mul(normed, T.reshape(params.scale, (1, params.channels))),
        T.reshape(params.shift, (1, params.channels)),
    )
