"""Forward ops with tape recording: convolution, batch norm, ReLU6 and the
depthwise-separable block (3x3 depthwise -> BN -> ReLU6 -> 1x1 -> BN -> ReLU6).
"""

from dataclasses import dataclass, field

import numpy as np

from edgessd.nn import kernels
from edgessd.nn.tape import GradientTape

BN_EPS = 1e-3
BN_MOMENTUM = 0.99

CONV_KINDS = ("standard", "depthwise", "pointwise")


class ShapeError(ValueError):
    """Raised when tensor or weight dimensions disagree with a layer spec."""


@dataclass(frozen=True)
class ConvSpec:
    kind: str
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.kind!r}")
        if min(self.kernel_size, self.in_channels, self.out_channels) < 1:
            raise ValueError(f"kernel size and channel counts must be positive: {self}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"negative padding {self.padding}")
        if self.kind == "pointwise" and self.kernel_size != 1:
            raise ValueError("pointwise conv requires kernel_size 1")
        if self.kind == "depthwise" and self.out_channels != self.in_channels:
            raise ValueError("depthwise conv requires out_channels == in_channels")

    @property
    def weight_shape(self) -> tuple:
        k = self.kernel_size
        if self.kind == "depthwise":
            return (self.in_channels, k, k)
        return (self.out_channels, self.in_channels, k, k)

    def output_hw(self, h: int, w: int) -> tuple:
        return (
            kernels.out_size(h, self.kernel_size, self.stride, self.padding),
            kernels.out_size(w, self.kernel_size, self.stride, self.padding),
        )


def same_padding(kernel_size: int) -> int:
    return kernel_size // 2


def as_float64(x) -> np.ndarray:
    """``x`` as float64, returning the very same object when no cast is needed.

    The tape tracks arrays by identity, and ``np.asarray(x, dtype=...)`` may
    hand back a fresh view even when the dtype already matches.
    """
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def check_tensor4(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (batch, channels, height, width), got shape {x.shape}")
    if x.size == 0:
        raise ShapeError(f"{name}: zero-size tensor {x.shape}")
    if x.dtype != np.float64:
        x = x.astype(np.float64)
    return x


def conv2d_forward(x, weights, spec: ConvSpec, tape: GradientTape | None = None, bias=None):
    """Apply one convolution described by ``spec``.

    Args:
        x: ``(B, M, H, W)`` input.
        weights: ``spec.weight_shape`` array.
        spec: layer description.
        tape: when given, the op is recorded for :func:`backward`.
        bias: optional per-output-channel offset.

    Returns:
        ``(B, N, Ho, Wo)`` with ``Ho = floor((H + 2 pad - K) / stride) + 1``.
    """
    x = check_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ShapeError(f"weights shape {tuple(weights.shape)} != expected {spec.weight_shape} for {spec.kind} conv")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"{spec.kind} conv with kernel {spec.kernel_size} does not fit input {x.shape[2]}x{x.shape[3]}")
    if bias is not None and np.shape(bias) != (spec.out_channels,):
        raise ShapeError(f"bias shape {np.shape(bias)} != ({spec.out_channels},)")

    s, p = spec.stride, spec.padding
    if spec.kind == "depthwise":
        y = kernels.depthwise_forward(x, weights, s, p)
    else:
        y = kernels.conv_forward(x, weights, s, p)
    if bias is not None:
        y += bias[None, :, None, None]

    if tape is not None:
        def grad_fn(gy):
            if spec.kind == "depthwise":
                gx, gw = kernels.depthwise_backward(gy, x, weights, s, p)
            else:
                gx, gw = kernels.conv_backward(gy, x, weights, s, p)
            gb = None if bias is None else gy.sum(axis=(0, 2, 3))
            return gx, gw, gb

        tape.record(f"conv2d[{spec.kind}]", y, (x, weights, bias), grad_fn)
    return y


@dataclass
class BatchNormParams:
    """Per-channel scale/shift plus running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels: int) -> "BatchNormParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))


def batch_norm(x, bn: BatchNormParams, training: bool = False, tape: GradientTape | None = None, update_stats: bool = True):
    """Normalize per channel; training mode uses batch statistics and
    (optionally) folds them into the running averages."""
    x = check_tensor4(x)
    c = x.shape[1]
    if bn.gamma.shape != (c,):
        raise ShapeError(f"batch norm has {bn.gamma.shape[0]} channels, input has {c}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            bn.running_mean[:] = bn.momentum * bn.running_mean + (1 - bn.momentum) * mean
            bn.running_var[:] = bn.momentum * bn.running_var + (1 - bn.momentum) * var
    else:
        mean, var = bn.running_mean, bn.running_var
    denom = var + bn.eps
    if np.any(denom <= 0):
        raise ValueError("batch norm variance + eps must be positive")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * bn.gamma[None, :, None, None] + bn.beta[None, :, None, None]

    if tape is not None:
        gamma = bn.gamma

        def grad_fn(gy):
            ggamma = (gy * xhat).sum(axis=(0, 2, 3))
            gbeta = gy.sum(axis=(0, 2, 3))
            dxhat = gy * gamma[None, :, None, None]
            if training:
                n = x.shape[0] * x.shape[2] * x.shape[3]
                gx = (inv_std / n)[None, :, None, None] * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            else:
                gx = dxhat * inv_std[None, :, None, None]
            return gx, ggamma, gbeta

        tape.record("batch_norm", y, (x, bn.gamma, bn.beta), grad_fn)
    return y


def relu6(x, tape: GradientTape | None = None):
    x = as_float64(x)
    y = np.minimum(np.maximum(x, 0.0), 6.0)
    if tape is not None:
        # subgradient 0 at the kinks x = 0 and x = 6
        tape.record("relu6", y, (x,), lambda gy: (gy * ((x > 0.0) & (x < 6.0)),))
    return y


def relu6_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return ((x > 0.0) & (x < 6.0)).astype(np.float64)


@dataclass
class DSBlockParams:
    dw_weight: np.ndarray  # (M, 3, 3)
    dw_bn: BatchNormParams
    pw_weight: np.ndarray  # (N, M, 1, 1)
    pw_bn: BatchNormParams
    stride: int = 1
    kernel_size: int = 3

    @property
    def in_channels(self) -> int:
        return self.dw_weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.pw_weight.shape[0]

    def specs(self) -> tuple:
        m, n, k = self.in_channels, self.out_channels, self.kernel_size
        dw = ConvSpec("depthwise", k, m, m, self.stride, same_padding(k))
        pw = ConvSpec("pointwise", 1, m, n, 1, 0)
        return dw, pw

    def arrays(self, prefix: str = "") -> dict:
        return {
            prefix + "dw.weight": self.dw_weight,
            prefix + "dw.gamma": self.dw_bn.gamma,
            prefix + "dw.beta": self.dw_bn.beta,
            prefix + "pw.weight": self.pw_weight,
            prefix + "pw.gamma": self.pw_bn.gamma,
            prefix + "pw.beta": self.pw_bn.beta,
        }


def ds_block_forward(x, params: DSBlockParams, tape: GradientTape | None = None, training: bool | None = None):
    """Depthwise-separable block. Training-mode BN is used when a tape is given,
    unless ``training`` says otherwise."""
    if training is None:
        training = tape is not None
    dw_spec, pw_spec = params.specs()
    h = conv2d_forward(x, params.dw_weight, dw_spec, tape)
    h = batch_norm(h, params.dw_bn, training, tape)
    h = relu6(h, tape)
    h = conv2d_forward(h, params.pw_weight, pw_spec, tape)
    h = batch_norm(h, params.pw_bn, training, tape)
    return relu6(h, tape)
