"""Neural layers on top of the tensor core.

Batch normalization keeps its running statistics in an explicit, copyable
`BatchNormState` value so that test-time statistics adaptation can replace
them from the outside. Running variance uses the biased (population)
convention: with that choice, eval-mode normalization against a batch's own
moments reproduces train-mode output exactly.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclasses.dataclass
class BatchNormState:
    """Per-channel normalization state. Operations return updated copies."""

    channels: int
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.channels <= 0:
            raise ContractError("BatchNormState: channels must be positive")
        if self.eps <= 0:
            raise ContractError("BatchNormState: eps must be positive")
        if not (0.0 < self.momentum <= 1.0):
            raise ContractError("BatchNormState: momentum must be in (0,1]")
        for name, buf in (("gamma", self.gamma.data), ("beta", self.beta.data),
                          ("running_mean", self.running_mean), ("running_var", self.running_var)):
            if buf.shape != (self.channels,):
                raise ContractError(f"BatchNormState: {name} must have shape ({self.channels},)")
        if np.any(self.running_var < 0):
            raise ContractError("BatchNormState: running_var must be non-negative")

    def with_stats(self, mean: np.ndarray, var: np.ndarray) -> "BatchNormState":
        return dataclasses.replace(self, running_mean=np.asarray(mean, dtype=np.float64).copy(),
                                   running_var=np.asarray(var, dtype=np.float64).copy())


def make_bn_state(channels: int, eps: float = 1e-5, momentum: float = 0.1) -> BatchNormState:
    return BatchNormState(
        channels=channels,
        gamma=Tensor(np.ones(channels), requires_grad=True),
        beta=Tensor(np.zeros(channels), requires_grad=True),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        eps=eps,
        momentum=momentum,
    )


def _check_bn_input(x: Tensor, s: BatchNormState) -> None:
    if x.data.ndim != 4:
        raise ContractError("batchnorm: expected NCHW input")
    if x.shape[1] != s.channels:
        raise ContractError(f"batchnorm: input has {x.shape[1]} channels, state has {s.channels}")


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over the N*H*W axis of an NCHW array."""
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm_train(x: Tensor, s: BatchNormState) -> tuple[Tensor, BatchNormState]:
    """Normalize by batch moments; returns output and exponentially updated state.

    Batch statistics participate in differentiation: gradients flow to x,
    gamma and beta through the mean/variance terms.
    """
    _check_bn_input(x, s)
    n, c, h, w = x.shape
    m = n * h * w
    if m < 2:
        raise ContractError(f"batchnorm_train: needs >=2 elements per channel, got {m}")

    xd = x.data
    mean, var = batch_moments(xd)
    inv_std = 1.0 / np.sqrt(var + s.eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gamma, beta = s.gamma, s.beta
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        dgamma = np.sum(g * xhat, axis=(0, 2, 3))
        dbeta = np.sum(g, axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        sum_dxhat = np.sum(dxhat, axis=(0, 2, 3))[None, :, None, None]
        sum_dxhat_xhat = np.sum(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
        dx = (inv_std[None, :, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return (dx, dgamma, dbeta)

    y = T._make(out, "batchnorm_train", (x, gamma, beta), bw)
    new_mean = (1.0 - s.momentum) * s.running_mean + s.momentum * mean
    new_var = (1.0 - s.momentum) * s.running_var + s.momentum * var
    return y, s.with_stats(new_mean, new_var)


def batchnorm_eval(x: Tensor, s: BatchNormState) -> Tensor:
    """Pure affine normalization against the running statistics."""
    _check_bn_input(x, s)
    gamma, beta = s.gamma, s.beta
    inv_std = 1.0 / np.sqrt(s.running_var + s.eps)
    scale = gamma.data * inv_std
    xhat = (x.data - s.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = scale[None, :, None, None] * x.data + (beta.data - scale * s.running_mean)[None, :, None, None]

    def bw(g):
        dgamma = np.sum(g * xhat, axis=(0, 2, 3))
        dbeta = np.sum(g, axis=(0, 2, 3))
        dx = g * scale[None, :, None, None]
        return (dx, dgamma, dbeta)

    return T._make(out, "batchnorm_eval", (x, gamma, beta), bw)


def se_gate(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, reduction: int) -> Tensor:
    """Squeeze-excitation channel gate.

    Squeeze is a global average pool; the excitation MLP is expressed as two
    1x1 convolutions (C -> C/reduction -> C) and its sigmoid output rescales
    each channel. |output| <= |input| componentwise since the gate is in (0,1).
    """
    if x.data.ndim != 4:
        raise ContractError("se_gate: expected NCHW input")
    c = x.shape[1]
    if c % reduction != 0:
        raise ContractError(f"se_gate: reduction {reduction} does not divide {c} channels")
    cr = c // reduction
    if w1.shape != (cr, c, 1, 1) or w2.shape != (c, cr, 1, 1):
        raise ContractError(f"se_gate: weight shapes {w1.shape}/{w2.shape} inconsistent with C={c}, r={reduction}")
    squeeze = T.global_avg(x)
    hidden = T.relu(T.conv2d(squeeze, w1, b1))
    gate = T.sigmoid(T.conv2d(hidden, w2, b2))
    return T.scale_channels(x, gate)
