"""Differentiable layers for the lattice CNN.

All image tensors are laid out (batch, channel, H, W); an unbatched
(C, H, W) input is accepted and returned unbatched.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidInputError
from .autograd import Tensor, add, as_tensor, make_result, mul, tanh

tanh_activation = tanh


def _batched(x: Tensor):
    if x.data.ndim == 3:
        return make_result(x.data[None], (x,), lambda g: (g[0],), "unsqueeze"), True
    if x.data.ndim != 4:
        raise InvalidInputError(f"expected a (B, C, H, W) or (C, H, W) tensor, got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor):
    return make_result(y.data[0], (y,), lambda g: (g[None],), "squeeze")


def _windows(x, k):
    # (B, C, H, W) -> (B, H, W, C, k, k) views of the circularly padded input
    p = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")
    win = sliding_window_view(padded, (k, k), axis=(2, 3))  # (B, C, H, W, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d_circular(x, kernels, bias) -> Tensor:
    """Cross-correlation with periodic wrap-around; spatial size is preserved."""
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    bias = as_tensor(bias)
    x, squeeze = _batched(x)
    c_out, c_in, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise InvalidInputError(f"kernel must be square with odd size, got {k}x{k2}")
    B, C, H, W = x.shape
    if C != c_in:
        raise InvalidInputError(f"input has {C} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise InvalidInputError(f"bias shape {bias.shape} does not match {c_out} output channels")

    cols = _windows(x.data, k).reshape(B * H * W, c_in * k * k)
    wmat = kernels.data.reshape(c_out, c_in * k * k)
    out = (cols @ wmat.T).reshape(B, H, W, c_out).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * H * W, c_out)
        gw = (gmat.T @ cols).reshape(kernels.shape)
        gb = g.sum(axis=(0, 2, 3))
        # input gradient: correlate the wrapped output grad with the flipped, transposed kernel
        flipped = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * k * k)
        gcols = _windows(g, k).reshape(B * H * W, c_out * k * k)
        gx = (gcols @ flipped.T).reshape(B, H, W, c_in).transpose(0, 3, 1, 2)
        return gx, gw, gb

    y = make_result(np.ascontiguousarray(out), (x, kernels, bias), back, "conv2d_circular")
    return _unbatch(y) if squeeze else y


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalise the channel vector at every lattice location, then apply a per-channel affine map."""
    x = as_tensor(x)
    x, squeeze = _batched(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    C = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gain.data[None, :, None, None]
    out = xhat * g4 + bias.data[None, :, None, None]

    def back(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gbias = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        gx = inv * (
            dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, ggain, gbias

    if C < 1:
        raise InvalidInputError("layer norm needs at least one channel")
    y = make_result(out, (x, gain, bias), back, "layer_norm")
    return _unbatch(y) if squeeze else y


def channel_dropout(x, p, training, rng=None) -> Tensor:
    """Zero whole channels with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not 0 <= p < 1:
        raise InvalidInputError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if rng is None:
        raise InvalidInputError("training-mode dropout needs an rng")
    shape = x.shape[:-2] + (1, 1)
    keep = (rng.random(shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ResidualBlock:
    """Pre-activation block: x + conv2(drop(tanh(LN2(conv1(tanh(LN1(x)))))))."""

    def __init__(self, channels, kernel=3, dropout_p=0.1, rng=None, dtype=np.float32, prefix="block"):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = channels * kernel * kernel
        self.dropout_p = dropout_p
        self.ln1_gain = Tensor(np.ones(channels, dtype), True, f"{prefix}.ln1.gain")
        self.ln1_bias = Tensor(np.zeros(channels, dtype), True, f"{prefix}.ln1.bias")
        self.conv1_w = Tensor(uniform_init(rng, (channels, channels, kernel, kernel), fan_in, dtype), True, f"{prefix}.conv1.weight")
        self.conv1_b = Tensor(np.zeros(channels, dtype), True, f"{prefix}.conv1.bias")
        self.ln2_gain = Tensor(np.ones(channels, dtype), True, f"{prefix}.ln2.gain")
        self.ln2_bias = Tensor(np.zeros(channels, dtype), True, f"{prefix}.ln2.bias")
        self.conv2_w = Tensor(uniform_init(rng, (channels, channels, kernel, kernel), fan_in, dtype), True, f"{prefix}.conv2.weight")
        self.conv2_b = Tensor(np.zeros(channels, dtype), True, f"{prefix}.conv2.bias")

    def parameters(self):
        return [
            self.ln1_gain, self.ln1_bias, self.conv1_w, self.conv1_b,
            self.ln2_gain, self.ln2_bias, self.conv2_w, self.conv2_b,
        ]

    def __call__(self, x, training=False, rng=None):
        h = tanh(layer_norm(x, self.ln1_gain, self.ln1_bias))
        h = conv2d_circular(h, self.conv1_w, self.conv1_b)
        h = tanh(layer_norm(h, self.ln2_gain, self.ln2_bias))
        h = channel_dropout(h, self.dropout_p, training, rng)
        h = conv2d_circular(h, self.conv2_w, self.conv2_b)
        return add(x, h)


def residual_block_forward(x, block: ResidualBlock, training=False, rng=None) -> Tensor:
    return block(x, training, rng)
