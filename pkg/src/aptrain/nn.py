"""Dense/conv layer stack with hand-written backprop over quantized weights.

Weights of a quantized layer exist only as k-bit codes plus affine params.
Forward and backward both read ``dequantize(weights)``; the SGD step proposes
a real-valued move and immediately re-codes it onto the k-bit grid, so no
float copy of the weights survives between iterations.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .quantizer import (
    QuantizedTensor, dequantize, fit_params, quantize_fit,
    requantize, round_half_away,
)

ROUNDING_MODES = ("nearest", "floor")


class DivergenceError(ArithmeticError):
    """Raised when gradients or the loss stop being finite."""


def _check_2d(x, inner, what):
    if x.ndim != 2 or x.shape[1] != inner:
        raise ValueError(f"{what}: expected (batch, {inner}), got {x.shape}")


# ---------------------------------------------------------------------------
# stateless kernels
# ---------------------------------------------------------------------------

def dense_forward(w, b, x):
    """``y = x @ w.T + b`` for a batch ``x`` of shape (B, in)."""
    _check_2d(x, w.shape[1], "dense input")
    return x @ w.T + b


def dense_backward(w, x, grad_y):
    _check_2d(x, w.shape[1], "dense input")
    _check_2d(grad_y, w.shape[0], "dense grad_y")
    if grad_y.shape[0] != x.shape[0]:
        raise ValueError("dense: batch size mismatch between x and grad_y")
    return grad_y @ w, grad_y.T @ x, grad_y.sum(axis=0)


def _im2col(x, kh, kw):
    # (B, C, H, W) -> (B*H*W, C*kh*kw) with zero "same" padding, stride 1
    B, C, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, H, W, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * kh * kw)


def _check_conv(w, x):
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv input: expected (B, {w.shape[1]}, H, W), got {x.shape}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ValueError("same padding needs odd kernel sizes")


def conv2d_forward(w, b, x):
    """Stride-1 cross-correlation with zero same-padding, NCHW layout."""
    _check_conv(w, x)
    B, _, H, W = x.shape
    cout = w.shape[0]
    y = _im2col(x, w.shape[2], w.shape[3]) @ w.reshape(cout, -1).T + b
    return y.reshape(B, H, W, cout).transpose(0, 3, 1, 2)


def conv2d_backward(w, x, grad_y):
    _check_conv(w, x)
    B, C, H, W = x.shape
    cout, _, kh, kw = w.shape
    if grad_y.shape != (B, cout, H, W):
        raise ValueError(f"conv grad_y: expected {(B, cout, H, W)}, got {grad_y.shape}")
    gy = grad_y.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
    grad_w = (gy.T @ _im2col(x, kh, kw)).reshape(w.shape)
    grad_b = gy.sum(axis=0)

    gcols = (gy @ w.reshape(cout, -1)).reshape(B, H, W, C, kh, kw)
    ph, pw = kh // 2, kw // 2
    gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + H, j:j + W] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, ph:ph + H, pw:pw + W], grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_y):
    return np.where(x > 0, grad_y, 0.0)


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels: expected shape ({B},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label out of range [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / B


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class QuantLayer:
    """State of one weight-bearing layer.

    ``bitwidth=None`` builds an unquantized fp32-reference layer; it keeps
    real weights and is charged as 32-bit by the cost model.
    """

    kind = "param"

    def __init__(self, w, b, bitwidth=6, mac_count=0):
        w = np.asarray(w, dtype=np.float64)
        self.bias = np.asarray(b, dtype=np.float64).copy()
        if bitwidth is None:
            self.weights = None
            self._w_real = w.copy()
        else:
            self.weights = quantize_fit(w, bitwidth)
            self._w_real = None
        self.momentum_buf = np.zeros(w.shape)
        self.bias_buf = np.zeros(self.bias.shape)
        self.gavg_ema = None
        self.mac_count = int(mac_count)
        self.grad_w = None
        self.grad_b = None
        self._x = None

    @property
    def quantized(self) -> bool:
        return self.weights is not None

    @property
    def bitwidth(self) -> int:
        return self.weights.bitwidth if self.quantized else 32

    @property
    def weight_shape(self) -> tuple:
        return self.weights.shape if self.quantized else self._w_real.shape

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def bias_count(self) -> int:
        return self.bias.size

    def weight_values(self) -> np.ndarray:
        return dequantize(self.weights) if self.quantized else self._w_real

    def epsilon(self) -> float:
        if self.quantized:
            return self.weights.params.scale
        return fit_params(self._w_real, 32).scale

    def set_bitwidth(self, k: int):
        """Re-code the weights at ``k`` bits; the stale Gavg average is dropped."""
        if not self.quantized:
            raise ValueError("fp32 reference layers have no bitwidth to change")
        if k != self.bitwidth:
            self.weights = requantize(self.weights, k)
            self.gavg_ema = None

    def forward(self, x):
        self._x = x
        return self._forward(self.weight_values(), x)

    def backward(self, grad_y):
        grad_x, self.grad_w, self.grad_b = self._backward(self.weight_values(), self._x, grad_y)
        return grad_x


class Dense(QuantLayer):
    kind = "dense"

    def __init__(self, w, b, bitwidth=6):
        w = np.asarray(w)
        super().__init__(w, b, bitwidth, mac_count=w.shape[0] * w.shape[1])

    def _forward(self, w, x):
        return dense_forward(w, self.bias, x)

    def _backward(self, w, x, grad_y):
        return dense_backward(w, x, grad_y)


class Conv2d(QuantLayer):
    kind = "conv2d"

    def __init__(self, w, b, in_hw, bitwidth=6):
        w = np.asarray(w)
        H, W = in_hw
        super().__init__(w, b, bitwidth, mac_count=w.size * H * W)

    def _forward(self, w, x):
        return conv2d_forward(w, self.bias, x)

    def _backward(self, w, x, grad_y):
        return conv2d_backward(w, x, grad_y)


class ReLU:
    kind = "relu"

    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, grad_y):
        return relu_backward(self._x, grad_y)


class Reshape:
    """Reshape each sample; ``shape`` excludes the batch axis."""

    kind = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad_y):
        return grad_y.reshape(self._in_shape)


# ---------------------------------------------------------------------------
# update rule
# ---------------------------------------------------------------------------

def sgd_step_quantized(layer: QuantLayer, grad_w, grad_b, lr, momentum=0.9,
                       weight_decay=1e-4, rounding="nearest"):
    """SGD with momentum whose weight step is snapped onto the layer's k-bit grid.

    ``nearest`` rounds the step to the closest whole number of grid steps, so
    moves smaller than eps/2 vanish. ``floor`` truncates the step magnitude to
    whole grid steps, so moves smaller than eps vanish. When the moved codes
    no longer span exactly ``[0, 2**k - 1]`` the grid is refit to the new range.
    """
    if rounding not in ROUNDING_MODES:
        raise ValueError(f"rounding must be one of {ROUNDING_MODES}, got {rounding!r}")
    if not lr > 0:
        raise ValueError("lr must be positive")
    grad_w = np.asarray(grad_w, dtype=np.float64)
    grad_b = np.asarray(grad_b, dtype=np.float64)
    if grad_w.shape != layer.weight_shape or grad_b.shape != layer.bias.shape:
        raise ValueError("gradient shape does not match layer")
    if not (np.all(np.isfinite(grad_w)) and np.all(np.isfinite(grad_b))):
        raise DivergenceError("gradient blow-up")

    w = layer.weight_values()
    layer.momentum_buf = momentum * layer.momentum_buf + grad_w + weight_decay * w
    layer.bias_buf = momentum * layer.bias_buf + grad_b + weight_decay * layer.bias
    layer.bias = layer.bias - lr * layer.bias_buf
    step = lr * layer.momentum_buf

    if not layer.quantized:
        layer._w_real = w - step
        return layer

    q = layer.weights
    S, Z, qmax = q.params.scale, q.params.zero_point, q.params.qmax
    if rounding == "nearest":
        delta = round_half_away(step / S)
    else:
        delta = np.sign(step) * np.floor(np.abs(step) / S)
    if not np.any(delta):
        return layer  # underflow: every proposed move is below resolution
    codes = q.codes - delta.astype(np.int64)
    if codes.min() == 0 and codes.max() == qmax:
        layer.weights = QuantizedTensor(codes, q.params)
    else:
        layer.weights = quantize_fit(S * (codes - Z).astype(np.float64), q.bitwidth)
    return layer


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """Ordered layer list ending in an implicit softmax cross-entropy loss."""

    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def param_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, QuantLayer)]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def loss_and_grads(self, x, y):
        loss, grad = softmax_xent(self.forward(x), y)
        self.backward(grad)
        return loss

    def predict(self, x, batch_size=1024):
        out = [self.forward(x[i:i + batch_size]).argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def bitwidths(self) -> list:
        return [l.bitwidth for l in self.param_layers]


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_mlp(sizes, bitwidth=6, seed=0):
    """Fully connected ReLU net, e.g. ``sizes=(784, 128, 10)``."""
    rng = np.random.default_rng(seed)
    layers = [Reshape((sizes[0],))]
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i:
            layers.append(ReLU())
        layers.append(Dense(_he(rng, (n_out, n_in), n_in), np.zeros(n_out), bitwidth))
    return Network(layers)


def build_cnn(in_shape, classes, channels=8, kernel=3, bitwidth=6, seed=0):
    """conv(channels @ kernel x kernel) -> relu -> dense, for (C, H, W) inputs."""
    rng = np.random.default_rng(seed)
    C, H, W = in_shape
    fan = C * kernel * kernel
    conv = Conv2d(_he(rng, (channels, C, kernel, kernel), fan), np.zeros(channels),
                  (H, W), bitwidth)
    n_flat = channels * H * W
    dense = Dense(_he(rng, (classes, n_flat), n_flat), np.zeros(classes), bitwidth)
    return Network([Reshape(in_shape), conv, ReLU(), Reshape((n_flat,)), dense])


def build_network(arch, in_shape, classes, bitwidth=6, seed=0, hidden=128):
    """Named architectures: ``linear``, ``mlp`` and ``cnn``."""
    n_in = int(np.prod(in_shape))
    if arch == "linear":
        return build_mlp((n_in, classes), bitwidth, seed)
    if arch == "mlp":
        return build_mlp((n_in, hidden, classes), bitwidth, seed)
    if arch == "cnn":
        shape = tuple(in_shape) if len(in_shape) == 3 else (1,) + tuple(in_shape)
        if len(shape) != 3:
            raise ValueError(f"cnn needs image inputs, got sample shape {in_shape}")
        return build_cnn(shape, classes, bitwidth=bitwidth, seed=seed)
    raise ValueError(f"unknown architecture {arch!r}")
