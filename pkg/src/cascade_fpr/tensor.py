"""Dense float64 numerics for the small patch classifier.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out
channels-last: a single image is ``(H, W, C)``, a batch is ``(N, H, W, C)``.
The functional ops (:func:`conv2d`, :func:`maxpool2`, :func:`relu`,
:func:`dense`, :func:`softmax_xent`) accept either form.  The layer classes
wrap those ops with the caches needed for reverse-mode differentiation and a
:class:`Network` records a tape of layer calls so :meth:`Network.backward`
can be chained after a forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "ShapeError",
    "TapeError",
    "conv2d",
    "conv2d_backward",
    "maxpool2",
    "maxpool2_backward",
    "relu",
    "dense",
    "softmax",
    "softmax_xent",
    "softmax_xent_batch",
    "Conv2D",
    "ReLU",
    "MaxPool2",
    "Flatten",
    "Dense",
    "Network",
    "SGD",
    "sgd_step",
    "LayerGrads",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised when ``backward`` is requested without a recorded forward pass."""


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    # columns ordered (di, dj, c) to match kernels.reshape(k*k*C, F)
    n, _, _, c = xp.shape
    s = xp.strides
    windows = as_strided(xp, (n, out_h, out_w, k, k, c), (s[0], s[1], s[2], s[1], s[2], s[3]),
                         writeable=False)
    return windows.reshape(n, out_h, out_w, k * k * c)


def _conv_geometry(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str):
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be k x k x C x F, got shape {kernels.shape}")
    k, k2, c_in, f = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernels expect {c_in}")
    if bias.shape != (f,):
        raise ShapeError(f"bias must have shape ({f},), got {bias.shape}")
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    h, w = x.shape[1], x.shape[2]
    out_h, out_w = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"{k}x{k} kernel does not fit a {h}x{w} input with {padding!r} padding")
    return k, f, pad, out_h, out_w


def conv2d(x, kernels, bias, padding: str = "same") -> np.ndarray:
    """2-D cross-correlation of ``x`` with ``kernels`` (``k x k x C x F``) plus ``bias``.

    ``padding="same"`` zero-pads by ``k // 2`` so spatial dims are preserved.
    """
    out, _ = _conv2d_forward(x, kernels, bias, padding)
    return out


def _conv2d_forward(x, kernels, bias, padding):
    xb, single = _as_batch(x, 4)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    k, f, pad, out_h, out_w = _conv_geometry(xb, kernels, bias, padding)
    xp = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xb
    cols = _im2col(xp, k, out_h, out_w)
    out = cols @ kernels.reshape(-1, f) + bias
    return (out[0] if single else out), cols


def conv2d_backward(grad_out, cols, x_shape, kernels, padding: str = "same", need_input: bool = True):
    """Gradients of :func:`conv2d` given the im2col matrix of the forward pass.

    Returns ``(grad_input, grad_kernels, grad_bias)`` for a batched input;
    ``grad_input`` is None when ``need_input`` is false.
    """
    k, _, c_in, f = kernels.shape
    pad = k // 2 if padding == "same" else 0
    g2 = grad_out.reshape(-1, f)
    grad_k = (cols.reshape(-1, k * k * c_in).T @ g2).reshape(kernels.shape)
    grad_b = g2.sum(axis=0)
    if not need_input:
        return None, grad_k, grad_b
    # input gradient = full correlation of grad_out with the flipped, channel-swapped kernels
    _, h, w, _ = x_shape
    q = k - 1 - pad
    gp = np.pad(grad_out, ((0, 0), (q, q), (q, q), (0, 0))) if q else grad_out
    flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c_in)
    dx = _im2col(gp, k, h, w) @ flipped
    return dx, grad_k, grad_b


# --------------------------------------------------------------------------
# pooling / activations / affine


def maxpool2(x) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and, per output element, the index (0..3,
    row-major) of the winning element within its window; ties go to the
    first index.
    """
    xb, single = _as_batch(x, 4)
    h, w = xb.shape[1], xb.shape[2]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {h}x{w}")
    q = (xb[:, 0::2, 0::2], xb[:, 0::2, 1::2], xb[:, 1::2, 0::2], xb[:, 1::2, 1::2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    arg = np.where(q[0] == out, 0, np.where(q[1] == out, 1, np.where(q[2] == out, 2, 3)))
    if single:
        return out[0], arg[0]
    return out, arg


def maxpool2_backward(grad_out, argmax) -> np.ndarray:
    n, ho, wo, c = grad_out.shape
    g = np.zeros((n, 2 * ho, 2 * wo, c))
    g[:, 0::2, 0::2] = np.where(argmax == 0, grad_out, 0.0)
    g[:, 0::2, 1::2] = np.where(argmax == 1, grad_out, 0.0)
    g[:, 1::2, 0::2] = np.where(argmax == 2, grad_out, 0.0)
    g[:, 1::2, 1::2] = np.where(argmax == 3, grad_out, 0.0)
    return g


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def dense(x, weights, bias) -> np.ndarray:
    """Affine map ``weights @ x + bias``; ``weights`` is ``(out, in)``.

    ``x`` may be a vector or an ``(N, in)`` batch.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"cannot apply {weights.shape} weights to input of shape {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias must have shape ({weights.shape[0]},), got {bias.shape}")
    return x @ weights.T + bias


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of a single logit vector against an integer label.

    Returns ``(loss, d loss / d logits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = float(log_norm - shifted[label])
    grad = np.exp(shifted - log_norm)
    grad[label] -= 1.0
    return loss, grad


def softmax_xent_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_norm
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# --------------------------------------------------------------------------
# layers


class Layer:
    """Base layer: ``params`` maps names to arrays, ``grads`` mirrors it after backward."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding: str = "same"):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.padding = kernel_size, padding
        self.params["kernels"] = np.zeros((kernel_size, kernel_size, in_channels, out_channels))
        self.params["bias"] = np.zeros(out_channels)

    @property
    def fan_in(self) -> int:
        return self.kernel_size * self.kernel_size * self.in_channels

    def forward(self, x):
        out, cols = _conv2d_forward(x, self.params["kernels"], self.params["bias"], self.padding)
        self._cache = (cols, x.shape)
        return out

    def backward(self, grad, need_input: bool = True):
        cols, x_shape = self._cache
        dx, gk, gb = conv2d_backward(grad, cols, x_shape, self.params["kernels"], self.padding,
                                     need_input)
        self.grads = {"kernels": gk, "bias": gb}
        return dx

    def describe(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "k": self.kernel_size, "padding": self.padding}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        out = np.maximum(x, 0.0)
        self._cache = out > 0
        return out

    def backward(self, grad):
        return grad * self._cache


class MaxPool2(Layer):
    kind = "pool"

    def forward(self, x):
        out, arg = maxpool2(x)
        self._cache = arg
        return out

    def backward(self, grad):
        return maxpool2_backward(grad, self._cache)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cache)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params["weights"] = np.zeros((out_features, in_features))
        self.params["bias"] = np.zeros(out_features)

    @property
    def fan_in(self) -> int:
        return self.in_features

    def forward(self, x):
        self._cache = x
        return dense(x, self.params["weights"], self.params["bias"])

    def backward(self, grad):
        x = self._cache
        self.grads = {"weights": grad.T @ x, "bias": grad.sum(axis=0)}
        return grad @ self.params["weights"]

    def describe(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


@dataclass
class LayerGrads:
    """Per-layer parameter gradients plus the gradient w.r.t. the network input."""

    layers: list[dict[str, np.ndarray]]
    input: np.ndarray | None = None

    def flat(self) -> list[np.ndarray]:
        return [g[name] for g in self.layers for name in sorted(g)]


@dataclass
class Network:
    """Sequential stack of layers operating on batched NHWC input."""

    layers: list[Layer]
    _taped: bool = field(default=False, repr=False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        self._taped = True
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray, input_grad: bool = True) -> LayerGrads:
        """Reverse pass; with ``input_grad=False`` the first layer skips its input gradient
        (``LayerGrads.input`` is then None)."""
        if not self._taped:
            raise TapeError("backward() called without a recorded forward pass")
        first = self.layers[0] if self.layers else None
        for layer in reversed(self.layers):
            if layer is first and not input_grad and isinstance(layer, Conv2D):
                grad = layer.backward(grad, need_input=False)
            else:
                grad = layer.backward(grad)
        self._taped = False
        for layer in self.layers:
            layer._cache = None
        return LayerGrads([dict(layer.grads) if layer.params else {} for layer in self.layers],
                          input=grad)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order (per layer, names sorted)."""
        return [layer.params[name] for layer in self.layers for name in sorted(layer.params)]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[name] for layer in self.layers for name in sorted(layer.params)]


class SGD:
    """Momentum SGD: ``v <- momentum * v - lr * g``; ``p <- p + v``."""

    def __init__(self, params: Sequence[np.ndarray], learning_rate: float = 0.01,
                 momentum: float = 0.9):
        if not learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Iterable[np.ndarray]) -> None:
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient; step refused")
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * g
            p += v


def sgd_step(params, grads, learning_rate: float, momentum: float = 0.0, velocity=None):
    """Functional form of one momentum-SGD step; updates ``params`` (and
    ``velocity`` when given) in place and returns ``params``."""
    opt = SGD(params, learning_rate, momentum)
    if velocity is not None:
        opt.velocity = list(velocity)
    opt.step(grads)
    return params
