"""Small dense neural-network kernels in float64.

Layers are stateless: parameters live in a flat list owned by the caller, and
each layer's ``forward`` returns a cache that its ``backward`` consumes.  There
is no autograd graph; ``Sequential`` chains the hand-written backward passes.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "linear_forward",
    "linear_backward",
    "conv2d_forward",
    "conv2d_backward",
    "relu",
    "relu_backward",
    "softmax",
    "cross_entropy",
    "AdamConfig",
    "AdamState",
    "adam_init",
    "adam_step",
    "Linear",
    "Conv2d",
    "ReLU",
    "Flatten",
    "Sequential",
    "uniform_init",
]


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- functional kernels ------------------------------------------------------

def linear_forward(x, W, b):
    """``y = x @ W.T + b`` for x (batch, in), W (out, in), b (out,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def linear_backward(x, W, grad_out):
    return grad_out @ W, grad_out.T @ x, grad_out.sum(axis=0)


def _im2col(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw), (B, Ho, Wo)


def conv2d_forward(x, K, b=None, stride=1):
    """Valid cross-correlation. x (B, Cin, H, W), K (Cout, Cin, kH, kW)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or K.ndim != 4 or x.shape[1] != K.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape}, K {K.shape}")
    _, _, H, W = x.shape
    c_out, _, kh, kw = K.shape
    if H < kh or W < kw:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel larger than {H}x{W} input")
    cols, (B, Ho, Wo) = _im2col(x, kh, kw, stride)
    y = cols @ K.reshape(c_out, -1).T
    if b is not None:
        y = y + b
    return y.reshape(B, Ho, Wo, c_out).transpose(0, 3, 1, 2)


def conv2d_backward(x, K, grad_out, stride=1):
    c_out, c_in, kh, kw = K.shape
    cols, (B, Ho, Wo) = _im2col(x, kh, kw, stride)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dK = (g.T @ cols).reshape(K.shape)
    db = g.sum(axis=0)
    dcols = (g @ K.reshape(c_out, -1)).reshape(B, Ho, Wo, c_in, kh, kw)
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dx, dK, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


# -- Adam --------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    config: AdamConfig
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, config: AdamConfig | None = None) -> AdamState:
    config = config or AdamConfig()
    return AdamState(config, 0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("params and grads do not line up")
    c = state.config
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = c.beta1 * m + (1 - c.beta1) * g
        v = c.beta2 * v + (1 - c.beta2) * g * g
        m_hat = m / (1 - c.beta1 ** t)
        v_hat = v / (1 - c.beta2 ** t)
        new_p.append(p - c.lr * m_hat / (np.sqrt(v_hat) + c.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(c, t, new_m, new_v)


# -- layers ------------------------------------------------------------------

class Linear:
    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out

    n_params = 2

    def init(self, rng):
        return [uniform_init(rng, (self.n_out, self.n_in), self.n_in), uniform_init(rng, (self.n_out,), self.n_in)]

    def forward(self, params, x):
        W, b = params
        return linear_forward(x, W, b), x

    def backward(self, params, cache, g):
        dx, dW, db = linear_backward(cache, params[0], g)
        return dx, [dW, db]

    def __repr__(self):
        return f"Linear({self.n_in}, {self.n_out})"


class Conv2d:
    def __init__(self, c_in, c_out, kernel=(2, 2), stride=1):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, tuple(kernel), stride

    n_params = 2

    def init(self, rng):
        fan_in = self.c_in * self.kernel[0] * self.kernel[1]
        return [uniform_init(rng, (self.c_out, self.c_in, *self.kernel), fan_in), uniform_init(rng, (self.c_out,), fan_in)]

    def forward(self, params, x):
        K, b = params
        return conv2d_forward(x, K, b, self.stride), x

    def backward(self, params, cache, g):
        dx, dK, db = conv2d_backward(cache, params[0], g, self.stride)
        return dx, [dK, db]

    def __repr__(self):
        return f"Conv2d({self.c_in}, {self.c_out}, kernel={self.kernel}, stride={self.stride})"


class ReLU:
    n_params = 0

    def init(self, rng):
        return []

    def forward(self, params, x):
        return relu(x), x

    def backward(self, params, cache, g):
        return relu_backward(cache, g), []

    def __repr__(self):
        return "ReLU()"


class Flatten:
    n_params = 0

    def init(self, rng):
        return []

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, g):
        return g.reshape(cache), []

    def __repr__(self):
        return "Flatten()"


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def init(self, rng) -> list:
        params = []
        for layer in self.layers:
            params.extend(layer.init(rng))
        return params

    def _split(self, params):
        out, i = [], 0
        for layer in self.layers:
            out.append(params[i:i + layer.n_params])
            i += layer.n_params
        if i != len(params):
            raise ShapeError(f"expected {i} parameter arrays, got {len(params)}")
        return out

    def forward(self, params, x):
        caches = []
        for layer, p in zip(self.layers, self._split(params)):
            x, cache = layer.forward(p, x)
            caches.append(cache)
        return x, caches

    def predict(self, params, x):
        return self.forward(params, x)[0]

    def backward(self, params, caches, grad_out):
        """Gradients w.r.t. every parameter array, in ``params`` order."""
        grads_per_layer = []
        g = grad_out
        for layer, p, cache in reversed(list(zip(self.layers, self._split(params), caches))):
            g, grads = layer.backward(p, cache, g)
            grads_per_layer.append(grads)
        out = []
        for grads in reversed(grads_per_layer):
            out.extend(grads)
        return out

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"
