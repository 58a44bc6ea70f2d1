"""Small numpy network kernel: batched forward/backward, Adam, Gumbel-softmax.

Everything runs in float64.  Layers follow one convention:

    y, cache = layer.forward(x)           # x is always batched, (B, ...)
    dparams, dx = layer.backward(cache, dy, with_params=True)

dparams lines up with layer.params (possibly empty).  A Sequential chains
layers and returns a tape (list of caches) so the caller can run backward
later; we must remember everything the backward pass needs.
"""

import math
from dataclasses import dataclass, field

import numpy as np


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    # split by sign to keep exp() away from overflow
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _act_forward(name, z):
    if name == "relu":
        return relu(z)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name, z, y, dy):
    if name == "relu":
        return dy * (z > 0)
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    if name == "identity":
        return dy
    raise ValueError(f"unknown activation {name!r}")


class Dense:
    """Affine layer x @ w + b with a pointwise activation."""

    def __init__(self, w, b, activation="relu"):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.activation = activation

    @property
    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays

    def forward(self, x):
        z = x @ self.w + self.b
        y = _act_forward(self.activation, z)
        return y, (x, z, y)

    def backward(self, cache, dy, with_params=True):
        x, z, y = cache
        dz = _act_backward(self.activation, z, y, dy)
        dx = dz @ self.w.T
        if not with_params:
            return [], dx
        return [x.T @ dz, dz.sum(axis=0)], dx

    def slice_cache(self, cache, rows):
        x, z, y = cache
        return x[rows], z[rows], y[rows]


class Conv2d:
    """3x3-style convolution (stride 1, zero padding) via im2col + one GEMM."""

    def __init__(self, w, b, pad=1, activation="relu"):
        self.w = np.asarray(w, dtype=np.float64)  # (out_c, in_c, kh, kw)
        self.b = np.asarray(b, dtype=np.float64)
        self.pad = pad
        self.activation = activation

    @property
    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays

    def _cols(self, x):
        out_c, in_c, kh, kw = self.w.shape
        b, c, h, w = x.shape
        oh = h + 2 * self.pad - kh + 1
        ow = w + 2 * self.pad - kw + 1
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        cols = np.empty((b, c, kh, kw, oh * ow))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j, :] = xp[:, :, i:i + oh, j:j + ow].reshape(b, c, oh * ow)
        return cols.reshape(b, c * kh * kw, oh * ow), (oh, ow)

    def forward(self, x):
        out_c = self.w.shape[0]
        b = x.shape[0]
        cols, (oh, ow) = self._cols(x)
        wmat = self.w.reshape(out_c, -1)
        cols2 = cols.transpose(1, 0, 2).reshape(wmat.shape[1], b * oh * ow)
        z = (wmat @ cols2).reshape(out_c, b, oh, ow).transpose(1, 0, 2, 3)
        z = z + self.b[None, :, None, None]
        y = _act_forward(self.activation, z)
        return y, (x.shape, cols2, z, y)

    def backward(self, cache, dy, with_params=True):
        xshape, cols2, z, y = cache
        out_c, in_c, kh, kw = self.w.shape
        b, c, h, w = xshape
        oh = h + 2 * self.pad - kh + 1
        ow = w + 2 * self.pad - kw + 1
        dz = _act_backward(self.activation, z, y, dy)
        dz2 = dz.transpose(1, 0, 2, 3).reshape(out_c, b * oh * ow)
        wmat = self.w.reshape(out_c, -1)
        dcols2 = wmat.T @ dz2
        dcols = dcols2.reshape(c, kh, kw, b, oh * ow).transpose(3, 0, 1, 2, 4)
        gxp = np.zeros((b, c, h + 2 * self.pad, w + 2 * self.pad))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, i, j, :].reshape(b, c, oh, ow)
        dx = gxp[:, :, self.pad:self.pad + h, self.pad:self.pad + w]
        if not with_params:
            return [], dx
        dw = (dz2 @ cols2.T).reshape(self.w.shape)
        db = dz2.sum(axis=1)
        return [dw, db], dx

    def slice_cache(self, cache, rows):
        xshape, cols2, z, y = cache
        b = xshape[0]
        ckk = cols2.shape[0]
        sub = cols2.reshape(ckk, b, -1)[:, rows, :]
        sub = sub.reshape(ckk, -1)
        return (len(rows), *xshape[1:]), sub, z[rows], y[rows]


class AvgPool2d:
    def __init__(self, k=2):
        self.k = k

    @property
    def params(self):
        return []

    def set_params(self, arrays):
        pass

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.k
        y = x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, cache, dy, with_params=True):
        k = self.k
        dx = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
        return [], dx

    def slice_cache(self, cache, rows):
        return (len(rows), *cache[1:])


class Flatten:
    @property
    def params(self):
        return []

    def set_params(self, arrays):
        pass

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy, with_params=True):
        return [], dy.reshape(cache)

    def slice_cache(self, cache, rows):
        return (len(rows), *cache[1:])


class Sequential:
    def __init__(self, layers):
        self.layers = layers

    @property
    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    def set_params(self, arrays):
        i = 0
        for layer in self.layers:
            n = len(layer.params)
            layer.set_params(arrays[i:i + n])
            i += n

    def forward(self, x):
        tape = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            tape.append(cache)
        return x, tape

    def backward(self, tape, dy, with_params=True):
        grads = []
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            dparams, dy = layer.backward(cache, dy, with_params)
            grads = dparams + grads
        return grads, dy

    def slice_tape(self, tape, rows):
        """Restrict a batched tape to a subset of batch rows."""
        return [layer.slice_cache(cache, rows)
                for layer, cache in zip(self.layers, tape)]


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def make_dense_net(rng, dims, hidden_act="relu", out_act="identity"):
    """MLP with the given layer widths, Glorot-uniform weights, zero biases."""
    layers = []
    for i in range(len(dims) - 1):
        act = hidden_act if i < len(dims) - 2 else out_act
        w = glorot_uniform(rng, (dims[i], dims[i + 1]), dims[i], dims[i + 1])
        layers.append(Dense(w, np.zeros(dims[i + 1]), act))
    return Sequential(layers)


def make_conv(rng, in_c, out_c, k=3, pad=1, activation="relu"):
    fan_in = in_c * k * k
    fan_out = out_c * k * k
    w = glorot_uniform(rng, (out_c, in_c, k, k), fan_in, fan_out)
    return Conv2d(w, np.zeros(out_c), pad=pad, activation=activation)


# ---------------------------------------------------------------------------
# optimizer

def cosine_lr(base_lr, step, total_steps):
    """base_lr at step 0, 0 at step == total_steps."""
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    base_lr: float
    total_steps: int
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, base_lr, total_steps):
    state = AdamState(base_lr=base_lr, total_steps=total_steps)
    state.m = [np.zeros_like(p) for p in params]
    state.v = [np.zeros_like(p) for p in params]
    return state


def adam_step(state, params, grads):
    """One Adam update (in place) at the cosine-scheduled learning rate."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient passed to adam_step")
    lr = cosine_lr(state.base_lr, state.step, state.total_steps)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# straight-through Gumbel-softmax

_GUMBEL_EPS = 1e-20


@dataclass
class GumbelSample:
    hard: np.ndarray  # one-hot
    soft: np.ndarray  # relaxed probabilities, used on the backward pass
    index: int
    temperature: float


def gumbel_softmax(logits, temperature, rng):
    """Draw a hard categorical sample carrying its soft relaxation."""
    u = rng.random(len(logits))
    g = -np.log(-np.log(u + _GUMBEL_EPS) + _GUMBEL_EPS)
    soft = softmax((logits + g) / temperature)
    index = int(np.argmax(soft))
    hard = np.zeros_like(soft)
    hard[index] = 1.0
    return GumbelSample(hard=hard, soft=soft, index=index, temperature=temperature)


def gumbel_softmax_vjp(sample, dsoft):
    """Gradient w.r.t. logits of the soft sample (straight-through backward)."""
    p = sample.soft
    return p * (dsoft - np.dot(dsoft, p)) / sample.temperature


# ---------------------------------------------------------------------------
# finite differences (test oracle)

def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
