"""Small numpy feedforward networks with exact gradients and parameter masks.

Everything is batch-first: images are ``(N, C, H, W)`` and dense activations
``(N, F)``.  Parameters are float32 by default; a network cast to float64 with
:meth:`Network.astype` runs the same code in double precision, which is what
the gradient checks use.

Labels are 1-based throughout the package (``1..num_classes``); the loss and
prediction helpers translate to 0-based logit indices internally.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an input does not match the shape a network expects."""


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #


class Layer:
    kind = "layer"
    has_params = False

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache, param_grads=True):
        raise NotImplementedError

    def params(self):
        return {}

    def astype(self, dtype):
        return self


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        y = np.maximum(x, 0)
        return y, x > 0

    def backward(self, dy, cache, param_grads=True):
        return dy * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, param_grads=True):
        return dy.reshape(cache), {}


class _Weighted(Layer):
    has_params = True

    def __init__(self, weight, bias, mask=None):
        self.weight = weight
        self.bias = bias
        self.mask = mask

    @property
    def unit_count(self):
        return self.weight.shape[0]

    def effective_weight(self):
        if self.mask is None:
            return self.weight
        return self.weight * self.mask

    def bias_mask(self):
        return None

    def effective_bias(self):
        bm = self.bias_mask()
        return self.bias if bm is None else self.bias * bm

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def param_masks(self):
        return {"weight": self.mask, "bias": self.bias_mask()}

    def astype(self, dtype):
        out = copy.copy(self)
        out.weight = self.weight.astype(dtype)
        out.bias = self.bias.astype(dtype)
        if self.mask is not None:
            out.mask = self.mask.astype(dtype)
        return out

    def set_mask(self, mask):
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != self.weight.shape:
                raise ShapeError(f"mask shape {mask.shape} != weight shape {self.weight.shape}")
            if not np.all((mask == 0) | (mask == 1)):
                raise ValueError("mask entries must be 0 or 1")
            mask = mask.astype(self.weight.dtype)
        self.mask = mask


class Dense(_Weighted):
    """Fully connected layer, ``weight`` is ``(out, in)``."""

    kind = "dense"

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weight.shape[1]:
            raise ShapeError(f"Dense expects ({self.weight.shape[1]},), got {in_shape}")
        return (self.weight.shape[0],)

    def forward(self, x):
        return x @ self.effective_weight().T + self.bias, x

    def backward(self, dy, cache, param_grads=True):
        w = self.effective_weight()
        dx = dy @ w
        if not param_grads:
            return dx, {}
        dw = dy.T @ cache
        if self.mask is not None:
            dw = dw * self.mask
        return dx, {"weight": dw, "bias": dy.sum(axis=0)}


class Conv2D(_Weighted):
    """2-D convolution with zero padding; ``weight`` is ``(out, in, kh, kw)``.

    A filter whose weights are all masked also has its bias masked, so filter
    pruning removes the filter's output entirely.
    """

    kind = "conv2d"

    def __init__(self, weight, bias, stride=1, padding=0, mask=None):
        super().__init__(weight, bias, mask)
        self.stride = int(stride)
        self.padding = int(padding)

    def bias_mask(self):
        if self.mask is None:
            return None
        return self.mask.reshape(self.mask.shape[0], -1).max(axis=1)

    def out_shape(self, in_shape):
        o, c, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != c:
            raise ShapeError(f"Conv2D expects ({c}, H, W), got {in_shape}")
        h, w = in_shape[1] + 2 * self.padding, in_shape[2] + 2 * self.padding
        if kh > h or kw > w:
            raise ShapeError("filter larger than padded input")
        return (o, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    def _cols(self, x):
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        kh, kw = self.weight.shape[2:]
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        return win[:, :, ::s, ::s], x.shape

    def forward(self, x):
        cols, padded_shape = self._cols(x)
        y = np.tensordot(cols, self.effective_weight(), axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + self.effective_bias()[None, :, None, None]
        return np.ascontiguousarray(y), (cols, padded_shape)

    def backward(self, dy, cache, param_grads=True):
        cols, padded_shape = cache
        s, p = self.stride, self.padding
        kh, kw = self.weight.shape[2:]
        ho, wo = dy.shape[2:]
        w = self.effective_weight()
        dcols = np.tensordot(dy, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:padded_shape[2] - p, p:padded_shape[3] - p] if p else dxp
        if not param_grads:
            return dx, {}
        dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))
        db = dy.sum(axis=(0, 2, 3))
        if self.mask is not None:
            dw = dw * self.mask
            db = db * self.bias_mask()
        return dx, {"weight": dw, "bias": db}


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=DTYPE):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def he_uniform(rng, shape, fan_in, dtype=DTYPE):
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


def dense(rng, n_in, n_out, init="he"):
    if init == "glorot":
        w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
    else:
        w = he_uniform(rng, (n_out, n_in), n_in)
    return Dense(w, np.zeros(n_out, dtype=DTYPE))


def conv2d(rng, c_in, c_out, k=3, stride=1, padding=1):
    fan_in = c_in * k * k
    w = he_uniform(rng, (c_out, c_in, k, k), fan_in)
    return Conv2D(w, np.zeros(c_out, dtype=DTYPE), stride=stride, padding=padding)


# --------------------------------------------------------------------------- #
# Network
# --------------------------------------------------------------------------- #


@dataclass
class ForwardTrace:
    """Per-layer caches from a forward pass, consumed by :meth:`Network.backward_from`."""

    outputs: list
    caches: list
    upto: int


class Network:
    """Ordered list of layers with per-layer frozen flags.

    The last layer must be a :class:`Dense` producing the logits.
    """

    def __init__(self, layers, input_shape, frozen=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.frozen = list(frozen) if frozen is not None else [False] * len(self.layers)
        if len(self.frozen) != len(self.layers):
            raise ValueError("frozen list length must equal layer count")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValueError("network must end in a Dense layer")
        self.shapes = self._infer_shapes()

    def _infer_shapes(self):
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        return shapes

    @property
    def num_classes(self):
        return self.layers[-1].weight.shape[0]

    @property
    def dtype(self):
        return self.layers[-1].weight.dtype

    def __len__(self):
        return len(self.layers)

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        return Network([l.astype(dtype) for l in self.layers], self.input_shape, list(self.frozen))

    def prunable_layers(self):
        return [i for i, l in enumerate(self.layers) if l.has_params]

    def trainable_layers(self):
        return [i for i in self.prunable_layers() if not self.frozen[i]]

    def parameter_count(self):
        return sum(p.size for l in self.layers for p in l.params().values())

    # -- inference ---------------------------------------------------------- #

    def _as_batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input shape {self.input_shape}, got {x.shape}")
        return x, False

    def trace(self, x, upto=None, start=0):
        """Run layers ``start..upto`` (inclusive) on a batch, keeping caches."""
        upto = len(self.layers) - 1 if upto is None else upto
        if not 0 <= upto < len(self.layers):
            raise IndexError(f"layer index {upto} out of range")
        outputs, caches = [], []
        h = x
        for layer in self.layers[start:upto + 1]:
            h, cache = layer.forward(h)
            outputs.append(h)
            caches.append(cache)
        return ForwardTrace(outputs, caches, upto)

    def forward(self, x):
        """Logits for one input or a batch."""
        xb, single = self._as_batch(x)
        out = self.trace(xb).outputs[-1]
        return out[0] if single else out

    def forward_to_layer(self, x, k):
        """Output of layer ``k`` (0-based)."""
        xb, single = self._as_batch(x)
        out = self.trace(xb, upto=k).outputs[-1]
        return out[0] if single else out

    def forward_from_layer(self, h, k):
        """Run layers ``k+1..end`` on features ``h`` taken at layer ``k``."""
        for layer in self.layers[k + 1:]:
            h, _ = layer.forward(h)
        return h

    def predict(self, x, batch_size=512):
        """1-based labels, argmax ties broken toward the smaller label."""
        xb, single = self._as_batch(x)
        preds = []
        for i in range(0, len(xb), batch_size):
            preds.append(np.argmax(self.trace(xb[i:i + batch_size]).outputs[-1], axis=1) + 1)
        out = np.concatenate(preds) if preds else np.zeros(0, dtype=int)
        return int(out[0]) if single else out

    # -- gradients ---------------------------------------------------------- #

    def backward_from(self, x, tr, grad, param_grads=True, input_grad=True):
        """Backpropagate ``grad`` (gradient w.r.t. layer ``tr.upto``'s output).

        Returns ``(dx, grads)`` where ``grads`` maps layer index to a dict of
        parameter gradients, only for unfrozen parameterised layers.
        """
        grads = {}
        lowest = 0
        if not input_grad:
            trainable = [i for i in self.trainable_layers() if i <= tr.upto]
            if not trainable or not param_grads:
                return None, grads
            lowest = min(trainable)
        for i in range(tr.upto, lowest - 1, -1):
            layer = self.layers[i]
            want = param_grads and layer.has_params and not self.frozen[i]
            if i == lowest and not input_grad and not want:
                break
            grad, g = layer.backward(grad, tr.caches[i], param_grads=want)
            if want:
                grads[i] = g
        return (grad if input_grad else None), grads

    def loss_and_grads(self, x, labels, param_grads=True, input_grad=False):
        """Mean softmax cross-entropy over the batch and its gradients."""
        xb, _ = self._as_batch(x)
        tr = self.trace(xb)
        loss, dlogits = softmax_cross_entropy(tr.outputs[-1], labels)
        dx, grads = self.backward_from(xb, tr, dlogits, param_grads, input_grad)
        return loss, grads, dx

    def backward(self, x, y):
        """Parameter gradients and input gradient of the cross-entropy for one example."""
        xb, single = self._as_batch(x)
        labels = np.atleast_1d(np.asarray(y))
        _, grads, dx = self.loss_and_grads(xb, labels, param_grads=True, input_grad=True)
        return grads, (dx[0] if single else dx)

    def loss(self, x, labels):
        xb, _ = self._as_batch(x)
        return softmax_cross_entropy(self.trace(xb).outputs[-1], labels)[0]


def softmax_cross_entropy(logits, labels):
    """Fused, max-shifted softmax cross-entropy with 1-based labels."""
    labels = np.asarray(labels, dtype=int)
    n, k = logits.shape
    if np.any(labels < 1) or np.any(labels > k):
        raise ValueError(f"labels must lie in 1..{k}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = labels - 1
    loss = float(np.mean(lse - z[np.arange(n), idx]))
    p = np.exp(z - lse[:, None])
    p[np.arange(n), idx] -= 1
    return loss, (p / n).astype(logits.dtype)


# --------------------------------------------------------------------------- #
# Feature-space distances
# --------------------------------------------------------------------------- #


def feature_distance(a, b, metric="sq_l2"):
    """Per-sample distance between feature batches, normalised by feature count
    for ``sq_l2`` and ``l1``.  Returns ``(dist, grad_wrt_a)``."""
    diff = (a - b).reshape(a.shape[0], -1)
    f = diff.shape[1]
    if metric == "sq_l2":
        d = np.sum(diff * diff, axis=1) / f
        g = 2.0 * diff / f
    elif metric == "l2":
        d = np.sqrt(np.sum(diff * diff, axis=1))
        safe = np.where(d > 0, d, 1.0)
        g = diff / safe[:, None]
        g[d == 0] = 0
    elif metric == "l1":
        d = np.sum(np.abs(diff), axis=1) / f
        g = np.sign(diff) / f
    else:
        raise ValueError(f"unknown internal metric {metric!r}")
    return d, g.reshape(a.shape).astype(a.dtype)


def feature_loss_input_gradient(net, x, target_features, layer, metric="sq_l2", scale=1.0):
    """Gradient w.r.t. ``x`` of ``scale * D(H_layer(x), target_features)``.

    Works on single inputs or batches; returns ``(distance, grad)``.
    """
    xb, single = net._as_batch(x)
    tb = np.asarray(target_features, dtype=net.dtype)
    if single:
        tb = tb[None]
    tr = net.trace(xb, upto=layer)
    feats = tr.outputs[-1]
    if feats.shape != tb.shape:
        raise ShapeError(f"feature shape {feats.shape} != target shape {tb.shape}")
    d, g = feature_distance(feats, tb, metric)
    dx, _ = net.backward_from(xb, tr, g * scale, param_grads=False)
    d = d * scale
    return (float(d[0]), dx[0]) if single else (d, dx)


# --------------------------------------------------------------------------- #
# Optimisers
# --------------------------------------------------------------------------- #


@dataclass
class SGD:
    learning_rate: float = 0.05
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def delta(self, key, grad):
        v = self.velocity.get(key)
        v = grad if v is None else self.momentum * v + grad
        self.velocity[key] = v
        return -self.learning_rate * v


@dataclass
class Adadelta:
    """Adadelta with the accumulator recurrences of Zeiler (2012)."""

    rho: float = 0.95
    epsilon: float = 1e-6
    learning_rate: float = 1.0
    acc_grad: dict = field(default_factory=dict)
    acc_delta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def delta(self, key, grad):
        eg = self.acc_grad.get(key)
        ed = self.acc_delta.get(key)
        if eg is None:
            eg = np.zeros_like(grad)
            ed = np.zeros_like(grad)
        eg = self.rho * eg + (1 - self.rho) * grad * grad
        step = np.sqrt(ed + self.epsilon) / np.sqrt(eg + self.epsilon) * grad
        ed = self.rho * ed + (1 - self.rho) * step * step
        self.acc_grad[key] = eg
        self.acc_delta[key] = ed
        return -self.learning_rate * step


def apply_gradients(net, grads, optimizer):
    """In-place update of unfrozen parameters; masked entries never move."""
    for i, g in grads.items():
        if net.frozen[i]:
            continue
        layer = net.layers[i]
        masks = layer.param_masks()
        for name, grad in g.items():
            step = optimizer.delta((i, name), grad)
            if masks.get(name) is not None:
                step = step * masks[name]
            p = getattr(layer, name)
            p += step.astype(p.dtype)


def train_step(net, x, labels, optimizer):
    """One optimiser step on a batch; returns the pre-step loss."""
    if len(x) == 0:
        raise ValueError("empty batch")
    loss, grads, _ = net.loss_and_grads(x, labels, param_grads=True)
    apply_gradients(net, grads, optimizer)
    return loss


def apply_masks(net):
    """Copy of ``net`` with masks folded into the weights and removed."""
    out = net.copy()
    for layer in out.layers:
        if layer.has_params and layer.mask is not None:
            layer.weight = layer.effective_weight()
            layer.bias = layer.effective_bias()
            layer.mask = None
    return out
