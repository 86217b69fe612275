"""Small from-scratch inference/training engine (Dense, Conv2d, ReLU, MaxPool2d, Flatten)."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, matmul

KINDS = ("Dense", "Conv2d", "ReLU", "MaxPool2d", "Flatten")


class ShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class Layer:
    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    mask: np.ndarray | None = None
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.mask is not None:
            if self.weights is None or self.mask.shape != self.weights.shape:
                raise ValueError("prune mask must match weight shape")
            self.mask = np.asarray(self.mask, dtype=np.uint8)

    @property
    def prunable(self):
        return self.weights is not None

    @property
    def out_features(self):
        if self.kind == "Dense":
            return self.weights.shape[1]
        if self.kind == "Conv2d":
            return self.weights.shape[0]
        return None

    def matrix(self):
        """Weights as the 2-D (fan_in x fan_out) matrix that gets mapped to crossbars."""
        if self.kind == "Dense":
            return self.weights
        if self.kind == "Conv2d":
            return self.weights.reshape(self.weights.shape[0], -1).T
        raise ValueError(f"{self.kind} has no weight matrix")

    def from_matrix(self, m):
        """Inverse of :meth:`matrix`."""
        if self.kind == "Dense":
            return np.ascontiguousarray(m, dtype=DTYPE).reshape(self.weights.shape)
        return np.ascontiguousarray(np.asarray(m, dtype=DTYPE).T).reshape(self.weights.shape)

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class Model:
    layers: list
    name: str = "model"
    input_shape: tuple = ()
    num_classes: int = 10

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def prunable(self):
        """Indices of layers that carry weights."""
        return [i for i, layer in enumerate(self.layers) if layer.prunable]

    def copy(self):
        return Model([layer.copy() for layer in self.layers], self.name, self.input_shape, self.num_classes)

    def with_weights(self, new_weights):
        """Shallow copy with ``{layer_index: weights}`` substituted.

        Substituted layers lose their prune mask, since faulted weights may be
        nonzero at pruned positions.
        """
        layers = list(self.layers)
        for i, w in new_weights.items():
            old = layers[i]
            layers[i] = Layer(old.kind, np.asarray(w, dtype=DTYPE).reshape(old.weights.shape),
                              old.bias, None, old.hyperparams)
        return Model(layers, self.name, self.input_shape, self.num_classes)

    def num_weights(self):
        return sum(self.layers[i].weights.size for i in self.prunable())


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def reshaped(self, shape):
        return Dataset(self.images.reshape((len(self),) + tuple(shape)), self.labels)

    def subset(self, n):
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n])


# --- construction -----------------------------------------------------------

def glorot_uniform(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(DTYPE)


def dense(rng, n_in, n_out):
    return Layer("Dense", glorot_uniform(rng, (n_in, n_out), n_in, n_out), np.zeros(n_out, DTYPE))


def conv2d(rng, c_in, c_out, k, stride=1, padding=0):
    fan_in, fan_out = c_in * k * k, c_out * k * k
    return Layer("Conv2d", glorot_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out),
                 np.zeros(c_out, DTYPE), hyperparams={"stride": stride, "padding": padding})


def mlp(sizes=(784, 128, 10), seed=0):
    """Fully connected ReLU network, e.g. the 784-128-10 reference MLP."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i:
            layers.append(Layer("ReLU"))
        layers.append(dense(rng, a, b))
    name = "mlp-" + "-".join(str(s) for s in sizes)
    return Model(layers, name, (sizes[0],), sizes[-1])


def small_cnn(seed=0):
    """conv 1->8 5x5, pool 2, conv 8->16 5x5, pool 2, dense 256->10."""
    rng = np.random.default_rng(seed)
    layers = [
        conv2d(rng, 1, 8, 5), Layer("ReLU"), Layer("MaxPool2d", hyperparams={"size": 2}),
        conv2d(rng, 8, 16, 5), Layer("ReLU"), Layer("MaxPool2d", hyperparams={"size": 2}),
        Layer("Flatten"), dense(rng, 256, 10),
    ]
    return Model(layers, "cnn-small", (1, 28, 28), 10)


ARCHITECTURES = {"mlp": mlp, "cnn": small_cnn}


# --- forward / backward -----------------------------------------------------

def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _layer_forward(layer, x):
    kind = layer.kind
    if kind == "Dense":
        if x.ndim != 2 or x.shape[1] != layer.weights.shape[0]:
            raise ValueError(f"Dense expects (N, {layer.weights.shape[0]}), got {x.shape}")
        return matmul(x, layer.weights) + layer.bias, x
    if kind == "Conv2d":
        o, c, kh, kw = layer.weights.shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ValueError(f"Conv2d expects (N, {c}, H, W), got {x.shape}")
        stride = layer.hyperparams.get("stride", 1)
        cols, oh, ow = _im2col(x, kh, kw, stride, layer.hyperparams.get("padding", 0))
        out = matmul(cols, layer.weights.reshape(o, -1).T) + layer.bias
        return out.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2), (cols, x.shape)
    if kind == "ReLU":
        return np.maximum(x, 0), x
    if kind == "MaxPool2d":
        k = layer.hyperparams.get("size", 2)
        if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
            raise ValueError(f"MaxPool2d({k}) needs (N, C, H, W) divisible by {k}, got {x.shape}")
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
        arg = win.argmax(axis=-1)
        return np.take_along_axis(win, arg[..., None], -1)[..., 0], (arg, x.shape)
    if kind == "Flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise ValueError(kind)


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.shape[1:] != model.input_shape:
        raise ShapeError(f"batch shape {batch.shape[1:]} does not match model input {model.input_shape}")
    return batch


def _run(model, batch, keep_cache):
    x = _check_batch(model, batch)
    caches = []
    for i, layer in enumerate(model.layers):
        try:
            x, cache = _layer_forward(layer, x)
        except ValueError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        if keep_cache:
            caches.append(cache)
    return x, caches


def forward(model, batch):
    """Class logits for ``batch`` (shape ``(N, *model.input_shape)``)."""
    return _run(model, batch, False)[0]


def _layer_backward(layer, cache, g):
    kind = layer.kind
    if kind == "Dense":
        x = cache
        return matmul(g, layer.weights.T), matmul(x.T, g), g.sum(axis=0, dtype=np.float64).astype(DTYPE)
    if kind == "Conv2d":
        cols, xshape = cache
        o, c, kh, kw = layer.weights.shape
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = matmul(g2.T, cols).reshape(layer.weights.shape)
        db = g2.sum(axis=0, dtype=np.float64).astype(DTYPE)
        dcols = matmul(g2, layer.weights.reshape(o, -1))
        stride = layer.hyperparams.get("stride", 1)
        pad = layer.hyperparams.get("padding", 0)
        n, _, h, w = xshape
        oh, ow = g.shape[2], g.shape[3]
        dcols = dcols.reshape(n, oh, ow, c, kh, kw)
        dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), DTYPE)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if pad:
            dx = dx[:, :, pad:-pad, pad:-pad]
        return dx, dw, db
    if kind == "ReLU":
        return g * (cache > 0), None, None
    if kind == "MaxPool2d":
        arg, xshape = cache
        k = layer.hyperparams.get("size", 2)
        n, c, h, w = xshape
        win = np.zeros(arg.shape + (k * k,), DTYPE)
        np.put_along_axis(win, arg[..., None], g[..., None], -1)
        dx = win.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(xshape)
        return dx, None, None
    if kind == "Flatten":
        return g.reshape(cache), None, None
    raise ValueError(kind)


def softmax_cross_entropy(logits, labels):
    """Mean loss and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(DTYPE)


def loss_and_grads(model, batch, labels):
    """Loss plus ``{layer_index: (dW, db)}`` for every weighted layer."""
    logits, caches = _run(model, batch, True)
    loss, g = softmax_cross_entropy(logits, labels)
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        g, dw, db = _layer_backward(model.layers[i], caches[i], g)
        if dw is not None:
            grads[i] = (dw, db)
    return loss, grads


def train_sgd(model, dataset, epochs, lr, momentum=0.9, seed=0, respect_mask=True, batch_size=128):
    """Minibatch SGD with classical momentum on softmax cross-entropy.

    With ``respect_mask`` the gradient is zeroed wherever a layer's prune mask
    is 0, so pruned weights stay exactly 0. Single-threaded and
    bit-reproducible for a fixed seed.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    model = model.copy()
    if epochs <= 0:
        return model
    data = dataset.reshaped(model.input_shape)
    idx = model.prunable()
    masks = {}
    for i in idx:
        layer = model.layers[i]
        if respect_mask and layer.mask is not None:
            masks[i] = layer.mask.astype(DTYPE)
            layer.weights *= masks[i]
    vel = {i: (np.zeros_like(model.layers[i].weights), np.zeros_like(model.layers[i].bias)) for i in idx}
    rng = np.random.default_rng(seed)
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, batch_size)):
            sel = order[start:start + batch_size]
            loss, grads = loss_and_grads(model, data.images[sel], data.labels[sel])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, step, loss)
            for i, (dw, db) in grads.items():
                if i in masks:
                    dw = dw * masks[i]
                vw, vb = vel[i]
                vw *= momentum
                vw += dw
                vb *= momentum
                vb += db
                layer = model.layers[i]
                layer.weights -= lr * vw
                layer.bias -= lr * vb
    return model


def predict(model, images, batch_size=2000):
    """Argmax class per sample; ties go to the lowest class index."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(model, images[start:start + batch_size]).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate_accuracy(model, dataset, batch_size=2000):
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    data = dataset.reshaped(model.input_shape)
    return float(np.mean(predict(model, data.images, batch_size) == data.labels))
