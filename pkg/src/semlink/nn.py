"""Minimal dense neural-network engine in float32 numpy.

Shared by the traffic-sign classifier (ReLU hidden layers, softmax output,
cross-entropy) and the DQN Q-network (ReLU hidden layers, linear output,
squared error). Models are treated as immutable values: ``sgd_update``
returns a new ``ModelWeights``.
"""

import enum
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .rng import Rng

F32 = np.float32


class Activation(enum.IntEnum):
    RELU = 0
    SOFTMAX = 1
    LINEAR = 2


class Loss(enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    SQUARED_ERROR = "squared_error"


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=F32)
        b = np.ascontiguousarray(self.bias, dtype=F32).reshape(-1)
        if w.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} != weight rows {w.shape[0]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class ModelWeights:
    layers: tuple
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("a model needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].n_out != layers[i + 1].n_in:
                raise ShapeError(
                    f"layer {i} outputs {layers[i].n_out} but layer {i + 1} expects {layers[i + 1].n_in}")
            if layers[i].activation != Activation.RELU:
                raise ContractError(f"hidden layer {i} must be ReLU, got {layers[i].activation.name}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "alpha", float(F32(self.alpha)))
        object.__setattr__(self, "seed", int(self.seed) & ((1 << 64) - 1))

    @property
    def shape(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def output_activation(self):
        return self.layers[-1].activation

    def n_params(self):
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def equals(self, other):
        """Bitwise equality of every parameter plus alpha and seed."""
        if not isinstance(other, ModelWeights) or len(self.layers) != len(other.layers):
            return False
        if self.alpha != other.alpha or self.seed != other.seed:
            return False
        return all(
            a.activation == b.activation
            and a.weights.shape == b.weights.shape
            and a.weights.tobytes() == b.weights.tobytes()
            and a.bias.tobytes() == b.bias.tobytes()
            for a, b in zip(self.layers, other.layers))

    def replace_layers(self, layers):
        return ModelWeights(tuple(layers), alpha=self.alpha, seed=self.seed)


@dataclass
class ForwardTrace:
    pre_activations: list = field(default_factory=list)
    post_activations: list = field(default_factory=list)  # includes the input


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def init_weights(shape, activations, seed, alpha=0.1):
    """Random model with every parameter uniform on [-0.5, 0.5).

    ``shape`` lists layer widths including the input, so ``[1024, 10, 10]``
    builds two layers. ``activations`` has one entry per layer.
    """
    shape = [int(s) for s in shape]
    if len(shape) < 2 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: need >= 2 sizes, all >= 1")
    if len(activations) != len(shape) - 1:
        raise ShapeError(f"{len(shape) - 1} layers but {len(activations)} activations")
    rng = Rng(seed)
    layers = []
    for n_in, n_out, act in zip(shape[:-1], shape[1:], activations):
        w = rng.random_f32(n_out * n_in).reshape(n_out, n_in) - F32(0.5)
        b = rng.random_f32(n_out) - F32(0.5)
        layers.append(DenseLayer(w, b, Activation(act)))
    return ModelWeights(tuple(layers), alpha=alpha, seed=seed)


def relu(z):
    return np.maximum(z, F32(0))


def softmax(z):
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _activate(z, act):
    if act == Activation.RELU:
        return relu(z)
    if act == Activation.SOFTMAX:
        return softmax(z)
    return z


def forward(model, x):
    """Run ``x`` (one vector or a batch of rows) through the model.

    Returns ``(output, trace)``.
    """
    a = np.asarray(x, dtype=F32)
    if a.shape[-1] != model.layers[0].n_in:
        raise ShapeError(f"input has {a.shape[-1]} features, model expects {model.layers[0].n_in}")
    trace = ForwardTrace(post_activations=[a])
    for layer in model.layers:
        z = a @ layer.weights.T + layer.bias
        a = _activate(z, layer.activation)
        trace.pre_activations.append(z)
        trace.post_activations.append(a)
    return a, trace


def loss_value(output, target, loss):
    output = np.atleast_2d(output)
    target = np.atleast_2d(np.asarray(target, dtype=F32))
    if loss == Loss.CROSS_ENTROPY:
        per_sample = -np.sum(target * np.log(np.clip(output, 1e-12, 1.0)), axis=1)
    else:
        per_sample = 0.5 * np.sum((output - target) ** 2, axis=1)
    return float(np.mean(per_sample))


def _check_loss(model, loss):
    act = model.output_activation
    if loss == Loss.CROSS_ENTROPY and act != Activation.SOFTMAX:
        raise ContractError("cross-entropy requires a softmax output layer")
    if loss == Loss.SQUARED_ERROR and act != Activation.LINEAR:
        raise ContractError("squared error requires a linear output layer")


def backward(model, trace, target, loss):
    """Gradients of the batch-mean loss, as a list of ``(dW, db)`` per layer.

    For both supported pairings (softmax + cross-entropy, linear + squared
    error) the output delta is simply ``output - target``.
    """
    loss = Loss(loss)
    _check_loss(model, loss)
    out = trace.post_activations[-1]
    target = np.asarray(target, dtype=F32)
    if target.shape != out.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {out.shape}")
    delta = np.atleast_2d(out - target)
    n = delta.shape[0]
    delta = delta / F32(n)
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        a_prev = np.atleast_2d(trace.post_activations[k])
        grads[k] = (delta.T @ a_prev, delta.sum(axis=0))
        if k > 0:
            z_prev = np.atleast_2d(trace.pre_activations[k - 1])
            delta = (delta @ model.layers[k].weights) * (z_prev > 0)
    return grads


def sgd_update(model, gradients):
    """``W <- W - alpha * dW`` and ``b <- b - alpha * db``, layer by layer."""
    if len(gradients) != len(model.layers):
        raise ShapeError(f"{len(gradients)} gradient pairs for {len(model.layers)} layers")
    alpha = F32(model.alpha)
    layers = []
    for layer, (dw, db) in zip(model.layers, gradients):
        dw = np.asarray(dw, dtype=F32)
        db = np.asarray(db, dtype=F32)
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ShapeError(f"gradient shapes {dw.shape}/{db.shape} do not match layer {layer.weights.shape}")
        layers.append(DenseLayer(layer.weights - alpha * dw, layer.bias - alpha * db, layer.activation))
    return model.replace_layers(layers)


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes), dtype=F32)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def predict(model, x):
    """``(class_index, confidence)``; ties resolve to the lowest index."""
    if model.output_activation != Activation.SOFTMAX:
        raise ContractError("predict requires a softmax output layer")
    out, _ = forward(model, x)
    return argmax_confidence(out)


def argmax_confidence(probs):
    probs = np.asarray(probs)
    idx = int(np.argmax(probs))  # np.argmax returns the first maximum
    return idx, float(probs[idx])


def accuracy(model, X, labels):
    out, _ = forward(model, X)
    return float(np.mean(np.argmax(out, axis=1) == np.asarray(labels)))


def train(model, X, labels, epochs, batch_size=64):
    """Minibatch SGD with cross-entropy on one-hot ``labels``.

    Samples are reshuffled every epoch from a generator seeded with
    ``model.seed``, so ``(model, data, epochs, batch_size)`` fixes the
    result bitwise. Returns ``(model, history)`` with one ``EpochStats``
    per epoch, measured on the training data after the epoch.
    """
    X = np.asarray(X, dtype=F32)
    labels = np.asarray(labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_classes = model.layers[-1].n_out
    if labels.max() >= n_classes:
        raise ShapeError(f"label {labels.max()} out of range for {n_classes} outputs")
    targets = one_hot(labels, n_classes)
    rng = Rng(model.seed ^ 0x5EED5EED)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(X.shape[0])
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            _, trace = forward(model, X[idx])
            model = sgd_update(model, backward(model, trace, targets[idx], Loss.CROSS_ENTROPY))
        out, _ = forward(model, X)
        history.append(EpochStats(
            epoch=epoch + 1,
            loss=loss_value(out, targets, Loss.CROSS_ENTROPY),
            accuracy=float(np.mean(np.argmax(out, axis=1) == labels))))
    return model, history


# SWF1 weights file ---------------------------------------------------------

SWF_MAGIC = b"SWF1"
SWF_VERSION = 1
_SWF_HEADER = struct.Struct("<4sBfQB")
_SWF_LAYER = struct.Struct("<BII")
MAX_LAYER_PARAMS = 1 << 28


def swf_size(shape):
    """Byte size of an SWF1 file for a model with layer widths ``shape``."""
    n_layers = len(shape) - 1
    params = sum(o * i + o for i, o in zip(shape[:-1], shape[1:]))
    return _SWF_HEADER.size + n_layers * _SWF_LAYER.size + 4 * params


def dump_weights(model):
    buf = io.BytesIO()
    buf.write(_SWF_HEADER.pack(SWF_MAGIC, SWF_VERSION, model.alpha, model.seed, len(model.layers)))
    for layer in model.layers:
        buf.write(_SWF_LAYER.pack(int(layer.activation), layer.n_out, layer.n_in))
        buf.write(layer.weights.astype("<f4").tobytes())
        buf.write(layer.bias.astype("<f4").tobytes())
    return buf.getvalue()


def parse_weights(data):
    data = bytes(data)
    if len(data) < _SWF_HEADER.size:
        raise FormatError(f"truncated SWF1 header: {len(data)} of {_SWF_HEADER.size} bytes", len(data))
    magic, version, alpha, seed, count = _SWF_HEADER.unpack_from(data, 0)
    if magic != SWF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SWF_MAGIC!r}", 0)
    if version != SWF_VERSION:
        raise FormatError(f"unsupported SWF1 version {version}", 4)
    if count == 0:
        raise FormatError("layer count is zero", 17)
    if not np.isfinite(alpha) or alpha <= 0:
        raise FormatError(f"invalid alpha {alpha}", 5)
    pos = _SWF_HEADER.size
    layers = []
    for _ in range(count):
        if len(data) - pos < _SWF_LAYER.size:
            raise FormatError("truncated layer header", pos)
        act, rows, cols = _SWF_LAYER.unpack_from(data, pos)
        if act not in (0, 1, 2):
            raise FormatError(f"unknown activation code {act}", pos)
        if rows == 0 or cols == 0 or rows * cols > MAX_LAYER_PARAMS:
            raise FormatError(f"invalid layer dimensions {rows}x{cols}", pos + 1)
        pos += _SWF_LAYER.size
        need = 4 * (rows * cols + rows)
        if len(data) - pos < need:
            raise FormatError(f"truncated layer data: need {need} bytes, have {len(data) - pos}", pos)
        w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols)
        b = np.frombuffer(data, dtype="<f4", count=rows, offset=pos + 4 * rows * cols)
        layers.append(DenseLayer(w.astype(F32), b.astype(F32), Activation(act)))
        pos += need
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", pos)
    try:
        return ModelWeights(tuple(layers), alpha=alpha, seed=seed)
    except (ShapeError, ContractError) as exc:
        raise FormatError(f"inconsistent layers: {exc}", _SWF_HEADER.size) from exc


def save_weights(model, path):
    data = dump_weights(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_weights(path):
    with open(path, "rb") as fh:
        return parse_weights(fh.read())
