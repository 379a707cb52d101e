"""A small dense-network engine with per-example gradients.

Parameters live in one flat float64 vector, laid out per layer as the
weight matrix (``d_in x d_out``, row-major) followed by the bias. Hidden
layers share one activation; the output layer has its own head.
"""

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels

HEADS = ("sigmoid", "tanh", "softmax", "relu", "linear")
HIDDEN = ("relu", "tanh", "sigmoid")
LOG_FLOOR = 1e-7


@dataclass
class DenseNetwork:
    layer_dims: tuple
    activation: str
    params: np.ndarray
    hidden_activation: str = "relu"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"need >= 2 positive layer dims, got {self.layer_dims}")
        if self.activation not in HEADS:
            raise ValueError(f"unknown output activation {self.activation!r}")
        if self.hidden_activation not in HIDDEN:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.layer_dims),):
            raise ValueError(
                f"expected {param_count(self.layer_dims)} parameters, got shape {self.params.shape}"
            )

    @property
    def n_params(self):
        return self.params.size

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def copy(self):
        return replace(self, params=self.params.copy(), meta=dict(self.meta))

    def layers(self):
        """(W, b) views into ``params`` for each layer."""
        out = []
        off = 0
        for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = self.params[off : off + d_in * d_out].reshape(d_in, d_out)
            off += d_in * d_out
            b = self.params[off : off + d_out]
            off += d_out
            out.append((w, b))
        return out


def param_count(layer_dims) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def init_network(layer_dims, activation, seed, hidden_activation="relu") -> DenseNetwork:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        chunks.append(rng.uniform(-bound, bound, size=d_in * d_out))
        chunks.append(np.zeros(d_out))
    return DenseNetwork(tuple(layer_dims), activation, np.concatenate(chunks), hidden_activation)


# ------------------------------------------------------------------ activations


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        # split form avoids overflow in exp for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if name == "softmax":
        s = z - z.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)
    if name == "linear":
        return z
    raise ValueError(name)


def _act_backward(name, z, a, grad_a):
    """Gradient w.r.t. pre-activation given gradient w.r.t. activation output."""
    if name == "relu":
        return grad_a * (z > 0)
    if name == "tanh":
        return grad_a * (1.0 - a * a)
    if name == "sigmoid":
        return grad_a * a * (1.0 - a)
    if name == "softmax":
        return a * (grad_a - np.sum(a * grad_a, axis=1, keepdims=True))
    if name == "linear":
        return grad_a
    raise ValueError(name)


# ------------------------------------------------------------------ forward / backward


def _check_batch(net, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"batch shape {x.shape} does not match input dim {net.input_dim}")
    return x


def forward_trace(net: DenseNetwork, batch):
    """Forward pass keeping (inputs, pre-activations, activations) for backward."""
    x = _check_batch(net, batch)
    acts = [x]
    pres = []
    layers = net.layers()
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        name = net.activation if i == len(layers) - 1 else net.hidden_activation
        pres.append(z)
        acts.append(_act(name, z))
    return acts[-1], (acts, pres)


def forward(net: DenseNetwork, batch) -> np.ndarray:
    return forward_trace(net, batch)[0]


def backward(net: DenseNetwork, trace, grad_out, per_example=False, input_grad=False):
    """Backpropagate ``grad_out`` (d loss / d output, shape (n, d_out)).

    Returns ``(param_grads, grad_input)``. ``param_grads`` is the summed
    gradient (P,) or, with ``per_example``, an (n, P) array. ``grad_input`` is
    None unless requested.
    """
    acts, pres = trace
    layers = net.layers()
    n = acts[0].shape[0]
    grad_a = np.asarray(grad_out, dtype=np.float64).reshape(n, -1)
    pieces = [None] * (2 * len(layers))
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        name = net.activation if i == len(layers) - 1 else net.hidden_activation
        delta = _act_backward(name, pres[i], acts[i + 1], grad_a)
        a_prev = acts[i]
        if per_example:
            pieces[2 * i] = _kernels.outer_rows(np.ascontiguousarray(a_prev), np.ascontiguousarray(delta))
            pieces[2 * i + 1] = delta
        else:
            pieces[2 * i] = (a_prev.T @ delta).ravel()
            pieces[2 * i + 1] = delta.sum(axis=0)
        if i > 0 or input_grad:
            grad_a = delta @ w.T
    grads = np.concatenate(pieces, axis=1 if per_example else 0)
    return grads, (grad_a if input_grad else None)


# ------------------------------------------------------------------ losses


class BinaryLogObjective:
    """Per-example ``pos * log S + neg * log(1 - S)`` on a single sigmoid output.

    The discriminator-side objectives (teacher loss, the student's two loss
    terms, the generator objective) are all of this form with different
    weights and sign. ``S`` is clamped to [1e-7, 1 - 1e-7] inside the logs.
    """

    def __init__(self, pos_weight, neg_weight, sign=1.0):
        self.pos = np.asarray(pos_weight, dtype=np.float64)
        self.neg = np.asarray(neg_weight, dtype=np.float64)
        self.sign = sign

    def values(self, out):
        s = np.clip(out[:, 0], LOG_FLOOR, 1.0 - LOG_FLOOR)
        return self.sign * (self.pos * np.log(s) + self.neg * np.log1p(-s))

    def grad(self, out):
        raw = out[:, 0]
        s = np.clip(raw, LOG_FLOOR, 1.0 - LOG_FLOOR)
        inside = (raw > LOG_FLOOR) & (raw < 1.0 - LOG_FLOOR)
        g = self.sign * (self.pos / s - self.neg / (1.0 - s)) * inside
        return g[:, None]


class CrossEntropy:
    """Per-example ``-sum_c w[i, c] * log p[i, c]`` on a probability head.

    ``targets`` may be integer labels or an (n, m) weight matrix.
    """

    def __init__(self, targets, n_classes=None, scale=1.0):
        t = np.asarray(targets)
        if t.ndim == 1:
            m = n_classes if n_classes is not None else int(t.max()) + 1
            t = one_hot(t, m)
        self.weights = t.astype(np.float64)
        self.scale = scale

    def values(self, out):
        p = np.clip(out, LOG_FLOOR, 1.0 - LOG_FLOOR)
        return -self.scale * np.sum(self.weights * np.log(p), axis=1)

    def grad(self, out):
        p = np.clip(out, LOG_FLOOR, 1.0 - LOG_FLOOR)
        inside = (out > LOG_FLOOR) & (out < 1.0 - LOG_FLOOR)
        return -self.scale * self.weights / p * inside


class LinearProbe:
    """``sum_j w[i, j] * out[i, j]``; a loss that is linear in the outputs."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    def values(self, out):
        return np.sum(self.weights * out, axis=1)

    def grad(self, out):
        return np.broadcast_to(self.weights, out.shape).copy()


def one_hot(labels, m):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, m))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_value(net, batch, loss_spec) -> float:
    return float(np.sum(loss_spec.values(forward(net, batch))))


def per_example_backward(net, batch, loss_spec) -> np.ndarray:
    """(n, P) array; row i is the gradient of example i's loss alone."""
    out, trace = forward_trace(net, batch)
    grads, _ = backward(net, trace, loss_spec.grad(out), per_example=True)
    return grads


def gradient(net, batch, loss_spec) -> np.ndarray:
    """Gradient of the summed loss."""
    out, trace = forward_trace(net, batch)
    grads, _ = backward(net, trace, loss_spec.grad(out))
    return grads


def apply_update(net: DenseNetwork, grad, learning_rate) -> DenseNetwork:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.params.shape:
        raise ValueError(f"gradient length {grad.shape} does not match {net.params.shape}")
    return replace(net, params=net.params - learning_rate * grad)


# ------------------------------------------------------------------ checkpoints


def to_record(net: DenseNetwork) -> dict:
    return {
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "hidden_activation": net.hidden_activation,
        # repr() of a float64 is the shortest string that round-trips exactly
        "params": [repr(float(v)) for v in net.params],
        "meta": net.meta,
    }


def from_record(rec: dict) -> DenseNetwork:
    try:
        params = np.array([float(v) for v in rec["params"]], dtype=np.float64)
        return DenseNetwork(
            tuple(rec["layer_dims"]),
            rec["activation"],
            params,
            rec.get("hidden_activation", "relu"),
            dict(rec.get("meta", {})),
        )
    except KeyError as exc:
        raise ValueError(f"checkpoint record is missing field {exc}") from None


def save_checkpoint(path, net: DenseNetwork, extra: Optional[dict] = None):
    rec = {"network": to_record(net)}
    if extra:
        rec.update(extra)
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_checkpoint(path) -> DenseNetwork:
    with open(path) as fh:
        rec = json.load(fh)
    if "network" in rec:
        rec = rec["network"]
    elif "generator" in rec:
        rec = rec["generator"]
    return from_record(rec)
