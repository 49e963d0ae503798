"""Small feed-forward classifier trained with momentum SGD.

Hidden layers use ReLU (``tanh`` is available as an alternative).
Parameters live in one flat float64 vector; per-layer weight matrices and
bias vectors are views into it, so the flat and structured forms never drift
apart. Weight matrices are stored ``(out, in)`` so that row ``l`` of the output
layer is the incoming weight vector of output neuron ``l``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


# activation, and its derivative expressed through the activation's output
_ACTIVATIONS = {
    "relu": (lambda a: np.maximum(a, 0.0), lambda h: (h > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda h: 1.0 - h ** 2),
}


@dataclass(frozen=True)
class ModelShape:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dimensions must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def num_params(self) -> int:
        """Whole-model dimension ``d_w``."""
        return sum(fan_out * fan_in + fan_out for fan_in, fan_out in self.layer_dims)

    @property
    def neuron_dim(self) -> int:
        """Parameters owned by one output neuron: weight row plus bias (``d_e``)."""
        return self.layer_dims[-1][0] + 1

    @property
    def output_dim(self) -> int:
        """Output-layer dimension ``d_o``."""
        return self.num_classes * self.neuron_dim

    def offsets(self) -> list[tuple[int, int, int]]:
        """(weight_start, bias_start, bias_end) per layer in the flat vector."""
        out, pos = [], 0
        for fan_in, fan_out in self.layer_dims:
            w_end = pos + fan_in * fan_out
            out.append((pos, w_end, w_end + fan_out))
            pos = w_end + fan_out
        return out


@dataclass
class ModelParams:
    shape: ModelShape
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.shape.num_params,):
            raise ValueError(
                f"flat vector has shape {self.flat.shape}, expected ({self.shape.num_params},)"
            )
        if not np.isfinite(self.flat).all():
            raise ValueError("model parameters must be finite")

    @classmethod
    def zeros(cls, shape: ModelShape) -> "ModelParams":
        return cls(shape, np.zeros(shape.num_params))

    @classmethod
    def from_layers(cls, shape: ModelShape, layers) -> "ModelParams":
        parts = []
        for (fan_in, fan_out), (w, b) in zip(shape.layer_dims, layers, strict=True):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ValueError(f"layer shapes {w.shape}, {b.shape} do not match ({fan_out}, {fan_in})")
            parts += [w.ravel(), b]
        return cls(shape, np.concatenate(parts))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Structured (W, b) views; writing through them edits ``flat``."""
        res = []
        for (fan_in, fan_out), (w0, b0, b1) in zip(self.shape.layer_dims, self.shape.offsets()):
            res.append((self.flat[w0:b0].reshape(fan_out, fan_in), self.flat[b0:b1]))
        return res

    def output_neurons(self) -> np.ndarray:
        """``L x d_e`` matrix: each row is one output neuron's weights followed by its bias."""
        w, b = self.layers()[-1]
        return np.hstack([w, b[:, None]])

    def output_slice(self) -> slice:
        w0, _, b1 = self.shape.offsets()[-1]
        return slice(w0, b1)

    def copy(self) -> "ModelParams":
        return ModelParams(self.shape, self.flat.copy())

    def with_flat(self, flat) -> "ModelParams":
        return ModelParams(self.shape, np.array(flat, dtype=np.float64))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.03
    momentum: float = 0.5
    batch_size: int = 64
    local_epochs: int = 3

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


def init_model(shape: ModelShape, seed) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in shape.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams.from_layers(shape, layers)


def _check_inputs(params: ModelParams, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[None, :]
    if xs.ndim != 2 or xs.shape[1] != params.shape.input_dim:
        raise ValueError(f"expected inputs of width {params.shape.input_dim}, got shape {xs.shape}")
    return xs


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logits(params: ModelParams, xs) -> np.ndarray:
    h = _check_inputs(params, xs)
    layers = params.layers()
    act = _ACTIVATIONS[params.shape.activation][0]
    for w, b in layers[:-1]:
        h = act(h @ w.T + b)
    w, b = layers[-1]
    return h @ w.T + b


def forward(params: ModelParams, x) -> np.ndarray:
    """Class probabilities for one feature vector (or a batch, row-wise)."""
    single = np.ndim(x) == 1
    probs = _softmax(logits(params, x))
    return probs[0] if single else probs


def predict_batch(params: ModelParams, xs) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class index.
    return np.argmax(logits(params, xs), axis=1)


def loss_and_grad(params: ModelParams, xs, ys) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``params.flat``."""
    xs = _check_inputs(params, xs)
    ys = np.asarray(ys, dtype=np.intp)
    n = xs.shape[0]
    layers = params.layers()

    act, dact = _ACTIVATIONS[params.shape.activation]
    acts = [xs]
    for w, b in layers[:-1]:
        acts.append(act(acts[-1] @ w.T + b))
    w, b = layers[-1]
    z = acts[-1] @ w.T + b
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), ys].mean()

    grad = np.zeros_like(params.flat)
    delta = np.exp(log_probs)
    delta[np.arange(n), ys] -= 1.0
    delta /= n
    offsets = params.shape.offsets()
    for idx in range(len(layers) - 1, -1, -1):
        w0, b0, b1 = offsets[idx]
        grad[w0:b0] = (delta.T @ acts[idx]).ravel()
        grad[b0:b1] = delta.sum(axis=0)
        if idx > 0:
            delta = (delta @ layers[idx][0]) * dact(acts[idx])
    return float(loss), grad


def local_train(params: ModelParams, data, cfg: TrainConfig, seed) -> ModelParams:
    """Momentum SGD on one client's data; returns a new model, input untouched.

    ``data`` is anything with ``features`` and ``labels`` arrays (normally a
    :class:`flarelab.data.Dataset`). Momentum buffers start at zero on every
    call. Mini-batch order comes from a fresh permutation per epoch drawn from
    ``seed``.
    """
    features = np.asarray(data.features, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.intp)
    n = len(labels)
    if n == 0:
        warnings.warn("local_train called with an empty dataset; returning model unchanged")
        return params.copy()
    if labels.min() < 0 or labels.max() >= params.shape.num_classes:
        raise ValueError("labels must lie in [0, num_classes)")
    out = params.copy()
    if cfg.local_epochs == 0 or cfg.learning_rate == 0:
        return out

    rng = np.random.default_rng(seed)
    velocity = np.zeros_like(out.flat)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, g = loss_and_grad(out, features[batch], labels[batch])
            velocity = cfg.momentum * velocity + g
            out.flat -= cfg.learning_rate * velocity
    return out
