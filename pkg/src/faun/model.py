"""Small softmax classifiers with hand-written backpropagation.

Parameters live in one flat float64 vector. The layout is frozen: for each
layer in order, the weight matrix of shape ``(fan_in, fan_out)`` in row-major
order, immediately followed by its bias of length ``fan_out``.

Every function that takes a parameter vector also accepts a stack of them with
shape ``(k, d)``; results then carry the same leading axis. This lets several
independent models be evaluated on the same data in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", "model.num_classes")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("all layer widths must be >= 1", "model")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", "model.activation")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(r * c + c for r, c in self.layer_shapes)

    def unflatten(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector (or a ``(k, d)`` stack) into ``(W, b)`` views."""
        check_dim(params, self.num_params)
        lead = params.shape[:-1]
        layers = []
        pos = 0
        for rows, cols in self.layer_shapes:
            w = params[..., pos:pos + rows * cols].reshape(*lead, rows, cols)
            pos += rows * cols
            b = params[..., pos:pos + cols]
            pos += cols
            layers.append((w, b))
        return layers

    def flatten(self, layers) -> np.ndarray:
        parts = []
        for w, b in layers:
            lead = w.shape[:-2]
            parts.append(w.reshape(*lead, -1))
            parts.append(b)
        return np.concatenate(parts, axis=-1)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        layers = []
        shapes = self.layer_shapes
        for i, (rows, cols) in enumerate(shapes):
            gain = 1.0 if i == len(shapes) - 1 else 2.0
            w = rng.normal(0.0, np.sqrt(gain / rows), size=(rows, cols))
            layers.append((w, np.zeros(cols)))
        return self.flatten(layers)


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", "learning_rate")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)", "momentum")

    @classmethod
    def zeros(cls, dim: int, learning_rate: float, momentum: float = 0.0) -> "OptimizerState":
        return cls(learning_rate, momentum, np.zeros(dim))


def check_dim(v: np.ndarray, dim: int) -> None:
    if v.shape[-1] != dim:
        raise ConfigError(f"vector has dimension {v.shape[-1]}, expected {dim}")


def _check_batch(spec: ModelSpec, features: np.ndarray, labels: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ConfigError(
            f"features have shape {features.shape}, expected (n, {spec.input_dim})"
        )
    if labels.shape != (features.shape[0],):
        raise ConfigError("labels must be a vector with one entry per example")
    if not np.all(np.isfinite(features)):
        raise DataError("features contain non-finite values")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise DataError(f"labels must lie in [0, {spec.num_classes})")


def _forward_cache(params, spec, features):
    layers = spec.unflatten(params)
    acts = [features]
    pre = []
    a = features
    for i, (w, b) in enumerate(layers):
        z = a @ w + b[..., None, :]
        if i < len(layers) - 1:
            pre.append(z)
            a = np.maximum(z, 0.0)
            acts.append(a)
        else:
            logits = z
    return layers, acts, pre, logits


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _per_example_loss(logits, labels):
    logp = _log_softmax(logits)
    return -np.take_along_axis(logp, np.broadcast_to(labels[:, None], logp.shape[:-1] + (1,)), axis=-1)[..., 0]


def logits(params: np.ndarray, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    return _forward_cache(params, spec, features)[3]


def predict(params: np.ndarray, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(logits(params, spec, features), axis=-1)


def per_example_loss(params, spec: ModelSpec, features, labels) -> np.ndarray:
    _check_batch(spec, features, labels)
    return _per_example_loss(logits(params, spec, features), labels)


def forward(params: np.ndarray, spec: ModelSpec, batch):
    """Return ``(logits, mean cross-entropy)`` for a batch."""
    _check_batch(spec, batch.features, batch.labels)
    out = logits(params, spec, batch.features)
    return out, _per_example_loss(out, batch.labels).mean(axis=-1)


def loss_and_gradient(params, spec, features, labels):
    """Mean cross-entropy and its exact gradient. No input validation."""
    layers, acts, pre, out = _forward_cache(params, spec, features)
    n = features.shape[0]
    logp = _log_softmax(out)
    rows = np.arange(n)
    loss = -logp[..., rows, labels].mean(axis=-1)

    dz = np.exp(logp)
    dz[..., rows, labels] -= 1.0
    dz /= n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a = acts[i]
        grads[i] = (np.swapaxes(a, -1, -2) @ dz, dz.sum(axis=-2))
        if i > 0:
            dz = (dz @ np.swapaxes(w, -1, -2)) * (pre[i - 1] > 0)
    return loss, spec.flatten(grads)


def gradient(params: np.ndarray, spec: ModelSpec, batch) -> np.ndarray:
    """Exact gradient of the batch-mean loss with respect to the flat parameters."""
    _check_batch(spec, batch.features, batch.labels)
    check_dim(params, spec.num_params)
    return loss_and_gradient(params, spec, batch.features, batch.labels)[1]


def sgd_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState) -> np.ndarray:
    """Heavy-ball step: ``v <- m*v + g``; ``w <- w - lr*v``. Updates ``state`` in place."""
    check_dim(grad, params.shape[-1])
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    check_dim(state.velocity, params.shape[-1])
    state.velocity = state.momentum * state.velocity + grad
    return params - state.learning_rate * state.velocity


def add(a, b):
    check_dim(b, a.shape[-1])
    return a + b


def sub(a, b):
    check_dim(b, a.shape[-1])
    return a - b


def scale(a, alpha: float):
    return alpha * a


def l2_norm(v) -> float:
    return float(np.sqrt(np.dot(v, v)))


def project_l2_ball(v: np.ndarray, eps: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto the ball ``{x : ||x||_2 <= eps}``."""
    if not eps > 0:
        raise ConfigError("projection radius must be > 0", "epsilon")
    norm = l2_norm(v)
    if norm <= eps:
        return v
    out = v * (eps / norm)
    # rescaling can land one ulp outside the ball; nudge back so projection is idempotent
    while l2_norm(out) > eps:
        out = out * (1.0 - 2.0 ** -52)
    return out
