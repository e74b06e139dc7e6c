"""Small ReLU multilayer perceptron with hand-written backprop.

Parameters live in a single flat float64 vector. The layout records one
segment per weight matrix and one per bias vector, in forward order:
``W1, b1, W2, b2, ...``. Weight matrices are stored row-major with shape
``(fan_in, fan_out)`` so a forward pass is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericInputError


@dataclass(frozen=True)
class LayerLayout:
    boundaries: tuple[tuple[int, int], ...]
    total_dim: int

    def __post_init__(self):
        if not self.boundaries:
            raise ConfigurationError("layout needs at least one layer")
        expected = 0
        for offset, length in self.boundaries:
            if offset != expected or length < 1:
                raise ConfigurationError(f"non-contiguous layout segment ({offset}, {length})")
            expected += length
        if expected != self.total_dim:
            raise ConfigurationError(f"layout covers {expected} entries, total_dim is {self.total_dim}")

    @classmethod
    def from_lengths(cls, lengths: Sequence[int]) -> "LayerLayout":
        bounds = []
        offset = 0
        for n in lengths:
            bounds.append((offset, int(n)))
            offset += int(n)
        return cls(tuple(bounds), offset)

    @property
    def num_layers(self) -> int:
        return len(self.boundaries)

    def slices(self) -> list[slice]:
        return [slice(o, o + n) for o, n in self.boundaries]

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[s] for s in self.slices()]

    def layer_index(self) -> np.ndarray:
        """Layer id of every coordinate, length ``total_dim``."""
        return np.repeat(np.arange(self.num_layers), [n for _, n in self.boundaries])


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    layout: LayerLayout
    widths: tuple[int, ...]

    def __post_init__(self):
        if self.values.shape != (self.layout.total_dim,):
            raise DimensionError(f"expected {self.layout.total_dim} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericInputError("model parameters must be finite")

    def matrices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views per dense layer."""
        parts = self.layout.split(self.values)
        out = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out.append((parts[2 * i].reshape(fan_in, fan_out), parts[2 * i + 1]))
        return out


@dataclass(frozen=True)
class GradientUpdate:
    values: np.ndarray
    layout: LayerLayout
    client_id: int = 0
    sample_count: int = 1

    def __post_init__(self):
        if self.values.shape != (self.layout.total_dim,):
            raise DimensionError(f"expected {self.layout.total_dim} values, got {self.values.shape}")
        if self.sample_count < 1:
            raise ConfigurationError("sample_count must be positive")
        if not np.all(np.isfinite(self.values)):
            raise NumericInputError(f"update from client {self.client_id} has non-finite entries")

    def layers(self) -> list[np.ndarray]:
        return self.layout.split(self.values)

    def replace(self, values: np.ndarray) -> "GradientUpdate":
        return GradientUpdate(np.asarray(values, dtype=np.float64), self.layout, self.client_id, self.sample_count)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int | None = field(default=None)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionError("inputs must be (examples, features) with one label per row")
        if self.num_classes is not None and self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ConfigurationError("labels outside class range")

    def __len__(self) -> int:
        return self.labels.shape[0]


def layout_for_widths(widths: Sequence[int]) -> LayerLayout:
    lengths = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lengths += [fan_in * fan_out, fan_out]
    return LayerLayout.from_lengths(lengths)


def init_params(widths: Sequence[int], seed: int) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ConfigurationError("need at least an input and an output width")
    if min(widths) < 1:
        raise ConfigurationError("layer widths must be >= 1")
    rng = np.random.default_rng(seed)
    layout = layout_for_widths(widths)
    chunks = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelParams(np.concatenate(chunks), layout, widths)


def _forward(params: ModelParams, x: np.ndarray):
    acts = [x]
    pre = []
    layers = params.matrices()
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return acts, pre


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(params: ModelParams, batch: Batch) -> None:
    if batch.inputs.shape[1] != params.widths[0]:
        raise DimensionError(f"batch has {batch.inputs.shape[1]} features, model expects {params.widths[0]}")
    if not np.all(np.isfinite(batch.inputs)):
        raise NumericInputError("batch inputs contain NaN or inf")


def loss(params: ModelParams, batch: Batch) -> float:
    """Mean softmax cross-entropy."""
    _check_batch(params, batch)
    acts, _ = _forward(params, batch.inputs)
    logits = acts[-1]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def _flat_gradient(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    acts, pre = _forward(params, x)
    probs = _softmax(acts[-1])
    delta = probs
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    layers = params.matrices()
    grads = [None] * (2 * len(layers))
    for i in range(len(layers) - 1, -1, -1):
        grads[2 * i] = (acts[i].T @ delta).ravel()
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)
    return np.concatenate(grads)


def compute_gradient(params: ModelParams, batch: Batch, client_id: int = 0) -> GradientUpdate:
    """Mean cross-entropy gradient over ``batch`` in layout order."""
    _check_batch(params, batch)
    if len(batch) == 0:
        raise ConfigurationError("cannot take a gradient over an empty batch")
    g = _flat_gradient(params, batch.inputs, np.asarray(batch.labels, dtype=np.int64))
    return GradientUpdate(g, params.layout, client_id, len(batch))


def apply_update(params: ModelParams, aggregate: GradientUpdate, eta: float) -> ModelParams:
    """One global step ``w - eta * g``."""
    if aggregate.layout != params.layout:
        raise DimensionError("aggregate layout does not match model layout")
    return ModelParams(params.values - eta * aggregate.values, params.layout, params.widths)


def local_train(
    params: ModelParams,
    inputs: np.ndarray,
    labels: np.ndarray,
    eta: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    client_id: int = 0,
) -> GradientUpdate:
    """Run local mini-batch SGD and return the parameter delta divided by ``eta``.

    The returned vector is what a client submits: applying it with the same
    ``eta`` on the server reproduces the client's local trajectory.
    """
    if len(labels) == 0:
        raise ConfigurationError("client has no data")
    if not np.all(np.isfinite(inputs)):
        raise NumericInputError("client inputs contain NaN or inf")
    labels = np.asarray(labels, dtype=np.int64)
    w = params.values.copy()
    local = ModelParams(w, params.layout, params.widths)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            # ModelParams views share w, so in-place updates are seen by the next forward pass
            w -= eta * _flat_gradient(local, inputs[idx], labels[idx])
    if not np.all(np.isfinite(w)):
        raise NumericInputError(f"client {client_id} diverged during local training")
    return GradientUpdate((params.values - w) / eta, params.layout, client_id, n)


def predict(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    acts, _ = _forward(params, inputs)
    return acts[-1].argmax(axis=1)


def evaluate(params: ModelParams, dataset) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on a Batch or Dataset."""
    if len(dataset.labels) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    batch = dataset if isinstance(dataset, Batch) else Batch(dataset.inputs, dataset.labels)
    _check_batch(params, batch)
    acts, _ = _forward(params, batch.inputs)
    logits = acts[-1]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    labels = np.asarray(batch.labels, dtype=np.int64)
    acc = float((logits.argmax(axis=1) == labels).mean())
    return acc, float(-logp[np.arange(len(labels)), labels].mean())
