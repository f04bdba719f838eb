"""Reverse-mode differentiation for fully-connected softmax classifiers.

Parameters live in one flat vector.  Layer ``l`` occupies a contiguous block
holding its weight matrix ``W_l`` (shape ``in_l x out_l``, row-major) followed
by its bias ``b_l``.  The loss is the batch-mean softmax cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, InputError

NONLINEARITIES = ("relu", "tanh")


@dataclass(frozen=True)
class NetworkArchitecture:
    layer_sizes: tuple[int, ...]
    nonlinearity: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ConfigurationError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {sizes}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigurationError(f"unknown nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self) -> int:
        """Number of weight matrices (``n_L``)."""
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @cached_property
    def blocks(self) -> tuple[tuple[slice, slice, tuple[int, int]], ...]:
        """Per layer: (weight slice, bias slice, weight shape)."""
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            out.append((w, b, (fan_in, fan_out)))
        return tuple(out)

    @property
    def n_params(self) -> int:
        """Total parameter count ``D``."""
        return self.blocks[-1][1].stop

    @cached_property
    def layer_of_index(self) -> np.ndarray:
        """Layer id for every flat index."""
        ids = np.empty(self.n_params, dtype=np.int64)
        for layer, (w, b, _) in enumerate(self.blocks):
            ids[w.start:b.stop] = layer
        ids.setflags(write=False)
        return ids

    @cached_property
    def weight_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        for w, _, _ in self.blocks:
            mask[w] = True
        mask.setflags(write=False)
        return mask

    def flat_index(self, layer: int, kind: str, row: int, col: int = 0) -> int:
        """Flat position of ``W_l[row, col]`` (kind ``"weight"``) or ``b_l[row]``."""
        w, b, (fan_in, fan_out) = self.blocks[layer]
        if kind == "weight":
            if not (0 <= row < fan_in and 0 <= col < fan_out):
                raise InputError("weight index out of range")
            return w.start + row * fan_out + col
        if kind == "bias":
            if not 0 <= row < fan_out:
                raise InputError("bias index out of range")
            return b.start + row
        raise InputError(f"kind must be 'weight' or 'bias', got {kind!r}")

    def unflatten(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W_l, b_l)`` into ``params``."""
        params = np.asarray(params)
        if params.shape != (self.n_params,):
            raise ConfigurationError(
                f"parameter vector has shape {params.shape}, expected ({self.n_params},)"
            )
        return [(params[w].reshape(shape), params[b]) for w, b, shape in self.blocks]

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "nonlinearity": self.nonlinearity}

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkArchitecture":
        return cls(tuple(data["layer_sizes"]), data.get("nonlinearity", "relu"))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.ndim != 1 or inputs.shape[0] != labels.shape[0]:
            raise ConfigurationError(
                f"batch shapes inconsistent: inputs {inputs.shape}, labels {labels.shape}"
            )
        if inputs.shape[0] < 1:
            raise ConfigurationError("batch must hold at least one sample")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def check(self, arch: NetworkArchitecture) -> None:
        if self.inputs.shape[1] != arch.input_dim:
            raise ConfigurationError(
                f"batch input_dim {self.inputs.shape[1]} != architecture input {arch.input_dim}"
            )
        if self.labels.min() < 0 or self.labels.max() >= arch.n_classes:
            raise ConfigurationError(f"labels must lie in [0, {arch.n_classes})")


@dataclass
class LossAndGradient:
    loss: float
    accuracy: float
    gradient: np.ndarray = field(repr=False)


def _checked(arch, params, batch):
    params = np.asarray(params, dtype=np.float64)
    layers = arch.unflatten(params)
    batch.check(arch)
    if not np.all(np.isfinite(params)):
        raise InputError("parameter vector contains non-finite entries")
    return layers


def _activation(arch, a):
    if arch.nonlinearity == "relu":
        return np.maximum(a, 0.0)
    return np.tanh(a)


def _cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = float(np.mean(log_z - shifted[rows, labels]))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    return shifted, log_z, loss, accuracy


def forward(arch: NetworkArchitecture, params: np.ndarray, batch: Batch):
    """Return ``(logits, loss, accuracy)``."""
    layers = _checked(arch, params, batch)
    h = batch.inputs
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = _activation(arch, h)
    _, _, loss, accuracy = _cross_entropy(h, batch.labels)
    return h, loss, accuracy


def loss_and_gradient(arch: NetworkArchitecture, params: np.ndarray, batch: Batch,
                      relu_masks=None) -> LossAndGradient:
    """Loss, accuracy and reverse-mode gradient.

    ``relu_masks`` (one boolean array per hidden layer) pins the ReLU activation
    pattern instead of deriving it from the current pre-activations.  With the
    pattern of some base point this evaluates the smooth function that agrees
    with the network on that point's linear region.
    """
    layers = _checked(arch, params, batch)
    hs = [batch.inputs]
    gates = []
    h = batch.inputs
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        a = h @ w + b
        if i < last:
            if arch.nonlinearity == "relu":
                gate = (a > 0.0) if relu_masks is None else relu_masks[i]
                h = a * gate
                gates.append(gate)
            else:
                h = np.tanh(a)
        else:
            h = a
        hs.append(h)
    shifted, log_z, loss, accuracy = _cross_entropy(h, batch.labels)

    n = len(batch)
    delta = np.exp(shifted - log_z[:, None])
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grad = np.empty(arch.n_params)
    for i in range(last, -1, -1):
        wslice, bslice, _ = arch.blocks[i]
        grad[wslice] = (hs[i].T @ delta).ravel()
        grad[bslice] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ layers[i][0].T
        if arch.nonlinearity == "relu":
            # subgradient of relu at 0 is 0
            delta *= gates[i - 1]
        else:
            delta *= 1.0 - hs[i] ** 2
    return LossAndGradient(loss, accuracy, grad)


def relu_pattern(arch: NetworkArchitecture, params: np.ndarray, batch: Batch):
    """Activation masks of the hidden layers at ``params`` (``None`` for tanh)."""
    if arch.nonlinearity != "relu":
        return None
    layers = _checked(arch, params, batch)
    masks = []
    h = batch.inputs
    for w, b in layers[:-1]:
        a = h @ w + b
        masks.append(a > 0.0)
        h = a * masks[-1]
    return masks


def default_hvp_eps(params: np.ndarray) -> float:
    params = np.asarray(params)
    return 1e-3 * max(1.0, float(np.linalg.norm(params))) / math.sqrt(params.size)


def central_difference_hvp(gradient_fn, x, v, eps=None) -> np.ndarray:
    """``(g(x + eps v/|v|) - g(x - eps v/|v|)) / (2 eps) * |v|``."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise InputError(f"direction has shape {v.shape}, expected {x.shape}")
    if eps is None:
        eps = default_hvp_eps(x)
    if not eps > 0:
        raise InputError(f"hvp eps must be positive, got {eps}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise InputError("hvp direction must be nonzero")
    step = (eps / norm) * v
    return (gradient_fn(x + step) - gradient_fn(x - step)) * (norm / (2.0 * eps))


def hessian_vector_product(arch, params, batch, v, eps=None, freeze_pattern: bool = True) -> np.ndarray:
    """Central difference of gradients along ``v``.

    With ``freeze_pattern`` both gradients use the ReLU pattern at ``params``, so
    the result is the Hessian of the network's local polynomial piece (the same
    object automatic differentiation returns, with relu'' = 0).  Without it the
    two gradients may straddle activation boundaries.
    """
    masks = relu_pattern(arch, params, batch) if freeze_pattern else None
    return central_difference_hvp(
        lambda x: loss_and_gradient(arch, x, batch, masks).gradient, params, v, eps
    )


class NetworkLoss:
    """Evaluation context binding an architecture to one fixed batch.

    ``freeze_pattern`` selects the Hessian-vector product flavour, see
    :func:`hessian_vector_product`.
    """

    def __init__(self, arch: NetworkArchitecture, batch: Batch, freeze_pattern: bool = True,
                 batch_id: str | None = None):
        batch.check(arch)
        self.arch = arch
        self.batch = batch
        self.freeze_pattern = freeze_pattern
        self.batch_id = batch_id

    @property
    def dim(self) -> int:
        return self.arch.n_params

    def evaluate(self, x) -> LossAndGradient:
        return loss_and_gradient(self.arch, x, self.batch)

    def loss(self, x) -> float:
        return forward(self.arch, x, self.batch)[1]

    def accuracy(self, x) -> float:
        return forward(self.arch, x, self.batch)[2]

    def gradient(self, x) -> np.ndarray:
        return self.evaluate(x).gradient

    def hvp(self, x, v, eps=None) -> np.ndarray:
        return hessian_vector_product(self.arch, x, self.batch, v, eps, self.freeze_pattern)


class QuadraticField:
    """``L(x) = 1/2 x^T A x`` with a dense symmetric ``A``; test hook for the network."""

    def __init__(self, A):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigurationError("A must be square")
        self.A = 0.5 * (A + A.T)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def loss(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * float(x @ self.A @ x)

    def gradient(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=np.float64)

    def hvp(self, x, v, eps=None) -> np.ndarray:
        return central_difference_hvp(self.gradient, x, v, eps)

    def laplacian(self, x) -> float:
        return float(np.trace(self.A))


class RadialPowerField:
    """``L(x) = |x|^p`` for an even integer ``p >= 2``."""

    def __init__(self, dim: int, power: int = 2):
        if power < 2 or power % 2:
            raise InputError("power must be an even integer >= 2")
        self._dim = int(dim)
        self.power = int(power)

    @property
    def dim(self) -> int:
        return self._dim

    def loss(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(x @ x) ** (self.power // 2)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.power * float(x @ x) ** (self.power // 2 - 1) * x

    def hvp(self, x, v, eps=None) -> np.ndarray:
        return central_difference_hvp(self.gradient, x, v, eps)

    def laplacian(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        p = self.power
        return p * (p + self._dim - 2) * float(x @ x) ** (p // 2 - 1)
