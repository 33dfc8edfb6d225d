"""Small multi-label classifiers: parameter containers, forward pass, BCE loss,
analytic gradients, thresholded prediction and a finite-difference checker.

Two architectures are supported: a linear classifier (``hidden == 0``) and a
one-hidden-layer tanh MLP. Parameters live in a single flat float64 vector,
laid out as ``W1 (h x d), b1 (h), W2 (C x h), b2 (C)`` for the MLP and
``W (C x d), b (C)`` for the linear model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden_dim: int
    classes: int

    def __post_init__(self):
        if self.input_dim < 1 or self.classes < 1 or self.hidden_dim < 0:
            raise ContractError(f"invalid architecture {self}")

    @property
    def n_params(self) -> int:
        d, h, c = self.input_dim, self.hidden_dim, self.classes
        if h == 0:
            return d * c + c
        return d * h + h + h * c + c


class Example(NamedTuple):
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray
    arch: Arch

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.arch.n_params:
            raise ContractError(
                f"expected {self.arch.n_params} parameters for {self.arch}, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractError("parameters must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(np.array(values, dtype=np.float64), self.arch)

    def unpack(self):
        """Views of the weight matrices and bias vectors."""
        return _unpack(self.values, self.arch)


def _unpack(values: np.ndarray, arch: Arch):
    d, h, c = arch.input_dim, arch.hidden_dim, arch.classes
    if h == 0:
        w = values[: c * d].reshape(c, d)
        return w, values[c * d :]
    o = 0
    w1 = values[o : o + h * d].reshape(h, d)
    o += h * d
    b1 = values[o : o + h]
    o += h
    w2 = values[o : o + c * h].reshape(c, h)
    o += c * h
    return w1, b1, w2, values[o:]


def init_params(arch: Arch, rng: np.random.Generator) -> ModelParams:
    """Uniform init in [-1/sqrt(d), 1/sqrt(d)]."""
    bound = 1.0 / np.sqrt(arch.input_dim)
    return ModelParams(rng.uniform(-bound, bound, size=arch.n_params), arch)


def zeros(arch: Arch) -> ModelParams:
    return ModelParams(np.zeros(arch.n_params), arch)


def _check_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.arch.input_dim:
        raise ContractError(
            f"feature length {x.shape[-1]} does not match input dim {params.arch.input_dim}"
        )
    return x


def _forward(values: np.ndarray, arch: Arch, x: np.ndarray):
    if arch.hidden_dim == 0:
        w, b = _unpack(values, arch)
        return x @ w.T + b, None
    w1, b1, w2, b2 = _unpack(values, arch)
    a = np.tanh(x @ w1.T + b1)
    return a @ w2.T + b2, a


def forward(params: ModelParams, features) -> np.ndarray:
    """Logits for one feature vector (shape ``(C,)``) or a batch (``(n, C)``)."""
    x = _check_features(params, features)
    return _forward(params.values, params.arch, x)[0]


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-_softplus(-z))


def _bce_rows(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))), axis=-1)


def bce_with_logits(logits, labels) -> float:
    """Class-averaged binary cross-entropy with logits, in the numerically stable form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape or z.ndim != 1:
        raise ContractError(f"logits {z.shape} and labels {y.shape} must be equal-length vectors")
    return float(_bce_rows(z, y))


def _check_data(params: ModelParams, features, labels):
    x = _check_features(params, np.atleast_2d(features))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if x.shape[0] == 0:
        raise ContractError("local objective is undefined on empty data")
    if y.shape != (x.shape[0], params.arch.classes):
        raise ContractError(f"labels shape {y.shape} inconsistent with {x.shape[0]} examples")
    return x, y


def local_loss(params: ModelParams, features, labels) -> float:
    """Mean BCE over examples."""
    x, y = _check_data(params, features, labels)
    z, _ = _forward(params.values, params.arch, x)
    return float(np.mean(_bce_rows(z, y)))


def loss_and_grad(values: np.ndarray, arch: Arch, x: np.ndarray, y: np.ndarray):
    """Unchecked loss/gradient on raw arrays; the hot path for local training."""
    n, c = y.shape
    z, a = _forward(values, arch, x)
    loss = float(np.mean(_bce_rows(z, y)))
    dz = (sigmoid(z) - y) / (n * c)
    if arch.hidden_dim == 0:
        grad = np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])
        return loss, grad
    _, _, w2, _ = _unpack(values, arch)
    dh = (dz @ w2) * (1.0 - a * a)
    grad = np.concatenate(
        [(dh.T @ x).ravel(), dh.sum(axis=0), (dz.T @ a).ravel(), dz.sum(axis=0)]
    )
    return loss, grad


def local_gradient(params: ModelParams, features, labels) -> np.ndarray:
    x, y = _check_data(params, features, labels)
    return loss_and_grad(params.values, params.arch, x, y)[1]


def predict(params: ModelParams, features) -> np.ndarray:
    """Binary predictions; a logit of exactly 0 predicts 1."""
    return (forward(params, features) >= 0.0).astype(np.int8)


def finite_difference_grad(fun, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        orig = x[i]
        x[i] = orig + step
        f_plus = fun(x)
        x[i] = orig - step
        f_minus = fun(x)
        x[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def grad_check(arch: Arch, seed: int, n_examples: int = 8, step: float = 1e-5) -> float:
    """Max relative error between ``local_gradient`` and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    if n_examples < 1:
        raise ContractError("grad_check needs at least one example")
    rng = np.random.default_rng(seed)
    params = ModelParams(rng.normal(0.0, 0.5, size=arch.n_params), arch)
    x = rng.normal(size=(n_examples, arch.input_dim))
    y = (rng.random((n_examples, arch.classes)) < 0.5).astype(np.float64)

    analytic = local_gradient(params, x, y)
    numeric = finite_difference_grad(lambda v: loss_and_grad(v, arch, x, y)[0], params.values, step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
