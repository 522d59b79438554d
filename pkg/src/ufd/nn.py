"""Minimal neural-net engine on float64 ndarrays with hand-written gradients.

Everything downstream (estimators, extractors, classifier) is built from the
pieces here: dense layers with explicit gradient buffers, stable activations,
Adam, seeded RNG streams, and a finite-difference gradient checker.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

Matrix = np.ndarray
Rng = np.random.Generator


class UfdError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UfdError):
    """Operands have incompatible or malformed shapes."""


class NonFiniteError(UfdError):
    """A NaN or infinity appeared where a finite value is required."""


class ContractError(UfdError):
    """An API precondition was violated (e.g. training a frozen model)."""


def make_rng(seed: int) -> Rng:
    """Root random stream for a master seed."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rng(seed: int, *key: int) -> Rng:
    """Independent child stream identified by (seed, key).

    Distinct keys give statistically independent streams; equal (seed, key)
    always reproduces the same stream regardless of what other streams drew.
    """
    seq = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(seq))


def ensure_matrix(data, name: str = "matrix") -> Matrix:
    """Coerce to a C-order float64 2-D array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    ensure_finite(arr, name)
    return arr


def ensure_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


class LinearLayer:
    """Affine map y = x @ W.T + b with explicit parameter and gradient buffers.

    Parameters start at zero; call init_uniform to randomize. Gradients
    accumulate across backward calls until zero_grads.
    """

    def __init__(self, in_dim: int, out_dim: int):
        if in_dim < 1 or out_dim < 1:
            raise ShapeError(f"layer dims must be positive, got {in_dim}x{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = np.zeros((out_dim, in_dim))
        self.bias = np.zeros(out_dim)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def zero_grads(self) -> None:
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, value, grad) triples; values and grads are live buffers."""
        return [
            ("weight", self.weight, self.grad_weight),
            ("bias", self.bias, self.grad_bias),
        ]


def init_uniform(layer: LinearLayer, rng: Rng, scale: float = 0.1) -> LinearLayer:
    """Fill weight then bias with Uniform(-scale, scale) draws, in that order."""
    layer.weight[...] = rng.uniform(-scale, scale, size=layer.weight.shape)
    layer.bias[...] = rng.uniform(-scale, scale, size=layer.bias.shape)
    return layer


def linear_forward(layer: LinearLayer, x: Matrix) -> Matrix:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(
            f"linear_forward expects (n, {layer.in_dim}) input, got {x.shape}"
        )
    out = x @ layer.weight.T + layer.bias
    return ensure_finite(out, "linear output")


def linear_backward(layer: LinearLayer, x: Matrix, grad_out: Matrix) -> Matrix:
    """Accumulate parameter gradients and return the gradient w.r.t. x."""
    if grad_out.shape != (x.shape[0], layer.out_dim):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match (n, {layer.out_dim})"
        )
    layer.grad_weight += grad_out.T @ x
    layer.grad_bias += grad_out.sum(axis=0)
    return grad_out @ layer.weight


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return grad_out * (x > 0.0)


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow for large |x|."""
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, stable on both tails."""
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    expx = np.exp(x[~pos])
    out[~pos] = expx / (1.0 + expx)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts 1-D or 2-D input."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()
    if z.ndim != 2:
        raise ShapeError(f"softmax expects 1-D or 2-D input, got shape {z.shape}")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class AdamState:
    """Adam moment buffers for a fixed list of parameter arrays."""

    def __init__(
        self,
        params: Sequence[np.ndarray],
        learning_rate: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [np.zeros_like(p) for p in params]
        self.second_moment = [np.zeros_like(p) for p in params]


def adam_step(
    state: AdamState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
) -> None:
    """One bias-corrected Adam update, applied to params in place.

    Gradient buffers are read but never modified, so callers may inspect them
    after the step.
    """
    if len(params) != len(state.first_moment) or len(params) != len(grads):
        raise ShapeError("adam_step: params/grads/state lengths differ")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("adam_step: parameter/gradient shape mismatch")
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        ensure_finite(p, "parameter after adam_step")


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn re-evaluates the scalar loss from the current parameter values.
    Each entry of each param is perturbed by +/- epsilon in place (and
    restored); the numeric derivative is compared against the corresponding
    entry of grads with relative error |a - n| / max(1e-8, |a| + |n|).

    Entries sitting almost exactly on a relu kink can produce spurious error
    (the two-sided difference straddles the corner); callers checking losses
    with relu layers should use inputs that keep preactivations away from 0.
    """
    if len(params) != len(grads):
        raise ShapeError("finite_diff_check: params and grads lengths differ")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + epsilon
            f_plus = float(loss_fn())
            flat_p[i] = orig - epsilon
            f_minus = float(loss_fn())
            flat_p[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("finite_diff_check: loss is non-finite")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(flat_g[i] - numeric) / max(1e-8, abs(flat_g[i]) + abs(numeric))
            if err > worst:
                worst = err
    return worst


def params_checksum(named_params: Iterable[tuple[str, np.ndarray]]) -> str:
    """SHA-256 over parameter names and exact float64 bytes, order-sensitive."""
    digest = hashlib.sha256()
    for name, value in named_params:
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return digest.hexdigest()
