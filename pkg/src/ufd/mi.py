"""Neural mutual-information estimation between paired feature batches.

A two-layer discriminator T(a, b) scores pairs; Jensen-Shannon and
Donsker-Varadhan objectives turn those scores into MI estimates. Negative
pairs come from in-batch derangements (no row is paired with itself). The
JSD form is the training currency downstream; the DV form is kept as a
reference estimator in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    AdamState,
    LinearLayer,
    Matrix,
    Rng,
    ShapeError,
    adam_step,
    init_uniform,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
    sigmoid,
    softmax,
    softplus,
    spawn_rng,
)

NegativePairing = np.ndarray  # intp indices, a fixed-point-free permutation


class Discriminator:
    """Pair scorer: concat(a, b) -> hidden relu -> scalar, per row."""

    def __init__(self, dim_a: int, dim_b: int, hidden: int):
        self.dim_a = dim_a
        self.dim_b = dim_b
        self.layer1 = LinearLayer(dim_a + dim_b, hidden)
        self.layer2 = LinearLayer(hidden, 1)

    def init_params(self, rng: Rng) -> "Discriminator":
        init_uniform(self.layer1, rng)
        init_uniform(self.layer2, rng)
        return self

    def zero_grads(self) -> None:
        self.layer1.zero_grads()
        self.layer2.zero_grads()

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for lname, layer in (("layer1", self.layer1), ("layer2", self.layer2)):
            for pname, value, grad in layer.parameters():
                out.append((f"{lname}.{pname}", value, grad))
        return out


def _forward(disc: Discriminator, a: Matrix, b: Matrix):
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] != disc.dim_a or b.shape[1] != disc.dim_b:
        raise ShapeError(
            f"discriminator expects ({disc.dim_a}, {disc.dim_b}) columns, "
            f"got ({a.shape[1]}, {b.shape[1]})"
        )
    z = np.concatenate([a, b], axis=1)
    pre = linear_forward(disc.layer1, z)
    hid = relu(pre)
    out = linear_forward(disc.layer2, hid)
    return out[:, 0], (z, pre, hid)


def _backward(disc: Discriminator, cache, dscores: np.ndarray):
    """Backprop score gradients; accumulates into disc, returns (da, db)."""
    z, pre, hid = cache
    dhid = linear_backward(disc.layer2, hid, dscores[:, None])
    dpre = relu_backward(pre, dhid)
    dz = linear_backward(disc.layer1, z, dpre)
    return dz[:, : disc.dim_a], dz[:, disc.dim_a :]


def disc_score(disc: Discriminator, a: Matrix, b: Matrix) -> np.ndarray:
    """Row-wise scores T(a_i, b_i), shape (n,)."""
    return _forward(disc, a, b)[0]


def sample_derangement(n: int, rng: Rng) -> NegativePairing:
    """Fixed-point-free permutation of range(n).

    Conjugates a random cyclic shift by a random permutation: the result is
    always an n-cycle, so no index maps to itself. For n = 3 the two possible
    3-cycles appear with equal probability.
    """
    if n < 2:
        raise ShapeError(f"derangement needs n >= 2, got {n}")
    perm = rng.permutation(n)
    offset = int(rng.integers(1, n))
    out = np.empty(n, dtype=np.intp)
    out[perm] = perm[(np.arange(n) + offset) % n]
    return out


def validate_pairing(neg: NegativePairing, n: int) -> NegativePairing:
    neg = np.asarray(neg)
    if neg.shape != (n,):
        raise ShapeError(f"pairing must have shape ({n},), got {neg.shape}")
    if np.any(np.sort(neg) != np.arange(n)):
        raise ShapeError("pairing is not a permutation of range(n)")
    if np.any(neg == np.arange(n)):
        raise ShapeError("pairing has a fixed point (row paired with itself)")
    return neg.astype(np.intp)


def jsd_mi(disc: Discriminator, x: Matrix, y: Matrix, neg: NegativePairing) -> float:
    """Jensen-Shannon MI lower bound.

    mean(-softplus(-T(x_i, y_i))) - mean(softplus(T(x_neg[i], y_i))).
    Zero scores give exactly -2 ln 2. Negative pairs permute x against y.
    """
    n = x.shape[0]
    neg = validate_pairing(neg, n)
    s_joint = disc_score(disc, x, y)
    s_neg = disc_score(disc, x[neg], y)
    return float(np.mean(-softplus(-s_joint)) - np.mean(softplus(s_neg)))


def dv_mi(disc: Discriminator, x: Matrix, y: Matrix, neg: NegativePairing) -> float:
    """Donsker-Varadhan bound in nats: mean joint score minus log-mean-exp
    of negative scores (max-shifted so large scores do not overflow)."""
    n = x.shape[0]
    neg = validate_pairing(neg, n)
    s_joint = disc_score(disc, x, y)
    s_neg = disc_score(disc, x[neg], y)
    shift = s_neg.max()
    lme = shift + np.log(np.mean(np.exp(s_neg - shift)))
    return float(np.mean(s_joint) - lme)


def jsd_mi_grads(
    disc: Discriminator,
    x: Matrix,
    y: Matrix,
    neg: NegativePairing,
    scale: float = 1.0,
):
    """JSD estimate plus gradients of (scale * estimate).

    Accumulates discriminator gradients in place and returns
    (estimate, d/dx, d/dy). The x gradient includes the permuted negative
    path, scattered back to the original rows.
    """
    n = x.shape[0]
    neg = validate_pairing(neg, n)
    s_joint, cache_j = _forward(disc, x, y)
    s_neg, cache_n = _forward(disc, x[neg], y)
    value = float(np.mean(-softplus(-s_joint)) - np.mean(softplus(s_neg)))

    ds_joint = scale * sigmoid(-s_joint) / n
    ds_neg = -scale * sigmoid(s_neg) / n
    da_j, dy_j = _backward(disc, cache_j, ds_joint)
    da_n, dy_n = _backward(disc, cache_n, ds_neg)

    dx = da_j.copy()
    np.add.at(dx, neg, da_n)
    return value, dx, dy_j + dy_n


def dv_mi_grads(
    disc: Discriminator,
    x: Matrix,
    y: Matrix,
    neg: NegativePairing,
    scale: float = 1.0,
):
    """DV estimate plus gradients of (scale * estimate); see jsd_mi_grads."""
    n = x.shape[0]
    neg = validate_pairing(neg, n)
    s_joint, cache_j = _forward(disc, x, y)
    s_neg, cache_n = _forward(disc, x[neg], y)
    shift = s_neg.max()
    lme = shift + np.log(np.mean(np.exp(s_neg - shift)))
    value = float(np.mean(s_joint) - lme)

    ds_joint = np.full(n, scale / n)
    ds_neg = -scale * softmax(s_neg)
    da_j, dy_j = _backward(disc, cache_j, ds_joint)
    da_n, dy_n = _backward(disc, cache_n, ds_neg)

    dx = da_j.copy()
    np.add.at(dx, neg, da_n)
    return value, dx, dy_j + dy_n


# ---------------------------------------------------------------------------
# Correlated-Gaussian benchmark: the estimators must order known MI levels.


def gaussian_analytic_mi(rho: float) -> float:
    """Exact MI of a standard bivariate Gaussian with correlation rho."""
    if not -1.0 < rho < 1.0:
        raise ShapeError(f"rho must be in (-1, 1), got {rho}")
    return -0.5 * float(np.log(1.0 - rho * rho)) + 0.0  # +0.0 avoids -0.0


def bivariate_gaussian_batch(rng: Rng, n: int, rho: float):
    """n paired samples with correlation rho; returns (x, y), each (n, 1)."""
    x = rng.standard_normal((n, 1))
    eps = rng.standard_normal((n, 1))
    y = rho * x + np.sqrt(1.0 - rho * rho) * eps
    return x, y


@dataclass
class BenchResult:
    estimator: str
    rho: float
    seed: int
    estimate: float
    analytic: float


def train_mi_estimator(
    estimator: str,
    rho: float,
    seed: int,
    steps: int = 2000,
    batch: int = 64,
    learning_rate: float = 1e-4,
    hidden: int = 64,
    eval_samples: int = 4096,
) -> BenchResult:
    """Train a scalar-input critic by gradient ascent on one estimator, then
    score a fresh batch with it."""
    if estimator not in ("jsd", "dv"):
        raise ShapeError(f"unknown estimator {estimator!r}")
    grads_fn = jsd_mi_grads if estimator == "jsd" else dv_mi_grads
    value_fn = jsd_mi if estimator == "jsd" else dv_mi

    disc = Discriminator(1, 1, hidden)
    disc.init_params(spawn_rng(seed, 0))
    data_rng = spawn_rng(seed, 1)
    params = [p for _, p, _ in disc.parameters()]
    grads = [g for _, _, g in disc.parameters()]
    adam = AdamState(params, learning_rate=learning_rate)

    for _ in range(steps):
        x, y = bivariate_gaussian_batch(data_rng, batch, rho)
        neg = sample_derangement(batch, data_rng)
        disc.zero_grads()
        grads_fn(disc, x, y, neg, scale=-1.0)  # descend -estimate == ascend
        adam_step(adam, params, grads)

    x, y = bivariate_gaussian_batch(data_rng, eval_samples, rho)
    neg = sample_derangement(eval_samples, data_rng)
    est = value_fn(disc, x, y, neg)
    return BenchResult(estimator, rho, seed, est, gaussian_analytic_mi(rho))


def mi_benchmark(
    rhos=(0.0, 0.5, 0.9),
    seeds: int = 5,
    steps: int = 2000,
    batch: int = 64,
    learning_rate: float = 1e-4,
    hidden: int = 64,
    base_seed: int = 0,
) -> dict[str, dict[float, float]]:
    """Mean trained estimate per estimator per correlation level."""
    means: dict[str, dict[float, float]] = {"jsd": {}, "dv": {}}
    for estimator in ("jsd", "dv"):
        for rho in rhos:
            vals = [
                train_mi_estimator(
                    estimator,
                    rho,
                    seed=base_seed + s,
                    steps=steps,
                    batch=batch,
                    learning_rate=learning_rate,
                    hidden=hidden,
                ).estimate
                for s in range(seeds)
            ]
            means[estimator][rho] = float(np.mean(vals))
    return means
