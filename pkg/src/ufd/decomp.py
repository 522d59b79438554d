"""Feature decomposition: split a document embedding h into a domain-invariant
part f_s and a domain-specific part f_p, trained purely from unlabeled data.

Three discriminators estimate (JSD) mutual information between feature pairs:

  t_s scores (h, f_s)        kept HIGH   (f_s stays informative about h)
  t_r scores (v_s, f_s)      kept HIGH   (both invariant layers agree)
  t_p scores (f_s, f_p)      kept LOW    (the two parts share little)
  t_p also scores (v_s, v_p) kept LOW    (optional mid-layer variant)

All terms are combined into one scalar objective and every parameter,
discriminators included, descends it jointly; there is no adversarial
alternation. Minus signs on the first two terms turn "keep high" into
descent.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import dataio
from .mi import (
    Discriminator,
    NegativePairing,
    jsd_mi,
    jsd_mi_grads,
    sample_derangement,
)
from .nn import (
    AdamState,
    ContractError,
    LinearLayer,
    Matrix,
    Rng,
    ShapeError,
    adam_step,
    init_uniform,
    linear_backward,
    linear_forward,
    params_checksum,
    relu,
    relu_backward,
)


class InvariantExtractor:
    """Two relu layers with residual additions after each activation.

    v = relu(W1 h + b1) + h, f = relu(W2 v + b2) + v. With all parameters at
    zero the extractor is exactly the identity map.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.layer1 = LinearLayer(dim, dim)
        self.layer2 = LinearLayer(dim, dim)

    def init_params(self, rng: Rng) -> "InvariantExtractor":
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


class SpecificExtractor:
    """Two plain relu layers (no residuals); outputs are non-negative."""

    def __init__(self, dim: int):
        self.dim = dim
        self.layer1 = LinearLayer(dim, dim)
        self.layer2 = LinearLayer(dim, dim)

    init_params = InvariantExtractor.init_params
    zero_grads = InvariantExtractor.zero_grads
    parameters = InvariantExtractor.parameters


@dataclass
class _ExtractorCache:
    h: Matrix
    pre1: Matrix
    v: Matrix
    pre2: Matrix
    f: Matrix


def _invariant_forward(ext: InvariantExtractor, h: Matrix) -> _ExtractorCache:
    pre1 = linear_forward(ext.layer1, h)
    v = relu(pre1) + h
    pre2 = linear_forward(ext.layer2, v)
    f = relu(pre2) + v
    return _ExtractorCache(h, pre1, v, pre2, f)


def _invariant_backward(
    ext: InvariantExtractor, cache: _ExtractorCache, df: Matrix, dv_extra: Matrix
) -> Matrix:
    dpre2 = relu_backward(cache.pre2, df)
    dv = linear_backward(ext.layer2, cache.v, dpre2) + df + dv_extra
    dpre1 = relu_backward(cache.pre1, dv)
    return linear_backward(ext.layer1, cache.h, dpre1) + dv


def _specific_forward(ext: SpecificExtractor, h: Matrix) -> _ExtractorCache:
    pre1 = linear_forward(ext.layer1, h)
    v = relu(pre1)
    pre2 = linear_forward(ext.layer2, v)
    f = relu(pre2)
    return _ExtractorCache(h, pre1, v, pre2, f)


def _specific_backward(
    ext: SpecificExtractor, cache: _ExtractorCache, df: Matrix, dv_extra: Matrix
) -> Matrix:
    dpre2 = relu_backward(cache.pre2, df)
    dv = linear_backward(ext.layer2, cache.v, dpre2) + dv_extra
    dpre1 = relu_backward(cache.pre1, dv)
    return linear_backward(ext.layer1, cache.h, dpre1)


@dataclass
class LossWeights:
    """Term weights. delta = None means "use gamma" wherever the mid-layer
    term is active; pass an explicit value to decouple them."""

    alpha: float = 1.0
    beta: float = 0.3
    gamma: float = 1.0
    delta: float | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ShapeError(f"weight {name} must be finite and >= 0, got {val}")
        if self.delta is not None and (not np.isfinite(self.delta) or self.delta < 0):
            raise ShapeError(f"weight delta must be finite and >= 0, got {self.delta}")

    @property
    def resolved_delta(self) -> float:
        return self.gamma if self.delta is None else self.delta


class AblationMode(Enum):
    """Which loss terms participate; values double as CLI names."""

    MAX_MI = "max-mi"
    MAX_MIN_MI = "max-min-mi"
    TWO_MAX_MIN_MI = "2max-min-mi"
    MAX_TWO_MIN = "max-2min"
    TWO_MAX_TWO_MIN = "2max-2min"

    @property
    def active_terms(self) -> tuple[str, ...]:
        return _MODE_TERMS[self]

    @classmethod
    def from_name(cls, name: str) -> "AblationMode":
        for mode in cls:
            if mode.value == name:
                return mode
        known = ", ".join(m.value for m in cls)
        raise ShapeError(f"unknown ablation mode {name!r} (known: {known})")


_MODE_TERMS = {
    AblationMode.MAX_MI: ("s",),
    AblationMode.MAX_MIN_MI: ("s", "p"),
    AblationMode.TWO_MAX_MIN_MI: ("s", "r", "p"),
    AblationMode.MAX_TWO_MIN: ("s", "p", "m"),
    AblationMode.TWO_MAX_TWO_MIN: ("s", "r", "p", "m"),
}

_TERM_ORDER = ("s", "r", "p", "m")


@dataclass
class TermPairings:
    """One negative pairing per active loss term."""

    s: NegativePairing | None = None
    r: NegativePairing | None = None
    p: NegativePairing | None = None
    m: NegativePairing | None = None

    @classmethod
    def sample(cls, n: int, mode: AblationMode, rng: Rng) -> "TermPairings":
        """Fresh derangement per active term, drawn in the fixed order
        s, r, p, m from a single stream."""
        pairings = cls()
        for term in _TERM_ORDER:
            if term in mode.active_terms:
                setattr(pairings, term, sample_derangement(n, rng))
        return pairings

    def get(self, term: str) -> NegativePairing:
        val = getattr(self, term)
        if val is None:
            raise ContractError(f"no pairing supplied for active term {term!r}")
        return val


class UfdModel:
    """The full decomposition model: both extractors plus three
    discriminators, with one shared Adam state over every parameter."""

    def __init__(self, dim: int, rng: Rng | None = None, learning_rate: float = 1e-4):
        self.dim = dim
        self.f_s = InvariantExtractor(dim)
        self.f_p = SpecificExtractor(dim)
        self.t_s = Discriminator(dim, dim, dim)
        self.t_r = Discriminator(dim, dim, dim)
        self.t_p = Discriminator(dim, dim, dim)
        self.frozen = False
        if rng is not None:
            self.init_params(rng)
        self.adam = AdamState(self.param_arrays(), learning_rate=learning_rate)

    def init_params(self, rng: Rng) -> "UfdModel":
        # fixed order so a given stream always lands on the same weights
        self.f_s.init_params(rng)
        self.f_p.init_params(rng)
        self.t_s.init_params(rng)
        self.t_r.init_params(rng)
        self.t_p.init_params(rng)
        return self

    def components(self):
        return [
            ("f_s", self.f_s),
            ("f_p", self.f_p),
            ("t_s", self.t_s),
            ("t_r", self.t_r),
            ("t_p", self.t_p),
        ]

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for cname, comp in self.components():
            for pname, value, grad in comp.parameters():
                out.append((f"{cname}.{pname}", value, grad))
        return out

    def param_arrays(self) -> list[np.ndarray]:
        return [p for _, p, _ in self.parameters()]

    def grad_arrays(self) -> list[np.ndarray]:
        return [g for _, _, g in self.parameters()]

    def zero_grads(self) -> None:
        for _, comp in self.components():
            comp.zero_grads()

    def freeze(self) -> "UfdModel":
        self.frozen = True
        return self

    def checksum(self) -> str:
        """Digest of all parameter bytes; stable iff no parameter changed."""
        return params_checksum((name, val) for name, val, _ in self.parameters())


def fs_forward(model: UfdModel, h: Matrix) -> tuple[Matrix, Matrix]:
    """Invariant features for a batch: returns (v_s, f_s)."""
    cache = _invariant_forward(model.f_s, _check_batch(model, h))
    return cache.v, cache.f


def fp_forward(model: UfdModel, h: Matrix) -> tuple[Matrix, Matrix]:
    """Specific features for a batch: returns (v_p, f_p)."""
    cache = _specific_forward(model.f_p, _check_batch(model, h))
    return cache.v, cache.f


def _check_batch(model: UfdModel, h: Matrix, min_rows: int = 1) -> Matrix:
    if h.ndim != 2 or h.shape[1] != model.dim:
        raise ShapeError(f"batch must be (n, {model.dim}), got {h.shape}")
    if h.shape[0] < min_rows:
        raise ShapeError(f"batch needs at least {min_rows} rows, got {h.shape[0]}")
    return h


def loss_s(model: UfdModel, h: Matrix, neg: NegativePairing) -> float:
    """Informativeness term: negated MI between h and f_s."""
    _, f_s = fs_forward(model, h)
    return -jsd_mi(model.t_s, h, f_s, neg)


def loss_r(model: UfdModel, h: Matrix, neg: NegativePairing) -> float:
    """Layer-agreement term: negated MI between v_s and f_s."""
    cache = _invariant_forward(model.f_s, _check_batch(model, h))
    return -jsd_mi(model.t_r, cache.v, cache.f, neg)


def loss_p(model: UfdModel, h: Matrix, neg: NegativePairing) -> float:
    """Disentanglement term: MI between f_s and f_p, descended directly."""
    _, f_s = fs_forward(model, h)
    _, f_p = fp_forward(model, h)
    return jsd_mi(model.t_p, f_s, f_p, neg)


def loss_m(model: UfdModel, h: Matrix, neg: NegativePairing) -> float:
    """Mid-layer disentanglement: MI between v_s and v_p, scored by the same
    discriminator as loss_p."""
    v_s, _ = fs_forward(model, h)
    v_p, _ = fp_forward(model, h)
    return jsd_mi(model.t_p, v_s, v_p, neg)


def _term_values_to_total(terms: dict[str, float], weights: LossWeights) -> float:
    total = 0.0
    if "s" in terms:
        total += weights.alpha * terms["s"]
    if "r" in terms:
        total += weights.beta * terms["r"]
    if "p" in terms:
        total += weights.gamma * terms["p"]
    if "m" in terms:
        total += weights.resolved_delta * terms["m"]
    return total


def _resolve_pairings(
    n: int, mode: AblationMode, rng: Rng | None, pairings: TermPairings | None
) -> TermPairings:
    if (rng is None) == (pairings is None):
        raise ContractError("supply exactly one of rng or pairings")
    if pairings is None:
        pairings = TermPairings.sample(n, mode, rng)
    return pairings


def ufd_loss(
    model: UfdModel,
    h: Matrix,
    weights: LossWeights,
    mode: AblationMode,
    rng: Rng | None = None,
    pairings: TermPairings | None = None,
) -> tuple[float, dict[str, float]]:
    """Weighted objective and per-term breakdown (forward only).

    The breakdown holds the raw term values (loss_s, ...) for the mode's
    active terms; the scalar is their weighted sum.
    """
    h = _check_batch(model, h, min_rows=2)
    pairings = _resolve_pairings(h.shape[0], mode, rng, pairings)
    term_fns = {"s": loss_s, "r": loss_r, "p": loss_p, "m": loss_m}
    terms = {
        t: term_fns[t](model, h, pairings.get(t)) for t in mode.active_terms
    }
    total = _term_values_to_total(terms, weights)
    return total, {f"loss_{t}": v for t, v in terms.items()}


def ufd_loss_and_grads(
    model: UfdModel,
    h: Matrix,
    weights: LossWeights,
    mode: AblationMode,
    pairings: TermPairings,
) -> tuple[float, dict[str, float]]:
    """Objective, breakdown, and gradients accumulated into the model.

    Callers are responsible for zeroing gradients first. Input embeddings are
    data; no gradient is returned for h.
    """
    h = _check_batch(model, h, min_rows=2)
    n = h.shape[0]
    active = mode.active_terms

    fs_cache = _invariant_forward(model.f_s, h)
    need_fp = "p" in active or "m" in active
    fp_cache = _specific_forward(model.f_p, h) if need_fp else None

    df_s = np.zeros((n, model.dim))
    dv_s = np.zeros((n, model.dim))
    df_p = np.zeros((n, model.dim))
    dv_p = np.zeros((n, model.dim))
    terms: dict[str, float] = {}

    if "s" in active:
        val, _, dy = jsd_mi_grads(
            model.t_s, h, fs_cache.f, pairings.get("s"), scale=-weights.alpha
        )
        terms["s"] = -val
        df_s += dy
    if "r" in active:
        val, dx, dy = jsd_mi_grads(
            model.t_r, fs_cache.v, fs_cache.f, pairings.get("r"), scale=-weights.beta
        )
        terms["r"] = -val
        dv_s += dx
        df_s += dy
    if "p" in active:
        val, dx, dy = jsd_mi_grads(
            model.t_p, fs_cache.f, fp_cache.f, pairings.get("p"), scale=weights.gamma
        )
        terms["p"] = val
        df_s += dx
        df_p += dy
    if "m" in active:
        val, dx, dy = jsd_mi_grads(
            model.t_p,
            fs_cache.v,
            fp_cache.v,
            pairings.get("m"),
            scale=weights.resolved_delta,
        )
        terms["m"] = val
        dv_s += dx
        dv_p += dy

    _invariant_backward(model.f_s, fs_cache, df_s, dv_s)
    if fp_cache is not None:
        _specific_backward(model.f_p, fp_cache, df_p, dv_p)

    total = _term_values_to_total(terms, weights)
    return total, {f"loss_{t}": v for t, v in terms.items()}


def ufd_train_step(
    model: UfdModel,
    batch: Matrix,
    weights: LossWeights,
    mode: AblationMode,
    rng: Rng,
) -> dict[str, float]:
    """One joint gradient-descent step on all model parameters.

    Returns {"total": weighted objective, "loss_s": ..., ...} for the active
    terms, valued at the pre-update parameters.
    """
    if model.frozen:
        raise ContractError("model is frozen; training steps are not allowed")
    batch = _check_batch(model, batch, min_rows=2)
    pairings = TermPairings.sample(batch.shape[0], mode, rng)
    model.zero_grads()
    total, terms = ufd_loss_and_grads(model, batch, weights, mode, pairings)
    adam_step(model.adam, model.param_arrays(), model.grad_arrays())
    return {"total": total, **terms}


# ---------------------------------------------------------------------------
# Checkpointing: parameter tensors only; optimizer state is rebuilt on load.


def model_tensors(model: UfdModel) -> dict[str, np.ndarray]:
    """Named parameter tensors in a stable order; biases widen to (1, n)."""
    out = {}
    for name, value, _ in model.parameters():
        out[name] = value if value.ndim == 2 else value[None, :]
    return out


def save_ufd(model: UfdModel, path) -> None:
    dataio.write_checkpoint(path, model_tensors(model))


def load_ufd(path, learning_rate: float = 1e-4) -> UfdModel:
    """Rebuild a model from a checkpoint; returns it unfrozen with fresh
    optimizer state."""
    tensors = dataio.read_checkpoint(path)
    key = "f_s.layer1.weight"
    if key not in tensors:
        raise dataio.DataFormatError(f"checkpoint is missing tensor {key!r}")
    dim = tensors[key].shape[0]
    model = UfdModel(dim, learning_rate=learning_rate)
    expected = model_tensors(model)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise dataio.DataFormatError(
            f"checkpoint tensor names do not match model (missing {missing}, "
            f"unexpected {extra})"
        )
    for name, value, _ in model.parameters():
        stored = tensors[name]
        target_shape = value.shape if value.ndim == 2 else (1,) + value.shape
        if stored.shape != target_shape:
            raise dataio.DataFormatError(
                f"tensor {name!r} has shape {stored.shape}, expected {target_shape}"
            )
        value[...] = stored.reshape(value.shape)
    return model


def clone_model(model: UfdModel) -> UfdModel:
    """Deep copy, optimizer state included."""
    return copy.deepcopy(model)
