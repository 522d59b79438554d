"""Softmax classifier trained on frozen decomposition features.

Two input wirings: invariant-only (classify on f_s alone) and
invariant+specific (concatenate f_s and f_p, mix through one linear layer,
then score). There is no activation between the combiner and the output
layer. The decomposition model supplying the features must be frozen; a
training step touches classifier parameters only.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import dataio
from .decomp import UfdModel, fp_forward, fs_forward
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
    softmax,
)


class ClassifierInput(Enum):
    """Which decomposition features feed the classifier."""

    INVARIANT_ONLY = "invariant"
    INVARIANT_SPECIFIC = "invariant-specific"

    @classmethod
    def from_name(cls, name: str) -> "ClassifierInput":
        for mode in cls:
            if mode.value == name:
                return mode
        known = ", ".join(m.value for m in cls)
        raise ShapeError(f"unknown input mode {name!r} (known: {known})")


class TaskClassifier:
    """Linear combiner (optional) plus a softmax output layer."""

    def __init__(
        self,
        dim: int,
        n_classes: int = 2,
        input_mode: ClassifierInput = ClassifierInput.INVARIANT_SPECIFIC,
        rng: Rng | None = None,
        learning_rate: float = 1e-4,
    ):
        if n_classes < 2:
            raise ShapeError(f"need at least 2 classes, got {n_classes}")
        self.dim = dim
        self.n_classes = n_classes
        self.input_mode = input_mode
        if input_mode is ClassifierInput.INVARIANT_SPECIFIC:
            self.combiner: LinearLayer | None = LinearLayer(2 * dim, dim)
        else:
            self.combiner = None
        self.output = LinearLayer(dim, n_classes)
        if rng is not None:
            self.init_params(rng)
        self.adam = AdamState(self.param_arrays(), learning_rate=learning_rate)

    def init_params(self, rng: Rng) -> "TaskClassifier":
        if self.combiner is not None:
            init_uniform(self.combiner, rng)
        init_uniform(self.output, rng)
        return self

    def layers(self):
        out = []
        if self.combiner is not None:
            out.append(("combiner", self.combiner))
        out.append(("output", self.output))
        return out

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for lname, layer in self.layers():
            for pname, value, grad in layer.parameters():
                out.append((f"{lname}.{pname}", value, grad))
        return out

    def param_arrays(self) -> list[np.ndarray]:
        return [p for _, p, _ in self.parameters()]

    def grad_arrays(self) -> list[np.ndarray]:
        return [g for _, _, g in self.parameters()]

    def zero_grads(self) -> None:
        for _, layer in self.layers():
            layer.zero_grads()

    def checksum(self) -> str:
        return params_checksum((name, val) for name, val, _ in self.parameters())


def _features_in(clf: TaskClassifier, f_s: Matrix, f_p: Matrix | None) -> Matrix:
    if clf.input_mode is ClassifierInput.INVARIANT_SPECIFIC:
        if f_p is None:
            raise ContractError("invariant-specific classifier needs f_p")
        if f_p.shape != f_s.shape:
            raise ShapeError(f"f_s {f_s.shape} and f_p {f_p.shape} must match")
        return np.concatenate([f_s, f_p], axis=1)
    if f_p is not None:
        raise ContractError("invariant-only classifier must not receive f_p")
    return f_s


def classify(clf: TaskClassifier, f_s: Matrix, f_p: Matrix | None = None) -> Matrix:
    """Class probabilities, one row per sample."""
    z = _features_in(clf, f_s, f_p)
    if clf.combiner is not None:
        z = linear_forward(clf.combiner, z)
    logits = linear_forward(clf.output, z)
    return softmax(logits)


def predict(probs: Matrix) -> np.ndarray:
    """Argmax class per row (lowest index wins ties)."""
    return np.argmax(probs, axis=1).astype(np.int64)


def cross_entropy(probs: Matrix, labels: np.ndarray) -> float:
    """Mean negative log-likelihood; probabilities clamped at 1e-12."""
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeError(f"labels must lie in [0, {c - 1}]")
    picked = probs[np.arange(n), labels]
    return float(np.mean(-np.log(np.maximum(picked, 1e-12))))


def classifier_loss_and_grads(
    clf: TaskClassifier, f_s: Matrix, f_p: Matrix | None, labels: np.ndarray
) -> float:
    """Cross-entropy plus gradients accumulated into the classifier."""
    z = _features_in(clf, f_s, f_p)
    mid = linear_forward(clf.combiner, z) if clf.combiner is not None else z
    logits = linear_forward(clf.output, mid)
    probs = softmax(logits)
    loss = cross_entropy(probs, labels)

    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    dmid = linear_backward(clf.output, mid, dlogits)
    if clf.combiner is not None:
        linear_backward(clf.combiner, z, dmid)
    return loss


def task_features(
    model: UfdModel, clf: TaskClassifier, h: Matrix
) -> tuple[Matrix, Matrix | None]:
    """Run the (frozen or not) decomposition forward for this classifier's
    input mode."""
    _, f_s = fs_forward(model, h)
    if clf.input_mode is ClassifierInput.INVARIANT_SPECIFIC:
        _, f_p = fp_forward(model, h)
        return f_s, f_p
    return f_s, None


def task_train_step(
    clf: TaskClassifier, model: UfdModel, batch: Matrix, labels: np.ndarray
) -> float:
    """One classifier update against frozen decomposition features.

    Raises if the decomposition model is not frozen; its parameters are never
    touched here, which the freeze checksum tests rely on.
    """
    if not model.frozen:
        raise ContractError("decomposition model must be frozen during task training")
    f_s, f_p = task_features(model, clf, batch)
    clf.zero_grads()
    loss = classifier_loss_and_grads(clf, f_s, f_p, labels)
    adam_step(clf.adam, clf.param_arrays(), clf.grad_arrays())
    return loss


# ---------------------------------------------------------------------------
# Checkpointing


def classifier_tensors(clf: TaskClassifier) -> dict[str, np.ndarray]:
    out = {}
    for name, value, _ in clf.parameters():
        out[name] = value if value.ndim == 2 else value[None, :]
    return out


def save_classifier(clf: TaskClassifier, path) -> None:
    dataio.write_checkpoint(path, classifier_tensors(clf))


def load_classifier(path, learning_rate: float = 1e-4) -> TaskClassifier:
    tensors = dataio.read_checkpoint(path)
    if "output.weight" not in tensors:
        raise dataio.DataFormatError("checkpoint is missing tensor 'output.weight'")
    n_classes, dim = tensors["output.weight"].shape
    mode = (
        ClassifierInput.INVARIANT_SPECIFIC
        if "combiner.weight" in tensors
        else ClassifierInput.INVARIANT_ONLY
    )
    clf = TaskClassifier(dim, n_classes, mode, learning_rate=learning_rate)
    expected = classifier_tensors(clf)
    if set(tensors) != set(expected):
        raise dataio.DataFormatError(
            f"classifier checkpoint tensors {sorted(tensors)} do not match "
            f"expected {sorted(expected)}"
        )
    for name, value, _ in clf.parameters():
        stored = tensors[name]
        target_shape = value.shape if value.ndim == 2 else (1,) + value.shape
        if stored.shape != target_shape:
            raise dataio.DataFormatError(
                f"tensor {name!r} has shape {stored.shape}, expected {target_shape}"
            )
        value[...] = stored.reshape(value.shape)
    return clf
