"""Two-stage transfer protocol and experiment drivers.

Stage 1 trains the decomposition on unlabeled source-language documents from
every domain at once. Stage 2 freezes it and fits a task head on labeled
source-language data from one domain, selecting the epoch with the lowest
validation loss on a small labeled target-language set. Evaluation is
accuracy on a held-out target-language, target-domain test set. The grid
driver repeats this over every cross-domain pair and several seeds.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset, Manifest
from .decomp import (
    AblationMode,
    LossWeights,
    UfdModel,
    ufd_train_step,
)
from .nn import ContractError, Matrix, ShapeError, adam_step, make_rng, spawn_rng
from .task import (
    ClassifierInput,
    TaskClassifier,
    classifier_loss_and_grads,
    classify,
    cross_entropy,
    predict,
    task_features,
    task_train_step,
)

# child-stream keys, one per concern
_UFD_INIT = 100
_UFD_SHUFFLE = 101
_UFD_PAIRINGS = 102
_TASK_INIT = 110
_TASK_SHUFFLE = 111
_SUBSAMPLE = 120
_PROBE = 130


@dataclass
class ExperimentConfig:
    """Everything a run needs beyond the data itself."""

    dim: int = 1024
    n_classes: int = 2
    seed: int = 0
    ablation_mode: AblationMode = AblationMode.TWO_MAX_MIN_MI
    input_mode: ClassifierInput = ClassifierInput.INVARIANT_SPECIFIC
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-4
    ufd_epochs: int = 10
    task_epochs: int = 50
    ufd_batch: int = 16
    task_batch: int = 8
    unlabeled_per_domain: int = 50000
    validation_size: int = 100
    seeds_per_pair: int = 3
    select_by: str = "loss"  # "loss" or "accuracy"

    def __post_init__(self):
        if isinstance(self.ablation_mode, str):
            self.ablation_mode = AblationMode.from_name(self.ablation_mode)
        if isinstance(self.input_mode, str):
            self.input_mode = ClassifierInput.from_name(self.input_mode)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.dim < 2:
            raise ShapeError("dim must be at least 2")
        if self.ufd_batch < 2:
            raise ShapeError("ufd_batch must be at least 2 (pairing needs 2 rows)")
        if self.task_batch < 1:
            raise ShapeError("task_batch must be positive")
        for name in ("ufd_epochs", "task_epochs", "seeds_per_pair", "validation_size"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive")
        if self.unlabeled_per_domain < 2:
            raise ShapeError("unlabeled_per_domain must be at least 2")
        if self.select_by not in ("loss", "accuracy"):
            raise ShapeError("select_by must be 'loss' or 'accuracy'")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ablation_mode"] = self.ablation_mode.value
        out["input_mode"] = self.input_mode.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ShapeError(f"unknown config keys: {unknown}")
        return cls(**data)


def subsample_prefix(matrix: Matrix, size: int, seed: int, stream_index: int) -> Matrix:
    """Seeded subsample with the nesting property: for the same (seed,
    stream_index), a smaller size is always a prefix of a larger one."""
    n = matrix.shape[0]
    if size > n:
        raise ShapeError(f"cannot subsample {size} rows from {n}")
    order = spawn_rng(seed, _SUBSAMPLE, stream_index).permutation(n)
    return matrix[order[:size]]


def train_ufd_stage(
    config: ExperimentConfig, unlabeled: list[Dataset], seed: int | None = None
) -> tuple[UfdModel, list[dict[str, float]]]:
    """Stage 1: fit the decomposition on pooled unlabeled domain data.

    Each domain is capped at config.unlabeled_per_domain rows (seeded
    subsample). Returns the trained model and the per-step loss history.
    """
    if not unlabeled:
        raise ShapeError("need at least one unlabeled dataset")
    seed = config.seed if seed is None else seed
    parts = []
    for i, ds in enumerate(unlabeled):
        if ds.dim != config.dim:
            raise ShapeError(
                f"dataset dim {ds.dim} does not match config dim {config.dim}"
            )
        take = min(config.unlabeled_per_domain, ds.n)
        parts.append(subsample_prefix(ds.embeddings, take, seed, i))
    pooled = np.concatenate(parts, axis=0)
    if pooled.shape[0] < 2:
        raise ShapeError("stage 1 needs at least 2 unlabeled rows in total")

    model = UfdModel(
        config.dim, rng=spawn_rng(seed, _UFD_INIT), learning_rate=config.learning_rate
    )
    shuffle_rng = spawn_rng(seed, _UFD_SHUFFLE)
    pairing_rng = spawn_rng(seed, _UFD_PAIRINGS)
    history: list[dict[str, float]] = []
    n = pooled.shape[0]
    for epoch in range(config.ufd_epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.ufd_batch):
            idx = order[start : start + config.ufd_batch]
            if idx.size < 2:
                continue  # a 1-row tail cannot form negative pairs
            stats = ufd_train_step(
                model, pooled[idx], config.weights, config.ablation_mode, pairing_rng
            )
            history.append({"epoch": float(epoch), **stats})
    return model, history


@dataclass
class TaskStageInfo:
    """Validation trace and the selected epoch of one stage-2 run."""

    val_losses: list[float]
    val_accuracies: list[float]
    best_epoch: int
    best_val_loss: float
    best_val_accuracy: float


def train_task_stage(
    config: ExperimentConfig,
    model: UfdModel,
    train: Dataset,
    validation: Dataset,
    seed: int | None = None,
) -> tuple[TaskClassifier, TaskStageInfo]:
    """Stage 2: fit the task head against the frozen decomposition.

    After every epoch the head is scored on the validation set; the epoch
    minimizing validation loss (or maximizing accuracy when select_by is
    "accuracy") is returned, earliest epoch winning ties.
    """
    if not model.frozen:
        raise ContractError("freeze the decomposition model before stage 2")
    if train.labels is None or validation.labels is None:
        raise ShapeError("stage 2 needs labeled train and validation sets")
    if train.dim != config.dim or validation.dim != config.dim:
        raise ShapeError("train/validation dim does not match config dim")
    if validation.n != config.validation_size:
        raise ShapeError(
            f"validation set has {validation.n} rows, config expects "
            f"{config.validation_size}"
        )
    seed = config.seed if seed is None else seed

    clf = TaskClassifier(
        config.dim,
        n_classes=config.n_classes,
        input_mode=config.input_mode,
        rng=spawn_rng(seed, _TASK_INIT),
        learning_rate=config.learning_rate,
    )
    shuffle_rng = spawn_rng(seed, _TASK_SHUFFLE)
    x, y = train.embeddings, train.labels
    val_fs, val_fp = task_features(model, clf, validation.embeddings)

    best: tuple[float, int, TaskClassifier] | None = None
    losses: list[float] = []
    accuracies: list[float] = []
    for epoch in range(config.task_epochs):
        order = shuffle_rng.permutation(train.n)
        for start in range(0, train.n, config.task_batch):
            idx = order[start : start + config.task_batch]
            task_train_step(clf, model, x[idx], y[idx])
        probs = classify(clf, val_fs, val_fp)
        val_loss = cross_entropy(probs, validation.labels)
        val_acc = float(np.mean(predict(probs) == validation.labels))
        losses.append(val_loss)
        accuracies.append(val_acc)
        metric = val_loss if config.select_by == "loss" else -val_acc
        if best is None or metric < best[0]:  # strict: ties keep the earliest
            best = (metric, epoch, copy.deepcopy(clf))
    assert best is not None
    _, best_epoch, best_clf = best
    info = TaskStageInfo(
        losses, accuracies, best_epoch, losses[best_epoch], accuracies[best_epoch]
    )
    return best_clf, info


def evaluate(model: UfdModel, clf: TaskClassifier, test: Dataset) -> float:
    """Accuracy of the classifier on a labeled dataset."""
    if test.labels is None:
        raise ShapeError("evaluation needs a labeled dataset")
    f_s, f_p = task_features(model, clf, test.embeddings)
    return float(np.mean(predict(classify(clf, f_s, f_p)) == test.labels))


def identity_model(dim: int) -> UfdModel:
    """Frozen all-zero decomposition; the residual paths make f_s == h."""
    model = UfdModel(dim, rng=make_rng(0))
    for _, value, _ in model.parameters():
        value[...] = 0.0
    model.freeze()
    return model


def train_linear_baseline(
    config: ExperimentConfig, train: Dataset, seed: int | None = None
) -> tuple[UfdModel, TaskClassifier]:
    """Softmax regression on raw embeddings, the transfer reference point.

    Same head, optimizer, and training budget as the task stage, but no
    validation-based selection: the classifier is taken at its final weights,
    the way a plain supervised run with no target access would be. Returns
    the identity decomposition alongside the head so `evaluate` works on the
    pair.
    """
    if train.labels is None:
        raise ShapeError("the baseline needs a labeled training set")
    if train.dim != config.dim:
        raise ShapeError("train dim does not match config dim")
    seed = config.seed if seed is None else seed

    model = identity_model(config.dim)
    clf = TaskClassifier(
        config.dim,
        n_classes=config.n_classes,
        input_mode=ClassifierInput.INVARIANT_ONLY,
        rng=spawn_rng(seed, _TASK_INIT),
        learning_rate=config.learning_rate,
    )
    shuffle_rng = spawn_rng(seed, _TASK_SHUFFLE)
    x, y = train.embeddings, train.labels
    for _ in range(config.task_epochs):
        order = shuffle_rng.permutation(train.n)
        for start in range(0, train.n, config.task_batch):
            idx = order[start : start + config.task_batch]
            task_train_step(clf, model, x[idx], y[idx])
    return model, clf


# ---------------------------------------------------------------------------
# Grid and sweep drivers


@dataclass
class PairOutcome:
    source_language: str
    source_domain: str
    target_language: str
    target_domain: str
    seed_index: int
    ufd_loss: float
    task_val_loss: float
    accuracy: float

    @property
    def pair(self) -> str:
        return (
            f"{self.source_language}-{self.source_domain}->"
            f"{self.target_language}-{self.target_domain}"
        )


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list[PairOutcome]

    def pairs(self) -> list[str]:
        seen: list[str] = []
        for row in self.rows:
            if row.pair not in seen:
                seen.append(row.pair)
        return seen

    def pair_mean(self, pair: str) -> float:
        vals = [r.accuracy for r in self.rows if r.pair == pair]
        if not vals:
            raise ShapeError(f"no results for pair {pair!r}")
        return float(np.mean(vals))

    def cell_mean(self, target_language: str, target_domain: str) -> float:
        vals = [
            r.accuracy
            for r in self.rows
            if r.target_language == target_language
            and r.target_domain == target_domain
        ]
        if not vals:
            raise ShapeError(f"no results for cell {target_language}-{target_domain}")
        return float(np.mean(vals))

    def cells(self) -> list[tuple[str, str]]:
        seen: list[tuple[str, str]] = []
        for row in self.rows:
            key = (row.target_language, row.target_domain)
            if key not in seen:
                seen.append(key)
        return seen

    def overall_mean(self) -> float:
        if not self.rows:
            raise ShapeError("report has no rows")
        return float(np.mean([r.accuracy for r in self.rows]))


def _final_epoch_mean_loss(history: list[dict[str, float]]) -> float:
    last = history[-1]["epoch"]
    vals = [h["total"] for h in history if h["epoch"] == last]
    return float(np.mean(vals))


def run_experiment_grid(config: ExperimentConfig, manifest: Manifest) -> ExperimentReport:
    """Every cross-domain (source train -> target test) pair, several seeds.

    Stage 1 runs once per seed on all source-language unlabeled sets and is
    shared by every pair under that seed.
    """
    if manifest.dimension != config.dim:
        raise ShapeError(
            f"manifest dimension {manifest.dimension} does not match config "
            f"dim {config.dim}"
        )
    src = manifest.source_language
    unlabeled_domains = manifest.domains(src, "unlabeled")
    if not unlabeled_domains:
        raise ShapeError(f"manifest has no unlabeled {src!r} datasets")
    train_domains = manifest.domains(src, "train")
    cells = [
        (lang, dom)
        for lang in manifest.languages()
        if lang != src
        for dom in manifest.domains(lang, "test")
    ]
    if not cells:
        raise ShapeError("manifest has no target-language test datasets")
    pairs = []
    for lang, dom in cells:
        sources = [d for d in train_domains if d != dom]
        if not sources:
            raise ShapeError(
                f"no cross-domain source train set for target cell {lang}-{dom}"
            )
        pairs.extend((s, lang, dom) for s in sources)

    unlabeled = [manifest.get(src, d, "unlabeled") for d in unlabeled_domains]
    rows: list[PairOutcome] = []
    for seed_index in range(config.seeds_per_pair):
        seed = config.seed + seed_index
        model, history = train_ufd_stage(config, unlabeled, seed=seed)
        model.freeze()
        ufd_loss = _final_epoch_mean_loss(history)
        for source_domain, lang, dom in pairs:
            clf, info = train_task_stage(
                config,
                model,
                manifest.get(src, source_domain, "train"),
                manifest.get(lang, dom, "validation"),
                seed=seed,
            )
            acc = evaluate(model, clf, manifest.get(lang, dom, "test"))
            rows.append(
                PairOutcome(
                    src, source_domain, lang, dom, seed_index,
                    ufd_loss, info.best_val_loss, acc,
                )
            )
    return ExperimentReport(config, rows)


def run_size_sweep(
    config: ExperimentConfig, manifest: Manifest, sizes: list[int]
) -> list[tuple[int, ExperimentReport]]:
    """Repeat the grid at several unlabeled-data sizes.

    Subsampling is seeded per domain independently of the size, so smaller
    sizes use exact prefixes of larger ones.
    """
    src = manifest.source_language
    available = [
        manifest.get(src, d, "unlabeled").n for d in manifest.domains(src, "unlabeled")
    ]
    out = []
    for size in sizes:
        if size < 2:
            raise ShapeError(f"sweep size must be at least 2, got {size}")
        if available and size > min(available):
            raise ShapeError(
                f"sweep size {size} exceeds smallest unlabeled set ({min(available)})"
            )
        cfg = dataclasses.replace(config, unlabeled_per_domain=size)
        out.append((size, run_experiment_grid(cfg, manifest)))
    return out


# ---------------------------------------------------------------------------
# Linear probes (baselines and feature diagnostics)


def train_softmax_probe(
    features: Matrix,
    labels: np.ndarray,
    n_classes: int,
    seed: int,
    epochs: int = 30,
    batch: int = 32,
    learning_rate: float = 1e-2,
) -> TaskClassifier:
    """Plain softmax regression on fixed feature rows."""
    clf = TaskClassifier(
        features.shape[1],
        n_classes=n_classes,
        input_mode=ClassifierInput.INVARIANT_ONLY,
        rng=spawn_rng(seed, _PROBE, 0),
        learning_rate=learning_rate,
    )
    shuffle_rng = spawn_rng(seed, _PROBE, 1)
    n = features.shape[0]
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            clf.zero_grads()
            classifier_loss_and_grads(clf, features[idx], None, labels[idx])
            adam_step(clf.adam, clf.param_arrays(), clf.grad_arrays())
    return clf


def probe_holdout_accuracy(
    features: Matrix,
    labels: np.ndarray,
    n_classes: int,
    seed: int,
    train_frac: float = 0.8,
    epochs: int = 30,
    batch: int = 32,
    learning_rate: float = 1e-2,
) -> float:
    """Accuracy of a softmax probe on a seeded holdout split of the rows.

    Features are standardized per coordinate with statistics fitted on the
    probe's train split, so the score reflects linearly decodable information
    rather than the feature scale handed to the optimizer.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if n < 5:
        raise ShapeError("probe needs at least 5 rows")
    order = spawn_rng(seed, _PROBE, 2).permutation(n)
    cut = max(1, int(round(train_frac * n)))
    if cut >= n:
        cut = n - 1
    tr, ho = order[:cut], order[cut:]
    mean = features[tr].mean(axis=0)
    std = features[tr].std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    x_tr = (features[tr] - mean) / std
    x_ho = (features[ho] - mean) / std
    probe = train_softmax_probe(
        x_tr, labels[tr], n_classes, seed, epochs, batch, learning_rate
    )
    probs = classify(probe, x_ho)
    return float(np.mean(predict(probs) == labels[ho]))


# ---------------------------------------------------------------------------
# Report serialization


def report_to_csv(report: ExperimentReport, path) -> None:
    lines = ["pair,seed,ufd_loss,task_val_loss,accuracy"]
    for r in report.rows:
        lines.append(
            f"{r.pair},{r.seed_index},{r.ufd_loss!r},{r.task_val_loss!r},{r.accuracy!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def report_to_text(report: ExperimentReport) -> str:
    out = ["configuration:"]
    cfg = report.config.to_dict()
    out.extend(f"  {k}: {json.dumps(cfg[k], sort_keys=True)}" for k in sorted(cfg))
    out.append("")
    out.append("results (accuracy per pair and seed):")
    for r in report.rows:
        out.append(
            f"  {r.pair} seed={r.seed_index} ufd_loss={r.ufd_loss:.6f} "
            f"val_loss={r.task_val_loss:.6f} accuracy={r.accuracy:.4f}"
        )
    out.append("")
    out.append("pair means:")
    for pair in report.pairs():
        out.append(f"  {pair}: {report.pair_mean(pair):.4f}")
    out.append("")
    out.append("target-cell means (averaged over source domains and seeds):")
    for lang, dom in report.cells():
        out.append(f"  {lang}-{dom}: {report.cell_mean(lang, dom):.4f}")
    out.append("")
    out.append(f"overall mean accuracy: {report.overall_mean():.4f}")
    out.append("")
    return "\n".join(out)


def write_report(report: ExperimentReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_to_csv(report, out_dir / "results.csv")
    (out_dir / "report.txt").write_text(report_to_text(report))
